#include "loopstage/session.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "loopstage/error.hpp"
#include "loopstage/log.hpp"

namespace loopstage {
using nlohmann::json;

namespace {

const char* kind_text(RecordedEvent::Kind k) {
  return k == RecordedEvent::Kind::kTrigger ? "trigger" : "param";
}

SynthesisEngine make_engine(const Project& project) {
  return SynthesisEngine(project.layer_models(), project.compatibility.snapshot(),
                         project.manifest.parameters.synthesis);
}

// Applies one event's effect on requests and parameters; returns false for
// events that do not touch synthesis.
bool apply_event(SynthesisEngine& engine, const RecordedEvent& e) {
  if (e.kind == RecordedEvent::Kind::kTrigger) {
    const int d = engine.layer_index(e.layer);
    if (d < 0) throw InvalidRequest("unknown layer '" + e.layer + "'");
    const int action = engine.layer(d).actions.index_of(e.action);
    if (action < 0) {
      throw InvalidRequest("layer '" + e.layer + "' has no action '" + e.action + "'");
    }
    engine.requests(d).trigger(e.column, action, e.ramp_len);
    return true;
  }
  if (e.name == "quality") return false;
  const SynthesisParams next = apply_param(engine.schedule().at(e.column), e.name, e.value);
  engine.schedule().set_from(e.column, next);
  return true;
}

}  // namespace

SynthesisParams apply_param(SynthesisParams p, std::string_view name, const json& value) {
  try {
    if (name == "alpha") {
      p.alpha = value.get<double>();
    } else if (name == "beta") {
      p.beta = value.get<double>();
    } else if (name == "sigma_a") {
      p.sigma_a = value.get<double>();
    } else if (name == "compression") {
      p.compression = value.get<int>();
    } else if (name == "ramp_len") {
      p.ramp_len = value.get<int>();
    } else if (name == "iterations") {
      p.iterations = value.get<int>();
    } else {
      throw InvalidRequest("unknown parameter '" + std::string(name) + "'");
    }
  } catch (const json::exception&) {
    throw InvalidRequest("parameter '" + std::string(name) + "' needs a numeric value");
  }
  p.validate();
  return p;
}

RenderQuality parse_quality(const json& value) {
  if (value == "live") return RenderQuality::kLive;
  if (value == "final") return RenderQuality::kFinal;
  throw InvalidRequest("quality must be \"live\" or \"final\"");
}

void PerformanceRecording::validate() const {
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (events[i].timestamp_ms < events[i - 1].timestamp_ms) {
      throw InvalidRequest("recording timestamps decrease at event " + std::to_string(i));
    }
  }
}

json PerformanceRecording::to_json() const {
  json list = json::array();
  for (const RecordedEvent& e : events) {
    json j = {{"type", kind_text(e.kind)},
              {"timestamp_ms", e.timestamp_ms},
              {"playhead", e.playhead},
              {"column", e.column}};
    if (e.kind == RecordedEvent::Kind::kTrigger) {
      j["layer"] = e.layer;
      j["action"] = e.action;
      j["ramp_len"] = e.ramp_len;
    } else {
      j["name"] = e.name;
      j["value"] = e.value;
    }
    list.push_back(std::move(j));
  }
  return {{"manifest_hash", manifest_hash}, {"columns", columns}, {"events", list}};
}

PerformanceRecording PerformanceRecording::from_json(const json& j) {
  PerformanceRecording r;
  try {
    r.manifest_hash = j.at("manifest_hash").get<std::string>();
    r.columns = j.value("columns", 0);
    for (const json& je : j.value("events", json::array())) {
      RecordedEvent e;
      const auto type = je.at("type").get<std::string>();
      if (type != "trigger" && type != "param") throw InvalidRequest("unknown event type '" + type + "'");
      e.kind = type == "trigger" ? RecordedEvent::Kind::kTrigger : RecordedEvent::Kind::kParam;
      e.timestamp_ms = je.at("timestamp_ms").get<std::int64_t>();
      e.playhead = je.value("playhead", 0);
      e.column = je.at("column").get<int>();
      if (e.kind == RecordedEvent::Kind::kTrigger) {
        e.layer = je.at("layer").get<std::string>();
        e.action = je.at("action").get<std::string>();
        e.ramp_len = je.at("ramp_len").get<int>();
      } else {
        e.name = je.at("name").get<std::string>();
        e.value = je.at("value");
      }
      r.events.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw InvalidRequest(std::string("malformed recording: ") + e.what());
  }
  if (r.columns < 0) throw InvalidRequest("recording has a negative column count");
  r.validate();
  return r;
}

void PerformanceRecording::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw AssetError("cannot write recording: " + path.string());
  out << to_json().dump(2) << '\n';
}

PerformanceRecording PerformanceRecording::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw AssetError("missing recording: " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw AssetError(path.string() + ": " + e.what());
  }
}

Session::Session(std::shared_ptr<const Project> project)
    : project_(std::move(project)),
      config_(project_->manifest.parameters.live),
      engine_(make_engine(*project_)),
      quality_(project_->manifest.parameters.quality) {
  synthesize(config_.block);
}

void Session::synthesize(int count) {
  const auto start = std::chrono::steady_clock::now();
  const BlockReport report = engine_.synthesize_block(count);
  last_block_ms_ =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  if (report.fallback_columns > 0) {
    log_warning("synthesis block at column " + std::to_string(report.first_column) + " needed " +
                std::to_string(report.fallback_columns) + " fallback columns");
  }
}

Session::Column Session::advance() {
  if (buffered() < config_.low_water) synthesize(config_.block);
  Column c;
  c.column = playhead_;
  for (const OutputLayer& l : engine_.timeline().layers) c.frames.push_back(l.frames.at(playhead_));
  ++playhead_;
  return c;
}

std::int64_t Session::stamp(std::int64_t timestamp_ms) {
  if (!events_.empty()) timestamp_ms = std::max(timestamp_ms, events_.back().timestamp_ms);
  return timestamp_ms;
}

int Session::trigger(std::string_view layer, std::string_view action, std::int64_t timestamp_ms) {
  RecordedEvent e;
  e.kind = RecordedEvent::Kind::kTrigger;
  e.playhead = playhead_;
  e.column = playhead_ + config_.commit_offset;
  e.layer = std::string(layer);
  e.action = std::string(action);
  if (engine_.columns() < e.column) synthesize(e.column - engine_.columns());
  e.ramp_len = engine_.schedule().at(e.column).ramp_len;
  apply_event(engine_, e);
  e.timestamp_ms = stamp(timestamp_ms);
  engine_.truncate(e.column);
  synthesize(config_.block);
  events_.push_back(std::move(e));
  return events_.back().column;
}

int Session::set_param(std::string_view name, const json& value, std::int64_t timestamp_ms) {
  RecordedEvent e;
  e.kind = RecordedEvent::Kind::kParam;
  e.playhead = playhead_;
  e.column = engine_.columns();
  e.name = std::string(name);
  e.value = value;
  if (name == "quality") {
    quality_ = parse_quality(value);
  } else {
    apply_event(engine_, e);
  }
  e.timestamp_ms = stamp(timestamp_ms);
  events_.push_back(std::move(e));
  return events_.back().column;
}

PerformanceRecording Session::recording() const {
  PerformanceRecording r;
  r.manifest_hash = project_->hash;
  r.columns = playhead_;
  r.events = events_;
  return r;
}

OutputTimeline Session::played_timeline() const {
  OutputTimeline t = engine_.timeline();
  for (OutputLayer& l : t.layers) l.frames.resize(playhead_);
  return t;
}

OutputTimeline replay_recording(std::shared_ptr<const Project> project,
                                const PerformanceRecording& recording) {
  Session session(std::move(project));
  for (const RecordedEvent& e : recording.events) {
    if (e.playhead < session.playhead()) throw InvalidRequest("recording playheads decrease");
    while (session.playhead() < e.playhead) session.advance();
    if (e.kind == RecordedEvent::Kind::kTrigger) {
      session.trigger(e.layer, e.action, e.timestamp_ms);
    } else {
      session.set_param(e.name, e.value, e.timestamp_ms);
    }
  }
  while (session.playhead() < recording.columns) session.advance();
  return session.played_timeline();
}

OfflineResult synthesize_offline(const Project& project, std::span<const RecordedEvent> events,
                                 int columns, const OutputTimeline* live) {
  SynthesisEngine engine = make_engine(project);
  for (const RecordedEvent& e : events) apply_event(engine, e);
  // Full quality: no compression anywhere.
  std::map<int, SynthesisParams> entries = engine.schedule().entries();
  for (auto& [column, p] : entries) {
    p.compression = 1;
    engine.schedule().set_from(column, p);
  }

  OfflineResult result;
  engine.synthesize_block(columns);
  const int sweeps = project.manifest.parameters.refine_sweeps;
  result.refined_rows = engine.refine(sweeps);
  result.energy = engine.total_energy();
  if (live != nullptr) {
    result.live_energy = engine.total_energy(*live);
    if (result.energy > result.live_energy) {
      engine.replace_timeline(*live);
      result.refined_rows = engine.refine(sweeps);
      result.energy = engine.total_energy();
      result.warm_started = true;
    }
  }
  result.timeline = engine.timeline();
  return result;
}

OfflineResult resynthesize_recording(std::shared_ptr<const Project> project,
                                     const PerformanceRecording& recording) {
  if (recording.manifest_hash != project->hash) {
    throw InvalidRequest("recording was made with manifest " + recording.manifest_hash +
                         ", project is " + project->hash);
  }
  recording.validate();
  const OutputTimeline live = replay_recording(project, recording);
  return synthesize_offline(*project, recording.events, recording.columns, &live);
}

std::vector<RecordedEvent> control_sequence_triggers(const Project& project,
                                                     std::span<const Image> control_frames) {
  const ProjectManifest& m = project.manifest;
  std::vector<std::string> current;
  for (const LayerSpec& l : m.layers) {
    if (!l.anchor) throw InvalidRequest("layer '" + l.id + "' has no anchor pixel");
    current.push_back(l.default_action);
  }
  std::vector<RecordedEvent> events;
  for (std::size_t k = 0; k < control_frames.size(); ++k) {
    const Image& frame = control_frames[k];
    for (std::size_t d = 0; d < m.layers.size(); ++d) {
      const LayerSpec& l = m.layers[d];
      const auto [x, y] = *l.anchor;
      if (x >= frame.width() || y >= frame.height()) {
        throw InvalidRequest("anchor of layer '" + l.id + "' lies outside control frame " + std::to_string(k));
      }
      const std::uint8_t* px = frame.at(x, y);
      const ActorSpec& actor = *m.find_actor(l.actor);
      const ColorAction* best = nullptr;
      int best_distance = m.bynumbers.tolerance + 1;
      for (const ColorAction& c : m.bynumbers.colors) {
        if (std::none_of(actor.actions.begin(), actor.actions.end(),
                         [&](const ActionDef& a) { return a.id == c.action; })) {
          continue;
        }
        int distance = 0;
        for (int ch = 0; ch < 3; ++ch) distance = std::max(distance, std::abs(px[ch] - c.color[ch]));
        if (distance < best_distance) {
          best = &c;
          best_distance = distance;
        }
      }
      if (best == nullptr || best->action == current[d]) continue;
      current[d] = best->action;
      RecordedEvent e;
      e.kind = RecordedEvent::Kind::kTrigger;
      e.column = static_cast<int>(k);
      e.playhead = std::max(0, e.column - m.parameters.live.commit_offset);
      e.timestamp_ms = static_cast<std::int64_t>(1000.0 * static_cast<double>(k) / m.frame_rate);
      e.layer = l.id;
      e.action = best->action;
      e.ramp_len = m.parameters.synthesis.ramp_len;
      events.push_back(std::move(e));
    }
  }
  return events;
}

}  // namespace loopstage
