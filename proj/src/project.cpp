#include "loopstage/project.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "loopstage/content_hash.hpp"
#include "loopstage/error.hpp"
#include "loopstage/log.hpp"
#include "loopstage/png_io.hpp"

namespace loopstage {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFieldMagic[4] = {'L', 'S', 'A', 'F'};
constexpr std::uint32_t kFieldVersion = 1;

const char* kind_name(ActorKind k) { return k == ActorKind::kTracked ? "tracked" : "full_frame"; }

ActorKind parse_kind(const std::string& s) {
  if (s == "tracked") return ActorKind::kTracked;
  if (s == "full_frame") return ActorKind::kFullFrame;
  throw AssetError("unknown actor kind '" + s + "'");
}

const char* verdict_text(Verdict v) {
  return v == Verdict::kCompatible ? "compatible" : "incompatible";
}

Verdict parse_verdict(const std::string& s) {
  if (s == "compatible") return Verdict::kCompatible;
  if (s == "incompatible") return Verdict::kIncompatible;
  throw AssetError("unknown verdict '" + s + "'");
}

json mode_json(const std::optional<TagMode>& m) {
  if (!m) return nullptr;
  return *m == TagMode::kSpecialize ? "specialize" : "refine";
}

std::optional<TagMode> parse_mode(const json& j) {
  if (j.is_null()) return std::nullopt;
  const auto s = j.get<std::string>();
  if (s == "specialize") return TagMode::kSpecialize;
  if (s == "refine") return TagMode::kRefine;
  throw AssetError("unknown tag mode '" + s + "'");
}

std::string path_text(const fs::path& p) { return p.generic_string(); }

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j, const char* key, std::optional<T> fallback) {
  if (!j.contains(key)) return fallback;
  if (j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

json propagation_json(const PropagationParams& p) {
  return {{"knn", p.knn}, {"sigma", optional_json(p.sigma)}, {"tolerance", p.tolerance}};
}

json segmentation_json(const SegmentationParams& p) {
  return {{"alpha", p.alpha},           {"sigma", optional_json(p.sigma)},
          {"bg_unary", p.bg_unary},     {"seam_weight", p.seam_weight},
          {"dilation", p.dilation},     {"temporal_prior_without_mask", p.temporal_prior_without_mask}};
}

void check_unique(std::set<std::string>& seen, const std::string& id, const std::string& what) {
  if (id.empty()) throw AssetError(what + " with empty id");
  if (!seen.insert(id).second) throw AssetError("duplicate " + what + " id '" + id + "'");
}

int action_index(const ActorSpec& actor, const std::string& id) {
  for (std::size_t i = 0; i < actor.actions.size(); ++i) {
    if (actor.actions[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

void validate_ids(const ProjectManifest& m) {
  std::set<std::string> actor_ids;
  for (const ActorSpec& a : m.actors) {
    check_unique(actor_ids, a.id, "actor");
    if (a.actions.empty()) throw AssetError("actor '" + a.id + "' defines no actions");
    std::set<std::string> action_ids;
    std::set<std::string> keys;
    for (const ActionDef& d : a.actions) {
      check_unique(action_ids, d.id, "action");
      if (!d.key.empty() && !keys.insert(d.key).second) {
        throw AssetError("actor '" + a.id + "' binds key '" + d.key + "' twice");
      }
    }
    for (const auto& [action, frames] : a.examples) {
      if (action_index(a, action) < 0) {
        throw AssetError("examples of actor '" + a.id + "' reference undefined action '" + action + "'");
      }
    }
    if (a.kind == ActorKind::kTracked && a.boxes.empty()) {
      throw AssetError("tracked actor '" + a.id + "' has no box file");
    }
    if (a.frames.empty()) throw AssetError("actor '" + a.id + "' has no frame directory");
  }
  std::set<std::string> layer_ids;
  for (const LayerSpec& l : m.layers) {
    check_unique(layer_ids, l.id, "layer");
    const ActorSpec* actor = m.find_actor(l.actor);
    if (actor == nullptr) {
      throw AssetError("layer '" + l.id + "' references undefined actor '" + l.actor + "'");
    }
    if (action_index(*actor, l.default_action) < 0) {
      throw AssetError("layer '" + l.id + "' requests action '" + l.default_action +
                       "' not defined on actor '" + l.actor + "'");
    }
  }
  std::set<std::pair<std::string, std::string>> pairs;
  for (const CompatibilityPairSpec& p : m.compatibility) {
    for (const std::string* id : {&p.actor_a, &p.actor_b}) {
      if (m.find_actor(*id) == nullptr) {
        throw AssetError("compatibility pair references undefined actor '" + *id + "'");
      }
    }
    if (p.actor_a == p.actor_b) throw AssetError("compatibility pair of actor '" + p.actor_a + "' with itself");
    if (!pairs.insert(pair_key(p.actor_a, p.actor_b)).second) {
      throw AssetError("compatibility pair " + p.actor_a + "/" + p.actor_b + " listed twice");
    }
  }
  for (const ColorAction& c : m.bynumbers.colors) {
    const bool defined = std::any_of(m.actors.begin(), m.actors.end(),
                                     [&](const ActorSpec& a) { return action_index(a, c.action) >= 0; });
    if (!defined) throw AssetError("control color maps to undefined action '" + c.action + "'");
  }
  m.parameters.synthesis.validate();
  const LiveConfig& live = m.parameters.live;
  if (live.block < 1 || live.low_water < 1 || live.commit_offset < 1) {
    throw AssetError("live scheduling constants must be positive");
  }
}

std::uint64_t hash_frames(const FrameSequence& seq) {
  ContentHash h;
  h.integer(seq.width).integer(seq.height).integer(seq.size());
  for (const Image& f : seq.frames) h.bytes(f.data());
  return h.value();
}

std::uint64_t hash_masks_inputs(const LoadedActor& a, const SegmentationParams& p) {
  ContentHash h;
  h.integer(static_cast<std::int64_t>(a.frames_hash));
  for (const OrientedBox& b : a.sequence->boxes) {
    h.number(b.cx).number(b.cy).number(b.width).number(b.height).number(b.angle);
  }
  h.text(scribbles_to_json(a.scribbles).dump());
  h.text(segmentation_json(p).dump());
  h.integer(a.sequence->has_flow());
  for (const FlowField& f : a.sequence->flow) {
    h.bytes({reinterpret_cast<const std::uint8_t*>(f.data().data()), f.data().size_bytes()});
  }
  return h.value();
}

std::uint64_t hash_metric_inputs(const LoadedActor& a, int jump_candidates) {
  ContentHash h;
  h.text("metric").integer(static_cast<std::int64_t>(a.frames_hash));
  h.text(kind_name(a.spec.kind)).integer(jump_candidates);
  for (const OrientedBox& b : a.sequence->boxes) {
    h.number(b.cx).number(b.cy).number(b.width).number(b.height).number(b.angle);
  }
  for (const Mask& m : a.sequence->masks) h.bytes(m.data());
  return h.value();
}

std::uint64_t hash_field_inputs(std::uint64_t metric_hash, const LoadedActor& a,
                                const PropagationParams& p) {
  ContentHash h;
  h.text("field").integer(static_cast<std::int64_t>(metric_hash));
  h.integer(a.actions.size());
  for (const auto& [frame, action] : a.examples) h.integer(frame).integer(action);
  h.text(propagation_json(p).dump());
  return h.value();
}

std::optional<std::uint64_t> read_hash_file(const fs::path& path) {
  std::ifstream in(path);
  std::string text;
  if (!(in >> text)) return std::nullopt;
  try {
    return std::stoull(text, nullptr, 16);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void write_hash_file(const fs::path& path, std::uint64_t hash) {
  std::ofstream out(path);
  out << hash_hex(hash) << '\n';
}

bool has_numbered_pngs(const fs::path& dir) {
  return fs::is_directory(dir) && fs::exists(dir / numbered_png_name(0));
}

LoadedActor load_actor_assets(const ProjectManifest& m, const ActorSpec& spec,
                              const fs::path& cache, const LoadOptions& options) {
  LoadedActor a;
  a.spec = spec;
  a.actions = ActionSet{spec.id, spec.actions};
  auto source = std::make_shared<FrameSequence>(read_frame_directory(m.resolve(spec.frames), m.frame_rate));
  try {
    source->validate(2);
  } catch (const AssetError& e) {
    throw AssetError("actor '" + spec.id + "': " + e.what());
  }
  a.frames_hash = hash_frames(*source);
  const int n = source->size();

  for (const auto& [action, frames] : spec.examples) {
    const int index = action_index(spec, action);
    for (int f : frames) {
      if (f < 0 || f >= n) {
        throw AssetError("example frame " + std::to_string(f) + " of action '" + action +
                         "' is outside actor '" + spec.id + "'");
      }
      a.examples[f] = index;
    }
  }

  a.sequence = std::make_shared<ActorSequence>();
  a.sequence->id = spec.id;
  a.sequence->source = source;
  a.sequence->kind = spec.kind;
  if (spec.kind == ActorKind::kTracked) a.sequence->boxes = read_boxes_csv(m.resolve(spec.boxes));
  if (!spec.flow.empty()) {
    const fs::path dir = m.resolve(spec.flow);
    if (!fs::is_directory(dir)) throw AssetError("missing flow directory: " + dir.string());
    a.sequence->flow = read_flow_directory(dir, n);
  }
  if (!spec.scribbles.empty()) {
    const fs::path p = m.resolve(spec.scribbles);
    std::ifstream in(p);
    if (!in) throw AssetError("missing scribble file: " + p.string());
    try {
      a.scribbles = scribbles_from_json(json::parse(in));
    } catch (const json::exception& e) {
      throw AssetError(p.string() + ": " + e.what());
    }
    validate_scribbles(a.scribbles);
  }

  const fs::path bg_png = cache / "background.png";
  const fs::path bg_hash = cache / "background.hash";
  if (read_hash_file(bg_hash) == a.frames_hash && fs::exists(bg_png)) {
    a.background = read_png_rgb(bg_png);
  } else {
    a.background = estimate_background(*source);
    if (options.write_cache) {
      fs::create_directories(cache);
      write_png(bg_png, a.background);
      write_hash_file(bg_hash, a.frames_hash);
    }
  }

  if (spec.kind == ActorKind::kTracked) {
    const fs::path user_masks = spec.masks.empty() ? fs::path() : m.resolve(spec.masks);
    const fs::path cached_masks = cache / "masks";
    const std::uint64_t mask_hash = hash_masks_inputs(a, m.parameters.segmentation);
    if (!user_masks.empty() && has_numbered_pngs(user_masks)) {
      a.sequence->masks = read_mask_directory(user_masks, n);
    } else if (read_hash_file(cache / "masks.hash") == mask_hash && has_numbered_pngs(cached_masks)) {
      a.sequence->masks = read_mask_directory(cached_masks, n);
    } else if (options.prepare && options.segment_missing_masks) {
      log_info("segmenting actor '" + spec.id + "'");
      a.sequence->masks = segment_actor(*a.sequence, a.background, a.scribbles, m.parameters.segmentation);
      if (options.write_cache) {
        write_mask_directory(cached_masks, a.sequence->masks);
        write_hash_file(cache / "masks.hash", mask_hash);
      }
    }
  }
  try {
    a.sequence->validate();
  } catch (const AssetError& e) {
    throw AssetError("actor '" + spec.id + "': " + e.what());
  }
  return a;
}

void prepare_actor_derived(const ProjectManifest& m, LoadedActor& a, const fs::path& cache,
                           const LoadOptions& options) {
  const ProjectParameters& p = m.parameters;
  const std::uint64_t metric_hash = hash_metric_inputs(a, p.jump_candidates);
  const fs::path metric_path = cache / "metric.bin";
  if (auto cached = load_metric_cache(metric_path, metric_hash)) {
    a.matrix = std::make_shared<DistanceMatrix>(std::move(cached->matrix));
    a.graph = std::make_shared<JumpGraph>(std::move(cached->graph));
  } else if (options.prepare) {
    log_info("computing distances for actor '" + a.spec.id + "'");
    auto matrix = std::make_shared<DistanceMatrix>(build_distance_matrix(*a.sequence, a.background, options.threads));
    auto graph = std::make_shared<JumpGraph>(build_jump_graph(*matrix, p.jump_candidates));
    if (options.write_cache) {
      fs::create_directories(cache);
      save_metric_cache(metric_path, metric_hash, *matrix, *graph);
    }
    a.matrix = std::move(matrix);
    a.graph = std::move(graph);
  } else {
    a.matrix.reset();
    a.graph.reset();
    a.field.reset();
    return;
  }

  for (int action = 0; action < a.actions.size(); ++action) {
    const bool has = std::any_of(a.examples.begin(), a.examples.end(),
                                 [&](const auto& e) { return e.second == action; });
    if (!has) {
      throw AssetError("action '" + a.actions.actions[action].id + "' of actor '" + a.spec.id +
                       "' has no example frames");
    }
  }
  const std::uint64_t field_hash = hash_field_inputs(metric_hash, a, p.propagation);
  const fs::path field_path = cache / "field.bin";
  if (auto cached = load_field_cache(field_path, field_hash)) {
    a.field = std::make_shared<ActionVectorField>(std::move(cached->first));
    a.propagation_sigma = cached->second;
  } else if (options.prepare) {
    PropagationResult r = propagate_labels(*a.matrix, a.examples, a.actions.size(), p.propagation);
    if (options.write_cache) save_field_cache(field_path, field_hash, r.field, r.sigma);
    a.field = std::make_shared<ActionVectorField>(std::move(r.field));
    a.propagation_sigma = r.sigma;
  } else {
    a.field.reset();
  }
}

void build_compatibility(Project& project, const LoadOptions& options) {
  const fs::path cache = project.manifest.resolve(project.manifest.cache_dir);
  for (const CompatibilityPairSpec& spec : project.manifest.compatibility) {
    const LoadedActor& a = project.actor(spec.actor_a);
    const LoadedActor& b = project.actor(spec.actor_b);
    if (!a.field || !b.field) continue;
    ContentHash h;
    h.text("compat").integer(static_cast<std::int64_t>(hash_metric_inputs(a, project.manifest.parameters.jump_candidates)));
    h.integer(static_cast<std::int64_t>(hash_metric_inputs(b, project.manifest.parameters.jump_candidates)));
    for (const LoadedActor* x : {&a, &b}) {
      for (const auto& [frame, action] : x->examples) h.integer(frame).integer(action);
      h.number(x->propagation_sigma);
    }
    json tags = json::array();
    for (const auto& t : spec.tags) {
      tags.push_back({t.frame_a, t.frame_b, verdict_text(t.verdict), mode_json(t.mode_a), mode_json(t.mode_b)});
    }
    h.text(tags.dump()).text(propagation_json(project.manifest.parameters.propagation).dump());
    const fs::path path = cache / ("compat_" + spec.actor_a + "__" + spec.actor_b + ".json");

    std::optional<PairCompatibility> pair;
    std::ifstream in(path);
    if (in) {
      try {
        const json stored = json::parse(in);
        if (stored.at("hash").get<std::string>() == h.hex()) {
          auto source = [&](const LoadedActor& x) {
            ActorClusterSource s{x.spec.id, x.matrix, x.examples, x.actions.size(), project.manifest.parameters.propagation};
            s.params.sigma = x.propagation_sigma;
            return s;
          };
          pair.emplace(PairCompatibility::from_json(stored.at("pair"), source(a), source(b)));
        }
      } catch (const std::exception&) {
        pair.reset();
      }
    }
    if (!pair) {
      pair.emplace(build_pair_compatibility(project, spec));
      if (options.write_cache) {
        fs::create_directories(cache);
        std::ofstream out(path);
        out << json{{"hash", h.hex()}, {"pair", pair->to_json()}}.dump(1) << '\n';
        std::ofstream text(cache / ("compat_" + spec.actor_a + "__" + spec.actor_b + ".txt"));
        text << pair->export_text();
      }
    }
    project.compatibility.add_pair(std::move(*pair));
  }
}

}  // namespace

fs::path ProjectManifest::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

const ActorSpec* ProjectManifest::find_actor(std::string_view id) const {
  for (const ActorSpec& a : actors) {
    if (a.id == id) return &a;
  }
  return nullptr;
}

const LayerSpec* ProjectManifest::find_layer(std::string_view id) const {
  for (const LayerSpec& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

json params_to_json(const SynthesisParams& p) {
  return {{"alpha", p.alpha},
          {"beta", p.beta},
          {"sigma_a", p.sigma_a},
          {"sigma_t", optional_json(p.sigma_t)},
          {"compression", p.compression},
          {"ramp_len", p.ramp_len},
          {"iterations", p.iterations},
          {"literal_transition", p.literal_transition},
          {"dense", p.dense}};
}

SynthesisParams params_from_json(const json& j, SynthesisParams base) {
  SynthesisParams p = base;
  p.alpha = j.value("alpha", p.alpha);
  p.beta = j.value("beta", p.beta);
  p.sigma_a = j.value("sigma_a", p.sigma_a);
  p.sigma_t = optional_from<double>(j, "sigma_t", p.sigma_t);
  p.compression = j.value("compression", p.compression);
  p.ramp_len = j.value("ramp_len", p.ramp_len);
  p.iterations = j.value("iterations", p.iterations);
  p.literal_transition = j.value("literal_transition", p.literal_transition);
  p.dense = j.value("dense", p.dense);
  return p;
}

json manifest_to_json(const ProjectManifest& m) {
  json actors = json::array();
  for (const ActorSpec& a : m.actors) {
    json actions = json::array();
    for (const ActionDef& d : a.actions) actions.push_back({{"id", d.id}, {"name", d.name}, {"key", d.key}});
    json ja = {{"id", a.id}, {"kind", kind_name(a.kind)}, {"frames", path_text(a.frames)},
               {"actions", actions}, {"examples", a.examples}};
    if (!a.boxes.empty()) ja["boxes"] = path_text(a.boxes);
    if (!a.masks.empty()) ja["masks"] = path_text(a.masks);
    if (!a.flow.empty()) ja["flow"] = path_text(a.flow);
    if (!a.scribbles.empty()) ja["scribbles"] = path_text(a.scribbles);
    actors.push_back(std::move(ja));
  }
  json compat = json::array();
  for (const CompatibilityPairSpec& p : m.compatibility) {
    json tags = json::array();
    for (const auto& t : p.tags) {
      tags.push_back({{"frames", {t.frame_a, t.frame_b}},
                      {"verdict", verdict_text(t.verdict)},
                      {"modes", {mode_json(t.mode_a), mode_json(t.mode_b)}}});
    }
    compat.push_back({{"actors", {p.actor_a, p.actor_b}}, {"tags", tags}});
  }
  json layers = json::array();
  for (const LayerSpec& l : m.layers) {
    json jl = {{"id", l.id}, {"actor", l.actor}, {"default_action", l.default_action},
               {"initial_frame", l.initial_frame}, {"live", l.live}};
    if (l.anchor) jl["anchor"] = *l.anchor;
    layers.push_back(std::move(jl));
  }
  const ProjectParameters& p = m.parameters;
  json params = {{"synthesis", params_to_json(p.synthesis)},
                 {"jump_candidates", p.jump_candidates},
                 {"propagation", propagation_json(p.propagation)},
                 {"segmentation", segmentation_json(p.segmentation)},
                 {"live", {{"block", p.live.block}, {"low_water", p.live.low_water},
                           {"commit_offset", p.live.commit_offset}}},
                 {"quality", p.quality == RenderQuality::kLive ? "live" : "final"},
                 {"clone_before_resolve", p.clone_before_resolve},
                 {"refine_sweeps", p.refine_sweeps}};
  json colors = json::array();
  for (const ColorAction& c : m.bynumbers.colors) colors.push_back({{"color", c.color}, {"action", c.action}});
  json j = {{"name", m.name},
            {"frame_rate", m.frame_rate},
            {"actors", actors},
            {"compatibility", compat},
            {"layers", layers},
            {"parameters", params},
            {"bynumbers", {{"colors", colors}, {"tolerance", m.bynumbers.tolerance}}},
            {"cache_dir", path_text(m.cache_dir)}};
  if (!m.background.empty()) j["background"] = path_text(m.background);
  return j;
}

ProjectManifest manifest_from_json(const json& j, fs::path base_dir) {
  ProjectManifest m;
  m.base_dir = std::move(base_dir);
  try {
    m.name = j.value("name", std::string());
    m.frame_rate = j.value("frame_rate", m.frame_rate);
    if (!(m.frame_rate > 0.0)) throw AssetError("frame_rate must be positive");
    for (const json& ja : j.at("actors")) {
      ActorSpec a;
      a.id = ja.at("id").get<std::string>();
      a.kind = parse_kind(ja.value("kind", std::string("full_frame")));
      a.frames = ja.at("frames").get<std::string>();
      a.boxes = ja.value("boxes", std::string());
      a.masks = ja.value("masks", std::string());
      a.flow = ja.value("flow", std::string());
      a.scribbles = ja.value("scribbles", std::string());
      for (const json& jd : ja.at("actions")) {
        if (jd.is_string()) {
          a.actions.push_back({jd.get<std::string>(), jd.get<std::string>(), ""});
        } else {
          const auto id = jd.at("id").get<std::string>();
          a.actions.push_back({id, jd.value("name", id), jd.value("key", std::string())});
        }
      }
      if (ja.contains("examples")) {
        a.examples = ja.at("examples").get<std::map<std::string, std::vector<int>>>();
      }
      m.actors.push_back(std::move(a));
    }
    for (const json& jp : j.value("compatibility", json::array())) {
      CompatibilityPairSpec p;
      const auto ids = jp.at("actors").get<std::vector<std::string>>();
      if (ids.size() != 2) throw AssetError("compatibility pair needs exactly two actors");
      p.actor_a = ids[0];
      p.actor_b = ids[1];
      for (const json& jt : jp.value("tags", json::array())) {
        CompatibilityTagSpec t;
        const auto frames = jt.at("frames").get<std::vector<int>>();
        if (frames.size() != 2) throw AssetError("compatibility tag needs two frames");
        t.frame_a = frames[0];
        t.frame_b = frames[1];
        t.verdict = parse_verdict(jt.at("verdict").get<std::string>());
        if (jt.contains("modes")) {
          const json& modes = jt.at("modes");
          t.mode_a = parse_mode(modes.at(0));
          t.mode_b = parse_mode(modes.at(1));
        }
        p.tags.push_back(t);
      }
      m.compatibility.push_back(std::move(p));
    }
    for (const json& jl : j.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<std::string>();
      l.actor = jl.at("actor").get<std::string>();
      l.default_action = jl.at("default_action").get<std::string>();
      l.initial_frame = jl.value("initial_frame", 0);
      l.live = jl.value("live", true);
      if (jl.contains("anchor")) l.anchor = jl.at("anchor").get<std::array<int, 2>>();
      m.layers.push_back(std::move(l));
    }
    const json jp = j.value("parameters", json::object());
    ProjectParameters& p = m.parameters;
    p.synthesis = params_from_json(jp.value("synthesis", json::object()));
    p.jump_candidates = jp.value("jump_candidates", p.jump_candidates);
    const json prop = jp.value("propagation", json::object());
    p.propagation.knn = prop.value("knn", p.propagation.knn);
    p.propagation.sigma = optional_from<double>(prop, "sigma", p.propagation.sigma);
    p.propagation.tolerance = prop.value("tolerance", p.propagation.tolerance);
    const json seg = jp.value("segmentation", json::object());
    p.segmentation.alpha = seg.value("alpha", p.segmentation.alpha);
    p.segmentation.sigma = optional_from<double>(seg, "sigma", p.segmentation.sigma);
    p.segmentation.bg_unary = seg.value("bg_unary", p.segmentation.bg_unary);
    p.segmentation.seam_weight = seg.value("seam_weight", p.segmentation.seam_weight);
    p.segmentation.dilation = seg.value("dilation", p.segmentation.dilation);
    p.segmentation.temporal_prior_without_mask =
        seg.value("temporal_prior_without_mask", p.segmentation.temporal_prior_without_mask);
    const json live = jp.value("live", json::object());
    p.live.block = live.value("block", p.live.block);
    p.live.low_water = live.value("low_water", p.live.low_water);
    p.live.commit_offset = live.value("commit_offset", p.live.commit_offset);
    const auto quality = jp.value("quality", std::string("final"));
    if (quality != "final" && quality != "live") throw AssetError("quality must be 'live' or 'final'");
    p.quality = quality == "live" ? RenderQuality::kLive : RenderQuality::kFinal;
    p.clone_before_resolve = jp.value("clone_before_resolve", p.clone_before_resolve);
    p.refine_sweeps = jp.value("refine_sweeps", p.refine_sweeps);
    const json bn = j.value("bynumbers", json::object());
    for (const json& jc : bn.value("colors", json::array())) {
      m.bynumbers.colors.push_back({jc.at("color").get<std::array<std::uint8_t, 3>>(),
                                    jc.at("action").get<std::string>()});
    }
    m.bynumbers.tolerance = bn.value("tolerance", m.bynumbers.tolerance);
    m.background = j.value("background", std::string());
    m.cache_dir = j.value("cache_dir", std::string("cache"));
  } catch (const json::exception& e) {
    throw AssetError(std::string("malformed manifest: ") + e.what());
  } catch (const InvalidRequest& e) {
    throw AssetError(std::string("invalid manifest parameters: ") + e.what());
  }
  try {
    validate_ids(m);
  } catch (const InvalidRequest& e) {
    throw AssetError(std::string("invalid manifest parameters: ") + e.what());
  }
  return m;
}

ProjectManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw AssetError("missing manifest: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw AssetError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j, fs::absolute(path).parent_path());
}

void save_manifest(const fs::path& path, const ProjectManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw AssetError("cannot write manifest: " + path.string());
  out << manifest_to_json(manifest).dump(2) << '\n';
}

std::string manifest_hash(const ProjectManifest& manifest) {
  return ContentHash().text(manifest_to_json(manifest).dump()).hex();
}

void save_field_cache(const fs::path& path, std::uint64_t hash, const ActionVectorField& field,
                      double sigma) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AssetError("cannot write cache file: " + path.string());
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  out.write(kFieldMagic, 4);
  put_u32(kFieldVersion);
  out.write(reinterpret_cast<const char*>(&hash), 8);
  put_u32(static_cast<std::uint32_t>(field.frames()));
  put_u32(static_cast<std::uint32_t>(field.actions()));
  out.write(reinterpret_cast<const char*>(&sigma), 8);
  for (int t = 0; t < field.frames(); ++t) {
    const auto row = field.row(t);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size_bytes()));
  }
}

std::optional<std::pair<ActionVectorField, double>> load_field_cache(const fs::path& path,
                                                                     std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kFieldMagic, 4) != 0) return std::nullopt;
  if (get_u32() != kFieldVersion) return std::nullopt;
  std::uint64_t hash = 0;
  in.read(reinterpret_cast<char*>(&hash), 8);
  if (!in || hash != expected_hash) return std::nullopt;
  const int frames = static_cast<int>(get_u32());
  const int actions = static_cast<int>(get_u32());
  double sigma = 0.0;
  in.read(reinterpret_cast<char*>(&sigma), 8);
  if (!in || frames <= 0 || actions <= 0) return std::nullopt;
  ActionVectorField field(frames, actions);
  for (int t = 0; t < frames; ++t) {
    auto row = field.row(t);
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size_bytes()));
  }
  if (!in) return std::nullopt;
  return std::make_pair(std::move(field), sigma);
}

const LoadedActor& Project::actor(std::string_view id) const {
  for (const LoadedActor& a : actors) {
    if (a.spec.id == id) return a;
  }
  throw InvalidRequest("unknown actor '" + std::string(id) + "'");
}

LoadedActor& Project::actor(std::string_view id) {
  return const_cast<LoadedActor&>(std::as_const(*this).actor(id));
}

bool Project::prepared() const {
  return std::all_of(actors.begin(), actors.end(),
                     [](const LoadedActor& a) { return a.matrix && a.graph && a.field; });
}

std::vector<LayerModel> Project::layer_models() const {
  if (!prepared()) throw InvalidRequest("project is not prepared; run `loopstage prepare` first");
  std::vector<LayerModel> models;
  for (const LayerSpec& l : manifest.layers) {
    const LoadedActor& a = actor(l.actor);
    LayerModel model;
    model.layer_id = l.id;
    model.actor_id = a.spec.id;
    model.actions = a.actions;
    model.matrix = a.matrix;
    model.graph = a.graph;
    model.field = a.field;
    model.default_action = a.actions.index_of(l.default_action);
    model.initial_frame = l.initial_frame;
    models.push_back(std::move(model));
  }
  return models;
}

std::vector<std::shared_ptr<const ActorSequence>> Project::layer_actors() const {
  std::vector<std::shared_ptr<const ActorSequence>> out;
  for (const LayerSpec& l : manifest.layers) out.push_back(actor(l.actor).sequence);
  return out;
}

fs::path Project::cache_dir(std::string_view actor_id) const {
  return manifest.resolve(manifest.cache_dir) / std::string(actor_id);
}

PairCompatibility build_pair_compatibility(const Project& project, const CompatibilityPairSpec& spec) {
  auto source = [&](const LoadedActor& x) {
    if (!x.field) throw InvalidRequest("actor '" + x.spec.id + "' is not prepared");
    ActorClusterSource s{x.spec.id, x.matrix, x.examples, x.actions.size(), project.manifest.parameters.propagation};
    s.params.sigma = x.propagation_sigma;
    return s;
  };
  PairCompatibility pair(source(project.actor(spec.actor_a)), source(project.actor(spec.actor_b)));
  for (const CompatibilityTagSpec& t : spec.tags) {
    try {
      pair.tag(t.frame_a, t.frame_b, t.verdict, t.mode_a, t.mode_b);
    } catch (const InvalidRequest& e) {
      throw AssetError("compatibility tag " + spec.actor_a + ":" + std::to_string(t.frame_a) + " / " +
                       spec.actor_b + ":" + std::to_string(t.frame_b) + ": " + e.what());
    }
  }
  return pair;
}

std::shared_ptr<Project> load_project(const fs::path& manifest_path, const LoadOptions& options) {
  return load_project(read_manifest(manifest_path), options);
}

std::shared_ptr<Project> load_project(ProjectManifest manifest, const LoadOptions& options) {
  validate_ids(manifest);
  auto project = std::make_shared<Project>();
  project->manifest = std::move(manifest);
  const ProjectManifest& m = project->manifest;
  project->hash = manifest_hash(m);

  std::vector<LoadedActor> actors;
  for (const ActorSpec& spec : m.actors) {
    actors.push_back(load_actor_assets(m, spec, project->cache_dir(spec.id), options));
  }
  for (const LayerSpec& l : m.layers) {
    const auto it = std::find_if(actors.begin(), actors.end(),
                                 [&](const LoadedActor& a) { return a.spec.id == l.actor; });
    if (l.initial_frame < 0 || l.initial_frame >= it->sequence->frame_count()) {
      throw AssetError("layer '" + l.id + "' starts at frame " + std::to_string(l.initial_frame) +
                       " outside actor '" + l.actor + "'");
    }
  }
  if (!m.background.empty()) {
    project->background = read_png_rgb(m.resolve(m.background));
  } else if (!m.layers.empty()) {
    const auto it = std::find_if(actors.begin(), actors.end(),
                                 [&](const LoadedActor& a) { return a.spec.id == m.layers.front().actor; });
    project->background = it->background;
  } else if (!actors.empty()) {
    project->background = actors.front().background;
  }
  for (const LoadedActor& a : actors) {
    if (a.sequence->frame(0).width() != project->background.width() ||
        a.sequence->frame(0).height() != project->background.height()) {
      throw AssetError("actor '" + a.spec.id + "' frames differ in size from the project background");
    }
  }
  for (const LayerSpec& l : m.layers) {
    if (l.anchor && ((*l.anchor)[0] < 0 || (*l.anchor)[1] < 0 ||
                     (*l.anchor)[0] >= project->background.width() ||
                     (*l.anchor)[1] >= project->background.height())) {
      throw AssetError("anchor of layer '" + l.id + "' lies outside the frame");
    }
  }

  for (LoadedActor& a : actors) prepare_actor_derived(m, a, project->cache_dir(a.spec.id), options);
  project->actors = std::move(actors);
  build_compatibility(*project, options);
  return project;
}

void resegment_actor(Project& project, std::string_view actor_id, int from_frame,
                     const LoadOptions& options) {
  LoadedActor& a = project.actor(actor_id);
  if (!a.sequence->tracked()) throw InvalidRequest("actor '" + a.spec.id + "' is not tracked");
  const int n = a.sequence->frame_count();
  if (from_frame < 0 || from_frame >= n) throw InvalidRequest("segmentation start frame out of range");
  auto next = std::make_shared<ActorSequence>(*a.sequence);
  if (static_cast<int>(next->masks.size()) != n) {
    next->masks.clear();
    from_frame = 0;
  }
  next->masks = segment_actor(*next, a.background, a.scribbles, project.manifest.parameters.segmentation, from_frame);
  next->validate();
  a.sequence = next;
  const fs::path cache = project.cache_dir(a.spec.id);
  if (options.write_cache) {
    const fs::path user_masks = a.spec.masks.empty() ? fs::path() : project.manifest.resolve(a.spec.masks);
    if (!user_masks.empty()) {
      write_mask_directory(user_masks, next->masks);
    } else {
      write_mask_directory(cache / "masks", next->masks);
      write_hash_file(cache / "masks.hash", hash_masks_inputs(a, project.manifest.parameters.segmentation));
    }
  }
  prepare_actor_derived(project.manifest, a, cache, options);
  build_compatibility(project, options);
}

}  // namespace loopstage
