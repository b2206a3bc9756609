#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "loopstage/compositor.hpp"
#include "loopstage/error.hpp"
#include "loopstage/project.hpp"
#include "loopstage/server.hpp"
#include "loopstage/session.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loopstage;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

RenderJob render_job(const Project& project, const OutputTimeline& timeline, RenderQuality quality) {
  RenderJob job;
  job.timeline = &timeline;
  job.background = project.background;
  job.actors = project.layer_actors();
  job.quality = quality;
  job.clone_before_resolve = project.manifest.parameters.clone_before_resolve;
  return job;
}

void print_summary(const Project& project) {
  std::cout << "project '" << project.manifest.name << "' hash " << project.hash << "\n";
  for (const LoadedActor& a : project.actors) {
    std::cout << "  actor " << a.spec.id << ": " << a.sequence->frame_count() << " frames, "
              << a.actions.size() << " actions";
    if (a.graph) std::cout << ", sigma " << a.propagation_sigma;
    std::cout << "\n";
  }
  std::cout << "  layers: " << project.manifest.layers.size() << ", prepared: "
            << (project.prepared() ? "yes" : "no") << "\n";
}

int run_prepare(const fs::path& manifest, int threads) {
  LoadOptions options;
  options.threads = threads;
  print_summary(*load_project(manifest, options));
  return 0;
}

int run_perform(const fs::path& manifest, const ServerOptions& options) {
  std::shared_ptr<const Project> project = load_project(manifest);
  PerformanceServer server(project, options);
  server.start();
  std::cout << "listening on http://" << options.address << ":" << server.port() << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

int run_render(const fs::path& recording_path, const fs::path& manifest, const fs::path& out,
               const std::string& quality, bool live_only, int threads) {
  std::shared_ptr<const Project> project = load_project(manifest);
  const PerformanceRecording recording = PerformanceRecording::load(recording_path);
  OutputTimeline timeline;
  if (live_only) {
    if (recording.manifest_hash != project->hash) throw InvalidRequest("recording belongs to another manifest");
    timeline = replay_recording(project, recording);
  } else {
    OfflineResult result = resynthesize_recording(project, recording);
    std::cout << "energy " << result.energy << " (live " << result.live_energy << ")"
              << (result.warm_started ? ", refined from live" : "") << "\n";
    timeline = std::move(result.timeline);
  }
  render_timeline(render_job(*project, timeline, parse_quality(quality)), out, threads);
  std::cout << "wrote " << timeline.columns() << " frames to " << out.string() << "\n";
  return 0;
}

int run_bynumbers(const fs::path& manifest, const fs::path& control_dir, const fs::path& out,
                  const fs::path& recording_out, int threads) {
  std::shared_ptr<const Project> project = load_project(manifest);
  const FrameSequence control = read_frame_directory(control_dir, project->manifest.frame_rate);
  if (control.size() == 0) throw AssetError("no control frames in '" + control_dir.string() + "'");
  const auto events = control_sequence_triggers(*project, control.frames);
  OfflineResult result = synthesize_offline(*project, events, control.size());
  std::cout << events.size() << " triggers, energy " << result.energy << "\n";
  if (!recording_out.empty()) {
    PerformanceRecording rec;
    rec.manifest_hash = project->hash;
    rec.columns = control.size();
    rec.events = events;
    rec.save(recording_out);
  }
  render_timeline(render_job(*project, result.timeline, project->manifest.parameters.quality), out, threads);
  std::cout << "wrote " << result.timeline.columns() << " frames to " << out.string() << "\n";
  return 0;
}

int run_segment(const fs::path& manifest, const std::string& actor, int from) {
  LoadOptions options;
  options.segment_missing_masks = false;
  std::shared_ptr<Project> project = load_project(manifest, options);
  resegment_actor(*project, actor, from);
  std::cout << "re-segmented actor " << actor << " from frame " << from << "\n";
  return 0;
}

int run_tag(const fs::path& manifest, const std::vector<std::string>& actors, const std::vector<int>& frames,
            const std::string& verdict, const std::string& mode_a, const std::string& mode_b) {
  json j;
  {
    std::ifstream in(manifest);
    if (!in) throw AssetError("cannot read manifest '" + manifest.string() + "'");
    j = json::parse(in);
  }
  json& pairs = j["compatibility"];
  if (pairs.is_null()) pairs = json::array();
  json* pair = nullptr;
  for (json& p : pairs) {
    if (p.value("actors", json::array()) == json(actors)) pair = &p;
  }
  if (pair == nullptr) {
    pairs.push_back({{"actors", actors}, {"tags", json::array()}});
    pair = &pairs.back();
  }
  auto mode = [](const std::string& m) { return m.empty() ? json(nullptr) : json(m); };
  (*pair)["tags"].push_back({{"frames", frames}, {"verdict", verdict}, {"modes", {mode(mode_a), mode(mode_b)}}});

  // Validate before overwriting the user's file.
  const ProjectManifest updated = manifest_from_json(j, manifest.parent_path());
  save_manifest(manifest, updated);
  LoadOptions options;
  options.prepare = false;
  auto project = load_project(manifest, options);
  for (const CompatibilityPairSpec& spec : project->manifest.compatibility) {
    if (spec.actor_a == actors[0] && spec.actor_b == actors[1]) {
      std::cout << build_pair_compatibility(*project, spec).export_text();
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loopstage: interactive video-loop performance"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)");

  fs::path manifest;
  auto* prepare = app.add_subcommand("prepare", "Precompute and cache actor data");
  prepare->add_option("manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);

  ServerOptions server;
  auto* perform = app.add_subcommand("perform", "Serve a live session");
  perform->add_option("manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);
  perform->add_option("--address", server.address, "Bind address");
  perform->add_option("--port", server.port, "Port (0 picks one)");
  perform->add_option("--tick-ms", server.tick_ms, "Column period in ms (default: frame rate)");
  perform->add_option("--recordings", server.recordings_dir, "Directory for saved recordings");

  fs::path recording;
  fs::path out;
  std::string quality = "final";
  bool live_only = false;
  auto* render = app.add_subcommand("render", "Render a recording to numbered PNGs");
  render->add_option("recording", recording, "Recording JSON")->required()->check(CLI::ExistingFile);
  render->add_option("--manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);
  render->add_option("--out", out, "Output directory")->required();
  render->add_option("--quality", quality, "live or final")->check(CLI::IsMember({"live", "final"}));
  render->add_flag("--live", live_only, "Render the live timeline without offline re-synthesis");

  fs::path control_dir;
  fs::path recording_out;
  auto* bynumbers = app.add_subcommand("bynumbers", "Drive layers from a color-coded control video");
  bynumbers->add_option("manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);
  bynumbers->add_option("control", control_dir, "Directory of control frames")->required()->check(CLI::ExistingDirectory);
  bynumbers->add_option("--out", out, "Output directory")->required();
  bynumbers->add_option("--recording", recording_out, "Also save the derived triggers as a recording");

  std::string actor;
  int from = 0;
  auto* segment = app.add_subcommand("segment", "Re-segment a tracked actor");
  segment->add_option("manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);
  segment->add_option("--actor", actor, "Actor id")->required();
  segment->add_option("--from", from, "First frame to re-segment")->check(CLI::NonNegativeNumber);

  std::vector<std::string> pair;
  std::vector<int> frames;
  std::string verdict;
  std::string mode_a;
  std::string mode_b;
  auto* tag = app.add_subcommand("tag", "Add a compatibility tag and print the pair's table");
  tag->add_option("manifest", manifest, "Project manifest")->required()->check(CLI::ExistingFile);
  tag->add_option("--actors", pair, "The two actor ids")->required()->expected(2);
  tag->add_option("--frames", frames, "Frame of each actor")->required()->expected(2);
  tag->add_option("--verdict", verdict, "compatible or incompatible")
      ->required()
      ->check(CLI::IsMember({"compatible", "incompatible"}));
  tag->add_option("--mode-a", mode_a, "specialize or refine")->check(CLI::IsMember({"specialize", "refine"}));
  tag->add_option("--mode-b", mode_b, "specialize or refine")->check(CLI::IsMember({"specialize", "refine"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*prepare) return run_prepare(manifest, threads);
    if (*perform) return run_perform(manifest, server);
    if (*render) return run_render(recording, manifest, out, quality, live_only, threads);
    if (*bynumbers) return run_bynumbers(manifest, control_dir, out, recording_out, threads);
    if (*segment) return run_segment(manifest, actor, from);
    if (*tag) return run_tag(manifest, pair, frames, verdict, mode_a, mode_b);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
