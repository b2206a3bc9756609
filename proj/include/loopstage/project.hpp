#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "loopstage/action_model.hpp"
#include "loopstage/assets.hpp"
#include "loopstage/compatibility.hpp"
#include "loopstage/compositor.hpp"
#include "loopstage/frame_metric.hpp"
#include "loopstage/segmentation.hpp"
#include "loopstage/synthesis.hpp"

namespace loopstage {

struct ActorSpec {
  std::string id;
  ActorKind kind = ActorKind::kFullFrame;
  // Paths as written in the manifest, relative to its directory.
  std::filesystem::path frames;
  std::filesystem::path boxes;      // tracked actors only
  std::filesystem::path masks;      // optional; filled by segmentation
  std::filesystem::path flow;       // optional
  std::filesystem::path scribbles;  // optional run-length JSON
  std::vector<ActionDef> actions;
  std::map<std::string, std::vector<int>> examples;  // action id -> frames
};

struct CompatibilityTagSpec {
  int frame_a = 0;
  int frame_b = 0;
  Verdict verdict = Verdict::kIncompatible;
  std::optional<TagMode> mode_a;
  std::optional<TagMode> mode_b;
};

struct CompatibilityPairSpec {
  std::string actor_a;
  std::string actor_b;
  std::vector<CompatibilityTagSpec> tags;
};

struct LayerSpec {
  std::string id;
  std::string actor;
  std::string default_action;
  int initial_frame = 0;
  std::optional<std::array<int, 2>> anchor;  // control-sequence pixel (x, y)
  bool live = true;
};

struct ColorAction {
  std::array<std::uint8_t, 3> color{};
  std::string action;
};

struct ByNumbersSpec {
  std::vector<ColorAction> colors;
  int tolerance = 16;  // per-channel (L-infinity) match distance
};

// Live scheduling constants.
struct LiveConfig {
  int block = 64;          // columns synthesized per block
  int low_water = 32;      // synthesize when fewer unplayed columns remain
  int commit_offset = 2;   // first column a trigger may change, past the playhead
};

struct ProjectParameters {
  SynthesisParams synthesis;
  int jump_candidates = 64;
  PropagationParams propagation;
  SegmentationParams segmentation;
  LiveConfig live;
  RenderQuality quality = RenderQuality::kFinal;
  bool clone_before_resolve = true;
  int refine_sweeps = 2;  // offline re-synthesis
};

struct ProjectManifest {
  std::string name;
  double frame_rate = 25.0;
  std::vector<ActorSpec> actors;
  std::vector<CompatibilityPairSpec> compatibility;
  std::vector<LayerSpec> layers;
  ProjectParameters parameters;
  ByNumbersSpec bynumbers;
  std::filesystem::path background;  // optional; default: first layer's actor
  std::filesystem::path cache_dir = "cache";
  // Directory relative paths resolve against; not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  const ActorSpec* find_actor(std::string_view id) const;
  const LayerSpec* find_layer(std::string_view id) const;
};

nlohmann::json manifest_to_json(const ProjectManifest& manifest);
// Parses and checks ids; throws AssetError naming the offending id.
ProjectManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir);
ProjectManifest read_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const ProjectManifest& manifest);
// Hash of the canonical manifest JSON.
std::string manifest_hash(const ProjectManifest& manifest);

nlohmann::json params_to_json(const SynthesisParams& p);
// Overlays the keys present in `j` on `base`.
SynthesisParams params_from_json(const nlohmann::json& j, SynthesisParams base = {});

struct LoadedActor {
  ActorSpec spec;
  ActionSet actions;
  std::shared_ptr<ActorSequence> sequence;
  Image background;
  ScribbleSet scribbles;
  ActionExamples examples;
  std::uint64_t frames_hash = 0;
  // Derived data; null until prepared.
  std::shared_ptr<const DistanceMatrix> matrix;
  std::shared_ptr<const JumpGraph> graph;
  std::shared_ptr<const ActionVectorField> field;
  double propagation_sigma = 0.0;
};

struct LoadOptions {
  // Compute derived artifacts missing from the cache (otherwise they stay
  // null and the project is not ready for synthesis).
  bool prepare = true;
  // Segment tracked actors that have boxes but no masks.
  bool segment_missing_masks = true;
  bool write_cache = true;
  int threads = 0;
};

class Project {
 public:
  ProjectManifest manifest;
  std::string hash;
  std::vector<LoadedActor> actors;
  CompatibilityModel compatibility;
  Image background;

  const LoadedActor& actor(std::string_view id) const;
  LoadedActor& actor(std::string_view id);
  bool prepared() const;
  // One engine layer per manifest layer; throws unless prepared.
  std::vector<LayerModel> layer_models() const;
  std::vector<std::shared_ptr<const ActorSequence>> layer_actors() const;
  std::filesystem::path cache_dir(std::string_view actor_id) const;
};

std::shared_ptr<Project> load_project(const std::filesystem::path& manifest_path,
                                      const LoadOptions& options = {});
std::shared_ptr<Project> load_project(ProjectManifest manifest, const LoadOptions& options = {});

// Re-segments frames [from_frame, end) of a tracked actor, writes the masks
// and recomputes the actor's derived data.
void resegment_actor(Project& project, std::string_view actor_id, int from_frame,
                     const LoadOptions& options = {});

// Replays the manifest's tags for one pair into a fresh pair model.
PairCompatibility build_pair_compatibility(const Project& project,
                                           const CompatibilityPairSpec& spec);

// Cached propagated field: magic, hash, frames, actions, sigma, values.
void save_field_cache(const std::filesystem::path& path, std::uint64_t hash,
                      const ActionVectorField& field, double sigma);
std::optional<std::pair<ActionVectorField, double>> load_field_cache(
    const std::filesystem::path& path, std::uint64_t expected_hash);

}  // namespace loopstage
