#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "loopstage/project.hpp"
#include "loopstage/synthesis.hpp"

namespace loopstage {

struct RecordedEvent {
  enum class Kind { kTrigger, kParam };
  Kind kind = Kind::kTrigger;
  std::int64_t timestamp_ms = 0;
  int playhead = 0;  // playhead when the event arrived
  int column = 0;    // first column the event affects
  std::string layer;   // triggers
  std::string action;  // triggers
  int ramp_len = 0;    // triggers
  std::string name;        // params
  nlohmann::json value;    // params
  friend bool operator==(const RecordedEvent&, const RecordedEvent&) = default;
};

struct PerformanceRecording {
  std::string manifest_hash;
  int columns = 0;  // columns played
  std::vector<RecordedEvent> events;

  // Throws InvalidRequest unless timestamps are non-decreasing.
  void validate() const;
  nlohmann::json to_json() const;
  static PerformanceRecording from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static PerformanceRecording load(const std::filesystem::path& path);
};

// Applies a named parameter to a copy of `base`; throws InvalidRequest for an
// unknown name or out-of-range value. `quality` is not a synthesis parameter.
SynthesisParams apply_param(SynthesisParams base, std::string_view name, const nlohmann::json& value);
RenderQuality parse_quality(const nlohmann::json& value);

// A live performance: the playhead advances one column per clock tick while
// the engine keeps a lookahead buffer synthesized. Not thread-safe; the
// owner serialises access.
class Session {
 public:
  explicit Session(std::shared_ptr<const Project> project);

  const Project& project() const { return *project_; }
  int playhead() const { return playhead_; }
  int synthesized() const { return engine_.columns(); }
  int buffered() const { return engine_.columns() - playhead_; }
  RenderQuality quality() const { return quality_; }
  const SynthesisEngine& engine() const { return engine_; }
  const LiveConfig& config() const { return config_; }
  // Wall time of the most recent synthesis block.
  double last_block_ms() const { return last_block_ms_; }

  struct Column {
    int column = 0;
    std::vector<int> frames;  // one per layer
  };
  // Plays the column at the playhead.
  Column advance();

  // Ramps the layer's request towards `action` from the commit point on and
  // re-synthesizes everything after it. Returns the commit column.
  int trigger(std::string_view layer, std::string_view action, std::int64_t timestamp_ms);
  // Applies from the next synthesis block. Returns that column.
  int set_param(std::string_view name, const nlohmann::json& value, std::int64_t timestamp_ms);

  PerformanceRecording recording() const;
  // The played part of the timeline.
  OutputTimeline played_timeline() const;

 private:
  void synthesize(int count);
  std::int64_t stamp(std::int64_t timestamp_ms);

  std::shared_ptr<const Project> project_;
  LiveConfig config_;
  SynthesisEngine engine_;
  RenderQuality quality_;
  int playhead_ = 0;
  std::vector<RecordedEvent> events_;
  double last_block_ms_ = 0.0;
};

// Re-runs a recording through a fresh session with the recorded playheads;
// reproduces the live timeline exactly.
OutputTimeline replay_recording(std::shared_ptr<const Project> project,
                                const PerformanceRecording& recording);

struct OfflineResult {
  OutputTimeline timeline;
  double energy = 0.0;
  double live_energy = 0.0;  // of the replayed live timeline; 0 without one
  bool warm_started = false; // full-knowledge solve lost to the live result
  int refined_rows = 0;
};

// Full-knowledge synthesis of `columns` columns with the given events,
// followed by refinement sweeps. When `live` is given and the fresh solve is
// worse, refinement restarts from `live`, so the result never exceeds it.
OfflineResult synthesize_offline(const Project& project, std::span<const RecordedEvent> events,
                                 int columns, const OutputTimeline* live = nullptr);

// Replays the recording live, then re-synthesizes it offline. Throws
// InvalidRequest when the recording belongs to another manifest.
OfflineResult resynthesize_recording(std::shared_ptr<const Project> project,
                                     const PerformanceRecording& recording);

// Color-driven triggers: per control frame, each layer requests the action
// mapped to the color at its anchor; unmapped colors hold the request.
// Emits an event whenever a layer's requested action changes.
std::vector<RecordedEvent> control_sequence_triggers(const Project& project,
                                                     std::span<const Image> control_frames);

}  // namespace loopstage
