#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loopstage/action_model.hpp"
#include "loopstage/compatibility.hpp"
#include "loopstage/frame_metric.hpp"

namespace loopstage {

// Exponent cap for the transition cost so sentinel jumps stay finite.
inline constexpr double kMaxTransitionExponent = 200.0;

struct SynthesisParams {
  double alpha = 0.5;               // responsiveness: weight of the action term
  double beta = 0.5;                // compatibility vs transition quality
  double sigma_a = 0.5;             // action cost scale
  std::optional<double> sigma_t;    // unset: sqrt(median jump-graph distance)
  int compression = 1;              // DP stride over columns and input frames
  int ramp_len = 8;                 // columns per smooth-step switch
  int iterations = 1;               // row sweeps per block
  bool literal_transition = false;  // compare t_prev itself, not its successor
  bool dense = false;               // ignore the jump graph

  // Throws InvalidRequest when a value is out of range.
  void validate() const;
};

// ||a - r||^2 / (2 sigma_a^2)
double action_cost(std::span<const double> action, std::span<const double> request,
                   double sigma_a);

// Frame whose distance to the candidate decides the transition cost: the
// natural successor of `prev` (the last frame is its own successor), or
// `prev` itself when `literal`.
inline int transition_origin(int prev, int frame_count, bool literal) {
  if (literal) return prev;
  return prev + 1 < frame_count ? prev + 1 : prev;
}

// exp(D(origin(prev), next) / sigma_t^2), exponent capped.
double transition_cost(const DistanceMatrix& matrix, int prev, int next, double sigma_t,
                       bool literal = false);

// Default sigma_t: sqrt of the median nonzero jump distance (falls back to the
// full matrix when no graph is given).
double default_transition_sigma(const DistanceMatrix& matrix, const JumpGraph* graph);

// 3u^2 - 2u^3 on [0, 1].
double smooth_step(double u);

// ramp_len + 1 request vectors blending `current` into one-hot(target).
std::vector<std::vector<double>> ramp_requests(std::span<const double> current, int target,
                                               int ramp_len);

// Piecewise smooth-step request timeline of one layer.
class RequestTimeline {
 public:
  RequestTimeline() = default;
  RequestTimeline(int action_count, int initial_action);

  int action_count() const { return action_count_; }
  // Starts a ramp at `column` from whatever is requested there (a mid-ramp
  // mix included) towards `target`. Later ramps are discarded.
  void trigger(int column, int target, int ramp_len);
  std::vector<double> at(int column) const;
  // Action the timeline settles on at `column` (target of the active ramp).
  int target_at(int column) const;

  struct Ramp {
    int start = 0;
    std::vector<double> from;
    int target = 0;
    int length = 1;
  };
  const std::vector<Ramp>& ramps() const { return ramps_; }

 private:
  int action_count_ = 0;
  std::vector<Ramp> ramps_;
};

// Outgoing transitions per label with their unweighted E_T values.
struct TransitionTable {
  int labels = 0;
  std::vector<int> edge_start;  // labels + 1
  std::vector<int> edge_target;
  std::vector<double> edge_cost;
  bool dense = false;

  double cost(int from, int to) const;  // +inf when no edge
};

// With a graph: from t, the successor plus the jump candidates of
// transition_origin(t). Without: every label. `hold_last` keeps the last
// label's edge to itself; subsampled tables drop it because holding a
// subsampled label replays the skipped frames.
TransitionTable build_transition_table(const DistanceMatrix& matrix, const JumpGraph* graph,
                                       double sigma_t, bool literal, bool hold_last = true);

struct ColumnWeights {
  double alpha = 0.5;
  double beta = 0.5;
};

// Another layer's already chosen frames for the columns being solved.
struct FixedRow {
  std::string actor_id;
  std::span<const int> frames;
};

// One row of the labeling problem. Label t stands for input frame
// t * frame_stride of `actor_id`.
struct RowInput {
  std::string actor_id;
  const ActionVectorField* field = nullptr;
  const TransitionTable* transitions = nullptr;
  std::vector<std::vector<double>> requests;  // one per column
  std::vector<ColumnWeights> weights;         // one per column
  double sigma_a = 0.5;
  std::vector<FixedRow> fixed_rows;
  const CompatibilityModel::Snapshot* compatibility = nullptr;
  std::optional<int> anchor;  // label shown just before the first column
  int frame_stride = 1;
  double compatibility_scale = 1.0;
  // Optional per-(column, label) cost added to the unary term, laid out as
  // column * labels + label. Compressed rows use it for the skipped columns.
  std::vector<double> extra_unary;
  std::vector<std::vector<int>> owned_frames;  // backing store for fixed_rows
};

struct RowResult {
  std::vector<int> labels;
  double objective = 0.0;
  int fallback_columns = 0;  // columns solved over the full label set
};

// Exact minimiser of sum_k E_U + E_P over the transition graph by dynamic
// programming. Ties resolve to the lowest label at the last column and the
// lowest predecessor when backtracking.
RowResult synthesize_row(const RowInput& input);

// Sum over the other rows of chi(frame, their frame); 0 with no rows.
double compatibility_cost(const CompatibilityModel::Snapshot* snapshot,
                          const std::string& actor_id, int frame,
                          std::span<const FixedRow> fixed_rows, int column);

// Objective of a given label sequence under `input`, summed column by column.
double row_objective(const RowInput& input, std::span<const int> labels);

struct OutputLayer {
  std::string layer_id;
  std::string actor_id;
  std::vector<int> frames;
  friend bool operator==(const OutputLayer&, const OutputLayer&) = default;
};

struct OutputTimeline {
  std::vector<OutputLayer> layers;

  int columns() const { return layers.empty() ? 0 : static_cast<int>(layers.front().frames.size()); }
  // CSV `column,layer,frame_index` preceded by a `# manifest_hash=` line.
  void write_csv(const std::filesystem::path& path, const std::string& manifest_hash) const;
  static OutputTimeline read_csv(const std::filesystem::path& path, std::string* manifest_hash);
};
bool operator==(const OutputTimeline& a, const OutputTimeline& b);

// Everything the engine needs about one output layer.
struct LayerModel {
  std::string layer_id;
  std::string actor_id;
  ActionSet actions;
  std::shared_ptr<const DistanceMatrix> matrix;
  std::shared_ptr<const JumpGraph> graph;  // required unless params.dense
  std::shared_ptr<const ActionVectorField> field;
  int default_action = 0;
  int initial_frame = 0;
};

// Parameter values by first column they apply to.
class ParamSchedule {
 public:
  explicit ParamSchedule(SynthesisParams base = {}) { entries_[0] = base; }
  const SynthesisParams& at(int column) const;
  void set_from(int column, const SynthesisParams& params);
  // Drops entries starting after `column`.
  void truncate_after(int column);
  const std::map<int, SynthesisParams>& entries() const { return entries_; }

 private:
  std::map<int, SynthesisParams> entries_;
};

struct BlockReport {
  int first_column = 0;
  int columns = 0;
  std::vector<double> row_objectives;
  int fallback_columns = 0;
};

// Owns the synthesized timeline of all layers and extends it block by block.
class SynthesisEngine {
 public:
  SynthesisEngine(std::vector<LayerModel> layers, CompatibilityModel::Snapshot compatibility,
                  SynthesisParams params);

  int layer_count() const { return static_cast<int>(layers_.size()); }
  const LayerModel& layer(int d) const { return layers_.at(d); }
  int layer_index(std::string_view layer_id) const;
  RequestTimeline& requests(int d) { return requests_.at(d); }
  const RequestTimeline& requests(int d) const { return requests_.at(d); }
  const OutputTimeline& timeline() const { return timeline_; }
  int columns() const { return timeline_.columns(); }

  ParamSchedule& schedule() { return schedule_; }
  const ParamSchedule& schedule() const { return schedule_; }
  void set_compatibility(CompatibilityModel::Snapshot snapshot);
  const CompatibilityModel::Snapshot& compatibility() const { return compatibility_; }

  // Appends `count` columns to every layer: rows in layer order, each seeing
  // the rows before it as fixed (later sweeps see all other rows).
  BlockReport synthesize_block(int count);
  // Drops every column at or after `column`.
  void truncate(int column);
  // Replaces the synthesized timeline, e.g. to warm-start refine().
  void replace_timeline(OutputTimeline timeline);

  // Full objective over all columns: every layer's action, transition and
  // compatibility terms (the latter against all other layers).
  double total_energy() const;
  double total_energy(const OutputTimeline& timeline) const;

  // Row sweeps over the whole timeline, accepting a row only if the total
  // energy drops. Returns the number of accepted rows.
  int refine(int sweeps);

  // Prepared transition data for a layer at a column stride.
  struct Prepared {
    int stride = 1;
    int labels = 0;
    std::shared_ptr<const ActionVectorField> field;
    TransitionTable transitions;
    double sigma_t = 1.0;
  };
  const Prepared& prepared(int d, int stride);

  RowInput row_input(int d, int first_column, int count, int stride,
                     const std::vector<std::vector<int>>& fixed, std::span<const int> use_rows);

 private:
  int anchor_frame(int d, int column) const;
  void add_fill_costs(RowInput& in, int d, int first_column, int count, int stride,
                      const std::vector<std::vector<int>>& fixed, std::span<const int> use_rows) const;
  std::vector<int> solve_layer(int d, int first_column, int count,
                               const std::vector<std::vector<int>>& block, std::span<const int> fixed_rows,
                               double* objective, int* fallback);

  std::vector<LayerModel> layers_;
  std::vector<RequestTimeline> requests_;
  CompatibilityModel::Snapshot compatibility_;
  ParamSchedule schedule_;
  OutputTimeline timeline_;
  std::map<std::pair<int, int>, Prepared> prepared_;
};

}  // namespace loopstage
