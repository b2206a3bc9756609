#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "loopstage/action_model.hpp"
#include <nlohmann/json.hpp>

namespace loopstage {

inline constexpr double kCompatibleCost = 1.0;
inline constexpr double kIncompatibleCost = 100.0;

enum class Verdict { kCompatible, kIncompatible };
enum class TagMode { kSpecialize, kRefine };

inline double verdict_cost(Verdict v) {
  return v == Verdict::kCompatible ? kCompatibleCost : kIncompatibleCost;
}

// Cluster-pair costs B(m, n), each exactly 1 or 100.
class CompatibilityMatrix {
 public:
  CompatibilityMatrix() = default;
  CompatibilityMatrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        cells_(static_cast<std::size_t>(rows) * cols, kCompatibleCost) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double at(int m, int n) const { return cells_[static_cast<std::size_t>(m) * cols_ + n]; }
  void set(int m, int n, Verdict v) {
    cells_[static_cast<std::size_t>(m) * cols_ + n] = verdict_cost(v);
  }
  void add_row();
  void add_col();
  int incompatible_cells() const;
  friend bool operator==(const CompatibilityMatrix&, const CompatibilityMatrix&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> cells_;
};

// Everything a pair model needs to (re-)propagate one actor's clusters.
struct ActorClusterSource {
  std::string actor_id;
  std::shared_ptr<const DistanceMatrix> matrix;
  ActionExamples action_examples;
  int action_count = 0;
  PropagationParams params;  // sigma should be pinned to the action model's
};

// One direction c_{i->j}: pair-scoped clusters of actor i's frames.
struct ClusterSide {
  ActorClusterSource source;
  std::vector<std::vector<int>> cluster_examples;  // a frame is in at most one
  ActionVectorField memberships;

  int cluster_count() const { return static_cast<int>(cluster_examples.size()); }
  int cluster_of_example(int frame) const;
  void repropagate();
};

// Compatibility between two actors' frames: chi(t_a, t_b) is the expected
// B cost under both frames' cluster memberships.
class PairCompatibility {
 public:
  PairCompatibility(ActorClusterSource a, ActorClusterSource b);

  const std::string& actor_a() const { return a_.source.actor_id; }
  const std::string& actor_b() const { return b_.source.actor_id; }
  const ClusterSide& side_a() const { return a_; }
  const ClusterSide& side_b() const { return b_; }
  const CompatibilityMatrix& matrix() const { return matrix_; }

  double chi(int frame_a, int frame_b) const;
  // Precomputes B c_b(frame_b) so chi against many frames of a is a dot product.
  std::vector<double> chi_row_for_b(int frame_b) const;
  std::vector<double> chi_row_for_a(int frame_a) const;

  // B at the two frames' most likely clusters.
  Verdict current_verdict(int frame_a, int frame_b) const;

  // Records a user verdict for (frame_a, frame_b). An unset mode defaults to
  // specialize when the verdict differs from current_verdict(); otherwise the
  // caller must choose and InvalidRequest is thrown.
  void tag(int frame_a, int frame_b, Verdict verdict,
           std::optional<TagMode> mode_a = std::nullopt,
           std::optional<TagMode> mode_b = std::nullopt);

  // Human-readable listing of cluster examples and incompatible B cells.
  std::string export_text() const;

  nlohmann::json to_json() const;
  // Rebuilds from the persisted cluster examples and B.
  static PairCompatibility from_json(const nlohmann::json& j, ActorClusterSource a,
                                     ActorClusterSource b);

 private:
  PairCompatibility() = default;

  ClusterSide a_;
  ClusterSide b_;
  CompatibilityMatrix matrix_;
};

// All pair models of a project keyed by unordered actor pair. Readers take
// immutable snapshots; tagging swaps in a new pair model atomically.
class CompatibilityModel {
 public:
  using Snapshot = std::map<std::pair<std::string, std::string>,
                            std::shared_ptr<const PairCompatibility>>;

  void add_pair(PairCompatibility pair);
  Snapshot snapshot() const;
  std::shared_ptr<const PairCompatibility> find(std::string_view a, std::string_view b) const;

  // Tags frames of the given actors (in either order).
  void tag(std::string_view actor_x, int frame_x, std::string_view actor_y, int frame_y,
           Verdict verdict, std::optional<TagMode> mode_x = std::nullopt,
           std::optional<TagMode> mode_y = std::nullopt);

 private:
  mutable std::mutex mutex_;
  Snapshot pairs_;
};

// chi between frame_x of actor_x and frame_y of actor_y; 1 when the snapshot
// has no model for the pair.
double lookup_chi(const CompatibilityModel::Snapshot& snapshot, std::string_view actor_x,
                  int frame_x, std::string_view actor_y, int frame_y);

std::pair<std::string, std::string> pair_key(std::string_view a, std::string_view b);

}  // namespace loopstage
