#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "loopstage/assets.hpp"

namespace loopstage {

// Symmetric frame-to-frame distance matrix stored as row-major float32.
class DistanceMatrix {
 public:
  DistanceMatrix() = default;
  explicit DistanceMatrix(int frame_count, std::string actor_id = {})
      : actor_id_(std::move(actor_id)), n_(frame_count),
        values_(static_cast<std::size_t>(frame_count) * frame_count, 0.0f) {}

  const std::string& actor_id() const { return actor_id_; }
  int size() const { return n_; }
  float at(int a, int b) const {
    return values_[static_cast<std::size_t>(a) * n_ + b];
  }
  // Sets both (a, b) and (b, a).
  void set(int a, int b, float d) {
    values_[static_cast<std::size_t>(a) * n_ + b] = d;
    values_[static_cast<std::size_t>(b) * n_ + a] = d;
  }
  std::span<const float> row(int a) const {
    return std::span<const float>(values_).subspan(
        static_cast<std::size_t>(a) * n_, n_);
  }
  std::span<const float> values() const { return values_; }
  std::span<float> mutable_values() { return values_; }

  // Copy restricted to frames {0, stride, 2*stride, ...} below `limit`.
  DistanceMatrix subsampled(int stride, int limit) const;

 private:
  std::string actor_id_;
  int n_ = 0;
  std::vector<float> values_;
};

// Distance between frames t and t2 of `actor`. Tracked actors have both
// patches composited on `background`, summed over the union of the dilated
// boxes and normalised by the raw box overlap area. Returns nullopt when the
// boxes do not overlap.
std::optional<double> frame_distance(const ActorSequence& actor, int t, int t2,
                                     const Image& background);

// All pairs, computed with up to `threads` workers (0 = hardware
// concurrency). Disjoint pairs get 10x the largest finite distance.
DistanceMatrix build_distance_matrix(const ActorSequence& actor,
                                     const Image& background, int threads = 0);

struct JumpCandidate {
  int frame = 0;
  float distance = 0.0f;
  friend bool operator==(const JumpCandidate&, const JumpCandidate&) = default;
};

// Per frame: the natural successor (implicit, t + 1) plus the lowest-distance
// jump targets, sorted ascending; ties go to the lower frame index. Neither
// the frame itself nor its successor appears among the candidates.
struct JumpGraph {
  int frame_count = 0;
  int requested_candidates = 0;
  std::vector<std::vector<JumpCandidate>> candidates;

  bool has_successor(int t) const { return t + 1 < frame_count; }
  // Median of all nonzero candidate distances, 0 if there are none.
  double median_distance() const;
  friend bool operator==(const JumpGraph&, const JumpGraph&) = default;
};

JumpGraph build_jump_graph(const DistanceMatrix& matrix, int candidate_count);

// Cache file: magic, version, content hash, frame count, packed matrix, then
// the jump graph. Returns nullopt when the file is absent, corrupt or was
// produced for a different hash.
struct MetricCache {
  DistanceMatrix matrix;
  JumpGraph graph;
};
void save_metric_cache(const std::filesystem::path& path, std::uint64_t hash,
                       const DistanceMatrix& matrix, const JumpGraph& graph);
std::optional<MetricCache> load_metric_cache(const std::filesystem::path& path,
                                             std::uint64_t expected_hash);

}  // namespace loopstage
