#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include "loopstage/frame_metric.hpp"

namespace loopstage {

struct ActionDef {
  std::string id;
  std::string name;
  std::string key;  // keyboard trigger, may be empty
  friend bool operator==(const ActionDef&, const ActionDef&) = default;
};

struct ActionSet {
  std::string actor_id;
  std::vector<ActionDef> actions;

  int size() const { return static_cast<int>(actions.size()); }
  // Index of `id`, or -1.
  int index_of(std::string_view id) const;
  // Throws unless non-empty with unique ids.
  void validate() const;
};

// frame index -> action index
using ActionExamples = std::map<int, int>;

// Soft assignment of every frame over `actions` entries; rows sum to one.
class ActionVectorField {
 public:
  ActionVectorField() = default;
  ActionVectorField(int frames, int actions)
      : frames_(frames), actions_(actions),
        values_(static_cast<std::size_t>(frames) * actions, 0.0) {}

  int frames() const { return frames_; }
  int actions() const { return actions_; }
  std::span<const double> row(int t) const {
    return std::span<const double>(values_).subspan(
        static_cast<std::size_t>(t) * actions_, actions_);
  }
  std::span<double> row(int t) {
    return std::span<double>(values_).subspan(
        static_cast<std::size_t>(t) * actions_, actions_);
  }
  double at(int t, int a) const {
    return values_[static_cast<std::size_t>(t) * actions_ + a];
  }
  // Lowest index among the maximal entries.
  int argmax(int t) const;

  // Copy restricted to frames {0, stride, 2*stride, ...} below `limit`.
  ActionVectorField subsampled(int stride, int limit) const;

 private:
  int frames_ = 0;
  int actions_ = 0;
  std::vector<double> values_;
};

struct PropagationParams {
  int knn = 30;                  // neighbours per frame before symmetrising
  std::optional<double> sigma;   // unset: sqrt of the median kNN distance
  double tolerance = 1e-8;       // relative CG residual
  // When false, classes without examples are allowed and receive no mass.
  bool require_every_class = true;
};

struct PropagationResult {
  ActionVectorField field;
  double sigma = 0.0;
  // Frames with no weighted path to any example; given the uniform vector.
  std::vector<int> isolated_frames;
  int max_iterations_used = 0;
};

// Default affinity scale: sqrt(median of the nonzero k-nearest distances).
double default_propagation_sigma(const DistanceMatrix& matrix, int knn);

// Harmonic-function label propagation over the symmetrised kNN affinity graph
// W = exp(-D / sigma^2). Examples stay one-hot; every other frame gets the
// solution of the unlabeled Laplacian system, one right-hand side per action.
// Requires at least one example per action unless the params relax it.
PropagationResult propagate_labels(const DistanceMatrix& matrix,
                                   const ActionExamples& examples,
                                   int action_count,
                                   const PropagationParams& params = {},
                                   std::stop_token stop = {});

// Interactive per-actor action model. Edits re-run propagation synchronously;
// readers hold immutable snapshots of the last completed field.
class ActionModel {
 public:
  ActionModel(ActionSet actions, std::shared_ptr<const DistanceMatrix> matrix,
              ActionExamples examples, PropagationParams params = {});

  const ActionSet& actions() const { return actions_; }
  ActionExamples examples() const;
  std::shared_ptr<const ActionVectorField> field() const;
  double sigma() const;

  void add_example(int frame, std::string_view action);
  // Rejected when `frame` is the only example of its action.
  void remove_example(int frame);

 private:
  void propagate_locked(const ActionExamples& examples);

  ActionSet actions_;
  std::shared_ptr<const DistanceMatrix> matrix_;
  PropagationParams params_;
  mutable std::mutex mutex_;
  ActionExamples examples_;
  std::shared_ptr<const ActionVectorField> field_;
  double sigma_ = 0.0;
};

}  // namespace loopstage
