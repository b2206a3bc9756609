#include "loopstage/action_model.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>
#include <utility>

#include "loopstage/conjugate_gradient.hpp"
#include "loopstage/error.hpp"
#include "loopstage/log.hpp"

namespace loopstage {
namespace {

// Indices of the k nearest other frames of t, nearest first, ties by index.
std::vector<int> nearest_frames(const DistanceMatrix& matrix, int t, int k) {
  const int n = matrix.size();
  std::vector<int> others;
  others.reserve(n - 1);
  for (int u = 0; u < n; ++u) {
    if (u != t) others.push_back(u);
  }
  const auto keep = std::min<std::size_t>(std::max(k, 0), others.size());
  const auto row = matrix.row(t);
  std::partial_sort(others.begin(), others.begin() + keep, others.end(),
                    [&](int a, int b) {
                      return row[a] < row[b] || (row[a] == row[b] && a < b);
                    });
  others.resize(keep);
  return others;
}

struct Edge {
  int to;
  double weight;
};

}  // namespace

int ActionSet::index_of(std::string_view id) const {
  for (int i = 0; i < size(); ++i) {
    if (actions[i].id == id) return i;
  }
  return -1;
}

void ActionSet::validate() const {
  if (actions.empty()) throw AssetError("actor '" + actor_id + "' defines no actions");
  std::set<std::string> seen;
  for (const auto& a : actions) {
    if (!seen.insert(a.id).second) {
      throw AssetError("actor '" + actor_id + "' defines action '" + a.id + "' twice");
    }
  }
}

int ActionVectorField::argmax(int t) const {
  const auto r = row(t);
  return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

ActionVectorField ActionVectorField::subsampled(int stride, int limit) const {
  std::vector<int> keep;
  for (int t = 0; t < std::min(limit, frames_); t += stride) keep.push_back(t);
  ActionVectorField out(static_cast<int>(keep.size()), actions_);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy_n(row(keep[i]).begin(), actions_, out.row(static_cast<int>(i)).begin());
  }
  return out;
}

double default_propagation_sigma(const DistanceMatrix& matrix, int knn) {
  std::vector<double> distances;
  for (int t = 0; t < matrix.size(); ++t) {
    for (int u : nearest_frames(matrix, t, knn)) {
      if (matrix.at(t, u) > 0.0f) distances.push_back(matrix.at(t, u));
    }
  }
  if (distances.empty()) return 1.0;
  const std::size_t mid = distances.size() / 2;
  std::nth_element(distances.begin(), distances.begin() + mid, distances.end());
  double median = distances[mid];
  if (distances.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(distances.begin(), distances.begin() + mid));
  }
  return std::sqrt(median);
}

PropagationResult propagate_labels(const DistanceMatrix& matrix,
                                   const ActionExamples& examples,
                                   int action_count,
                                   const PropagationParams& params,
                                   std::stop_token stop) {
  const int n = matrix.size();
  if (action_count < 1) throw InvalidRequest("propagation needs at least one action");
  std::vector<int> per_action(action_count, 0);
  for (const auto& [frame, action] : examples) {
    if (frame < 0 || frame >= n) {
      throw InvalidRequest("example frame " + std::to_string(frame) + " out of range");
    }
    if (action < 0 || action >= action_count) {
      throw InvalidRequest("example action index " + std::to_string(action) + " out of range");
    }
    ++per_action[action];
  }
  for (int a = 0; a < action_count; ++a) {
    if (per_action[a] == 0 && params.require_every_class) {
      throw InvalidRequest("action " + std::to_string(a) + " has no example frame");
    }
  }

  PropagationResult result;
  result.sigma = params.sigma.value_or(default_propagation_sigma(matrix, params.knn));
  const double inv_sigma2 = 1.0 / (result.sigma * result.sigma);

  // Symmetrised kNN affinity graph.
  std::vector<std::vector<Edge>> graph(n);
  {
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(n) * std::max(params.knn, 1));
    for (int t = 0; t < n; ++t) {
      for (int u : nearest_frames(matrix, t, params.knn)) {
        pairs.emplace_back(std::min(t, u), std::max(t, u));
      }
    }
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    for (const auto& [a, b] : pairs) {
      const double w = std::exp(-static_cast<double>(matrix.at(a, b)) * inv_sigma2);
      if (w <= 0.0) continue;
      graph[a].push_back({b, w});
      graph[b].push_back({a, w});
    }
  }

  // Frames unreachable from every example make the system singular.
  std::vector<char> reached(n, 0);
  std::deque<int> queue;
  for (const auto& [frame, action] : examples) {
    reached[frame] = 1;
    queue.push_back(frame);
  }
  while (!queue.empty()) {
    const int t = queue.front();
    queue.pop_front();
    for (const Edge& e : graph[t]) {
      if (!reached[e.to]) {
        reached[e.to] = 1;
        queue.push_back(e.to);
      }
    }
  }

  result.field = ActionVectorField(n, action_count);
  std::vector<int> unknown_index(n, -1);
  std::vector<int> unknowns;
  for (int t = 0; t < n; ++t) {
    if (auto it = examples.find(t); it != examples.end()) {
      result.field.row(t)[it->second] = 1.0;
    } else if (!reached[t]) {
      result.isolated_frames.push_back(t);
      std::fill_n(result.field.row(t).begin(), action_count, 1.0 / action_count);
    } else {
      unknown_index[t] = static_cast<int>(unknowns.size());
      unknowns.push_back(t);
    }
  }
  if (!result.isolated_frames.empty()) {
    log_warning(std::to_string(result.isolated_frames.size()) +
                " frame(s) have no affinity path to any example; assigned uniform action vectors");
  }
  if (unknowns.empty()) return result;

  // L_uu f = W_ul y_l, assembled once, solved per action.
  const int m = static_cast<int>(unknowns.size());
  CsrMatrix laplacian;
  laplacian.rows = m;
  laplacian.row_start.assign(m + 1, 0);
  std::vector<double> diagonal(m, 0.0);
  std::vector<std::vector<double>> rhs(action_count, std::vector<double>(m, 0.0));
  for (int i = 0; i < m; ++i) {
    const int t = unknowns[i];
    std::vector<std::pair<int, double>> entries;
    double degree = 0.0;
    for (const Edge& e : graph[t]) {
      degree += e.weight;
      if (unknown_index[e.to] >= 0) {
        entries.emplace_back(unknown_index[e.to], -e.weight);
      } else if (auto it = examples.find(e.to); it != examples.end()) {
        rhs[it->second][i] += e.weight;
      }
    }
    entries.emplace_back(i, degree);
    std::sort(entries.begin(), entries.end());
    for (const auto& [col, val] : entries) {
      laplacian.column.push_back(col);
      laplacian.value.push_back(val);
    }
    laplacian.row_start[i + 1] = static_cast<int>(laplacian.column.size());
    diagonal[i] = degree;
  }

  auto apply = [&](std::span<const double> x, std::span<double> y) { laplacian.multiply(x, y); };
  const int max_iterations = 10 * m + 100;
  std::vector<double> solution(m);
  for (int a = 0; a < action_count; ++a) {
    std::fill(solution.begin(), solution.end(), 0.0);
    const SolveReport report = conjugate_gradient(apply, diagonal, rhs[a], solution,
                                                  params.tolerance, max_iterations, stop);
    result.max_iterations_used = std::max(result.max_iterations_used, report.iterations);
    if (report.cancelled) throw InvalidRequest("label propagation cancelled");
    if (!report.converged) {
      log_warning("label propagation did not reach the residual tolerance (residual " +
                  std::to_string(report.relative_residual) + ")");
    }
    for (int i = 0; i < m; ++i) result.field.row(unknowns[i])[a] = solution[i];
  }

  for (int t : unknowns) {
    auto r = result.field.row(t);
    double sum = 0.0;
    for (double& v : r) {
      v = std::max(v, 0.0);
      sum += v;
    }
    if (sum > 0.0) {
      for (double& v : r) v /= sum;
    } else {
      std::fill(r.begin(), r.end(), 1.0 / action_count);
    }
  }
  return result;
}

ActionModel::ActionModel(ActionSet actions, std::shared_ptr<const DistanceMatrix> matrix,
                         ActionExamples examples, PropagationParams params)
    : actions_(std::move(actions)), matrix_(std::move(matrix)), params_(params) {
  actions_.validate();
  std::lock_guard lock(mutex_);
  propagate_locked(examples);
}

ActionExamples ActionModel::examples() const {
  std::lock_guard lock(mutex_);
  return examples_;
}

std::shared_ptr<const ActionVectorField> ActionModel::field() const {
  std::lock_guard lock(mutex_);
  return field_;
}

double ActionModel::sigma() const {
  std::lock_guard lock(mutex_);
  return sigma_;
}

void ActionModel::add_example(int frame, std::string_view action) {
  const int index = actions_.index_of(action);
  if (index < 0) {
    throw InvalidRequest("unknown action '" + std::string(action) + "' on actor '" +
                         actions_.actor_id + "'");
  }
  if (frame < 0 || frame >= matrix_->size()) {
    throw InvalidRequest("frame " + std::to_string(frame) + " out of range");
  }
  std::lock_guard lock(mutex_);
  ActionExamples next = examples_;
  next[frame] = index;
  propagate_locked(next);
}

void ActionModel::remove_example(int frame) {
  std::lock_guard lock(mutex_);
  auto it = examples_.find(frame);
  if (it == examples_.end()) {
    throw InvalidRequest("frame " + std::to_string(frame) + " is not an example");
  }
  const int action = it->second;
  const auto remaining = std::count_if(examples_.begin(), examples_.end(),
                                       [&](const auto& e) { return e.second == action; });
  if (remaining == 1) {
    throw InvalidRequest("frame " + std::to_string(frame) + " is the only example of action '" +
                         actions_.actions[action].id +
                         "'; tag another frame first so the action stays defined");
  }
  ActionExamples next = examples_;
  next.erase(frame);
  propagate_locked(next);
}

void ActionModel::propagate_locked(const ActionExamples& examples) {
  auto result = propagate_labels(*matrix_, examples, actions_.size(), params_);
  examples_ = examples;
  sigma_ = result.sigma;
  field_ = std::make_shared<const ActionVectorField>(std::move(result.field));
}

}  // namespace loopstage
