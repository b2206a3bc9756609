#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "loopstage/compatibility.hpp"
#include "loopstage/frame_metric.hpp"
#include "loopstage/synthesis.hpp"

namespace loopstage::testing {

// A single-row labeling problem described from first principles, without the
// engine's transition tables.
struct RowProblem {
  std::string actor_id = "x";
  const DistanceMatrix* matrix = nullptr;     // over labels
  const ActionVectorField* field = nullptr;   // over labels
  const JumpGraph* graph = nullptr;           // null: every transition allowed
  bool hold_last = true;                      // last label may follow itself
  std::vector<std::vector<double>> requests;
  std::vector<ColumnWeights> weights;
  double sigma_a = 0.5;
  double sigma_t = 1.0;
  bool literal = false;
  std::optional<int> anchor;
  int frame_stride = 1;
  std::vector<std::pair<std::string, std::vector<int>>> fixed;  // actor, frames
  const CompatibilityModel::Snapshot* snapshot = nullptr;
  std::vector<double> extra_unary;  // [column * labels + label], optional
};

inline double oracle_extra(const RowProblem& p, int label, int k) {
  return p.extra_unary.empty() ? 0.0 : p.extra_unary[static_cast<std::size_t>(k) * p.matrix->size() + label];
}

// Costs of the frames a compressed label shows on the skipped columns:
// label a at compressed column c plays full-rate frame a*stride + i (clamped)
// at column c*stride + i, charged with that column's action request. Rows
// without partner layers have no compatibility part.
inline std::vector<double> fill_costs(const ActionVectorField& full_field,
                                      const std::vector<std::vector<double>>& full_requests,
                                      const std::vector<ColumnWeights>& full_weights, double sigma_a,
                                      int stride, int labels) {
  const int count = static_cast<int>(full_requests.size());
  const int compressed = (count + stride - 1) / stride;
  std::vector<double> out(static_cast<std::size_t>(compressed) * labels, 0.0);
  for (int c = 0; c < compressed; ++c) {
    for (int i = 1; i < stride && c * stride + i < count; ++i) {
      const int k = c * stride + i;
      for (int a = 0; a < labels; ++a) {
        const int frame = std::min(a * stride + i, full_field.frames() - 1);
        double s = 0.0;
        for (int q = 0; q < full_field.actions(); ++q) {
          const double d = full_field.at(frame, q) - full_requests[k][q];
          s += d * d;
        }
        out[static_cast<std::size_t>(c) * labels + a] += full_weights[k].alpha * (s / (2.0 * sigma_a * sigma_a));
      }
    }
  }
  return out;
}

inline bool oracle_allowed(const RowProblem& p, int from, int to) {
  if (p.graph == nullptr) return true;
  const int n = p.matrix->size();
  if (to == from + 1 || (p.hold_last && from == n - 1 && to == from)) return true;
  const int origin = p.literal ? from : std::min(from + 1, n - 1);
  for (const auto& c : p.graph->candidates[origin]) {
    if (c.frame == to) return true;
  }
  return false;
}

inline double oracle_action(const RowProblem& p, int label, int k) {
  double s = 0.0;
  for (int a = 0; a < p.field->actions(); ++a) {
    const double d = p.field->at(label, a) - p.requests[k][a];
    s += d * d;
  }
  return s / (2.0 * p.sigma_a * p.sigma_a);
}

inline double oracle_compat(const RowProblem& p, int label, int k) {
  double s = 0.0;
  for (const auto& [actor, frames] : p.fixed) {
    s += p.snapshot ? lookup_chi(*p.snapshot, p.actor_id, label * p.frame_stride, actor, frames[k])
                    : 1.0;
  }
  return s;
}

inline double oracle_transition(const RowProblem& p, int from, int to) {
  const int n = p.matrix->size();
  const int origin = p.literal ? from : (from + 1 < n ? from + 1 : from);
  const double e = static_cast<double>(p.matrix->at(origin, to)) / (p.sigma_t * p.sigma_t);
  return std::exp(std::min(e, 200.0));
}

// Objective accumulated column by column in the order a left-to-right DP
// would, so that equal sequences give bitwise equal sums.
inline double oracle_objective(const RowProblem& p, const std::vector<int>& labels) {
  double acc = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const double alpha = p.weights[k].alpha, beta = p.weights[k].beta;
    const double wp = (1 - alpha) * (1 - beta);
    const bool has_prev = k > 0 || p.anchor.has_value();
    if (has_prev && wp != 0.0) {
      const int prev = k > 0 ? labels[k - 1] : *p.anchor;
      acc = acc + wp * oracle_transition(p, prev, labels[k]);
    }
    double unary = alpha * oracle_action(p, labels[k], k) + (1 - alpha) * beta * oracle_compat(p, labels[k], k);
    if (!p.extra_unary.empty()) unary += oracle_extra(p, labels[k], k);
    acc = acc + unary;
  }
  return acc;
}

// The textbook decomposition alpha*E_A + (1-alpha)*(beta*E_C + (1-beta)*E_T).
inline double decomposed_energy(const RowProblem& p, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const double alpha = p.weights[k].alpha, beta = p.weights[k].beta;
    const bool has_prev = k > 0 || p.anchor.has_value();
    const double et =
        has_prev ? oracle_transition(p, k > 0 ? labels[k - 1] : *p.anchor, labels[k]) : 0.0;
    total += alpha * oracle_action(p, labels[k], k) +
             (1 - alpha) * (beta * oracle_compat(p, labels[k], k) + (1 - beta) * et) +
             oracle_extra(p, labels[k], k);
  }
  return total;
}

struct OracleResult {
  std::vector<int> labels;
  double objective = std::numeric_limits<double>::infinity();
};

// Exhaustive search over all feasible sequences. Among equal optima the one
// with the smallest last label wins, then the smallest label before it, etc.
inline OracleResult brute_force_row(const RowProblem& p) {
  const int n = p.matrix->size();
  const int k_total = static_cast<int>(p.requests.size());
  OracleResult best;
  std::vector<int> labels(k_total, 0);
  auto better_tie = [&](const std::vector<int>& a, const std::vector<int>& b) {
    for (int k = k_total - 1; k >= 0; --k) {
      if (a[k] != b[k]) return a[k] < b[k];
    }
    return false;
  };
  std::function<void(int)> rec = [&](int k) {
    if (k == k_total) {
      const double e = oracle_objective(p, labels);
      if (e < best.objective || (e == best.objective && better_tie(labels, best.labels))) {
        best.objective = e;
        best.labels = labels;
      }
      return;
    }
    for (int t = 0; t < n; ++t) {
      if (k > 0 && !oracle_allowed(p, labels[k - 1], t)) continue;
      if (k == 0 && p.anchor && !oracle_allowed(p, *p.anchor, t)) continue;
      labels[k] = t;
      rec(k + 1);
    }
  };
  rec(0);
  return best;
}

// The engine-side input for the same problem.
struct RowInputHolder {
  TransitionTable table;
  RowInput input;
};

inline RowInputHolder engine_input(const RowProblem& p) {
  RowInputHolder h;
  h.table = build_transition_table(*p.matrix, p.graph, p.sigma_t, p.literal, p.hold_last);
  h.input.actor_id = p.actor_id;
  h.input.field = p.field;
  h.input.transitions = &h.table;
  h.input.requests = p.requests;
  h.input.weights = p.weights;
  h.input.sigma_a = p.sigma_a;
  h.input.compatibility = p.snapshot;
  h.input.anchor = p.anchor;
  h.input.frame_stride = p.frame_stride;
  h.input.extra_unary = p.extra_unary;
  for (const auto& [actor, frames] : p.fixed) h.input.owned_frames.push_back(frames);
  for (std::size_t i = 0; i < p.fixed.size(); ++i) {
    h.input.fixed_rows.push_back({p.fixed[i].first, h.input.owned_frames[i]});
  }
  return h;
}

}  // namespace loopstage::testing
