#include "loopstage/maxflow.hpp"

#include <algorithm>
#include <limits>
#include <queue>

namespace loopstage {
namespace {
constexpr double kEpsilon = 1e-12;
}

MaxFlow::MaxFlow(int nodes) : arcs_(nodes), level_(nodes, -1), cursor_(nodes, 0) {}

void MaxFlow::add_edge(int from, int to, double capacity, double reverse_capacity) {
  if (from == to) return;
  arcs_[from].push_back({to, static_cast<int>(arcs_[to].size()), capacity});
  arcs_[to].push_back({from, static_cast<int>(arcs_[from].size()) - 1, reverse_capacity});
}

bool MaxFlow::build_levels(int source, int sink) {
  std::fill(level_.begin(), level_.end(), -1);
  std::queue<int> queue;
  level_[source] = 0;
  queue.push(source);
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop();
    for (const Arc& a : arcs_[v]) {
      if (a.residual > kEpsilon && level_[a.to] < 0) {
        level_[a.to] = level_[v] + 1;
        queue.push(a.to);
      }
    }
  }
  return level_[sink] >= 0;
}

double MaxFlow::push(int node, int sink, double limit) {
  if (node == sink) return limit;
  for (std::size_t& i = cursor_[node]; i < arcs_[node].size(); ++i) {
    Arc& a = arcs_[node][i];
    if (a.residual <= kEpsilon || level_[a.to] != level_[node] + 1) continue;
    const double pushed = push(a.to, sink, std::min(limit, a.residual));
    if (pushed > 0.0) {
      a.residual -= pushed;
      arcs_[a.to][a.reverse].residual += pushed;
      return pushed;
    }
  }
  return 0.0;
}

double MaxFlow::solve(int source, int sink) {
  double total = 0.0;
  while (build_levels(source, sink)) {
    std::fill(cursor_.begin(), cursor_.end(), 0);
    while (true) {
      const double pushed = push(source, sink, std::numeric_limits<double>::infinity());
      if (pushed <= 0.0) break;
      total += pushed;
    }
  }
  // The last failed BFS leaves level_ marking the source side of the cut.
  return total;
}

}  // namespace loopstage
