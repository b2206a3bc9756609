#pragma once

#include <cstddef>
#include <vector>

namespace loopstage {

// Dinic's blocking-flow max-flow on real capacities.
class MaxFlow {
 public:
  explicit MaxFlow(int nodes);

  void add_edge(int from, int to, double capacity, double reverse_capacity = 0.0);
  double solve(int source, int sink);
  // After solve(): true if `node` is reachable from the source in the
  // residual graph, i.e. on the source side of a minimum cut.
  bool source_side(int node) const { return level_[node] >= 0; }

 private:
  struct Arc {
    int to;
    int reverse;
    double residual;
  };

  bool build_levels(int source, int sink);
  double push(int node, int sink, double limit);

  std::vector<std::vector<Arc>> arcs_;
  std::vector<int> level_;
  std::vector<std::size_t> cursor_;
};

}  // namespace loopstage
