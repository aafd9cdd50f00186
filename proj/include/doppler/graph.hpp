#pragma once

#include <array>
#include <utility>
#include <vector>

namespace doppler {

// Typed directed graph with fixed per-node feature vectors. Edge (u, v) of
// type t carries u's features to v during message passing.
enum class EdgeType : int { LeftChild = 0, RightChild = 1, Parent = 2, SelfLoop = 3 };
inline constexpr int kNumEdgeTypes = 4;

struct LabeledGraph {
  int num_nodes = 0;
  int feat_dim = 0;
  std::vector<float> feats;  // num_nodes x feat_dim, row-major
  std::array<std::vector<std::pair<int, int>>, kNumEdgeTypes> edges;

  void add_edge(int from, int to, EdgeType t) {
    edges[static_cast<int>(t)].emplace_back(from, to);
  }

  bool operator==(const LabeledGraph& o) const {
    return num_nodes == o.num_nodes && feat_dim == o.feat_dim && feats == o.feats &&
           edges == o.edges;
  }
};

}  // namespace doppler
