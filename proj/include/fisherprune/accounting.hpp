#ifndef FISHERPRUNE_ACCOUNTING_HPP
#define FISHERPRUNE_ACCOUNTING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fisherprune/graph.hpp"

namespace fisherprune {

/// Multiplies and adds each count as one FLOP. A conv output element costs
/// h*w*cn multiplies and h*w*cn adds (bias folded into the adds); a dense
/// layer costs 2*din*dout. ReLU, pooling, dropout, concat and softmax are free.
struct LayerCount {
  std::string id;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

inline std::uint64_t frozen_count(const LayerNode& n) {
  std::uint64_t k = 0;
  for (auto f : n.frozen) k += f != 0;
  return k;
}

/// Per parameterized layer, in graph order. Weights held at zero by a freeze
/// mask are not counted as parameters; they still cost FLOPs.
inline std::vector<LayerCount> layer_counts(const NetGraph& g) {
  require(g.validated(), ErrorKind::Usage, "layer_counts: graph not validated");
  std::vector<LayerCount> out;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (!n.has_params()) continue;
    LayerCount c{n.id};
    const std::uint64_t w = shape_size(n.weight_shape());
    c.params = w - frozen_count(n) + n.filters;
    if (n.kind == LayerKind::Conv) {
      const FeatureShape o = g.out_shape(i);
      c.flops = 2ull * n.kh * n.kw * n.channels * n.filters * o.h * o.w;
    } else {
      c.flops = 2ull * n.channels * n.filters;
    }
    out.push_back(c);
  }
  return out;
}

inline std::uint64_t count_params(const NetGraph& g) {
  std::uint64_t t = 0;
  for (const auto& c : layer_counts(g)) t += c.params;
  return t;
}

inline std::uint64_t count_flops(const NetGraph& g) {
  std::uint64_t t = 0;
  for (const auto& c : layer_counts(g)) t += c.flops;
  return t;
}

/// FLOPs of `g` evaluated at a different input extent (same channel count).
inline std::uint64_t count_flops(NetGraph g, const FeatureShape& input) {
  g.input = input;
  g.validate();
  return count_flops(g);
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_ACCOUNTING_HPP
