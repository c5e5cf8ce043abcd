#ifndef FISHERPRUNE_TESTS_SUPPORT_HPP
#define FISHERPRUNE_TESTS_SUPPORT_HPP

// Shared fixtures and reference implementations for the test suites.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fisherprune/forward.hpp"
#include "fisherprune/graph.hpp"
#include "fisherprune/kernels.hpp"
#include "fisherprune/prune.hpp"
#include "fisherprune/tensor.hpp"
#include "fisherprune/train.hpp"

namespace fptest {

using namespace fisherprune;

inline Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(s);
  for (double& v : t.values()) v = d(rng);
  return t;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Direct seven-loop cross-correlation of one C x H x W sample.
inline Tensor naive_conv(const Tensor& x, const ConvWeights& w) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t F = w.filters(), kh = w.kh(), kw = w.kw();
  const std::size_t oh = (H + 2 * w.pad - kh) / w.stride + 1, ow = (W + 2 * w.pad - kw) / w.stride + 1;
  Tensor y({F, oh, ow});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = w.bias.empty() ? 0.0 : w.bias[f];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b) {
              const long r = static_cast<long>(i * w.stride + a) - static_cast<long>(w.pad);
              const long q = static_cast<long>(j * w.stride + b) - static_cast<long>(w.pad);
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              s += w.kernel.at(f, c, a, b) * x.at(c, static_cast<std::size_t>(r), static_cast<std::size_t>(q));
            }
        y.at(f, i, j) = s;
      }
  return y;
}

/// conv(3) -> relu -> pool -> conv(3) -> relu -> dense -> relu (last hidden)
/// -> dropout -> dense -> softmax on 2 x 8 x 8 input.
inline NetGraph small_cnn(std::uint64_t seed, std::size_t f1 = 4, std::size_t f2 = 6,
                          std::size_t hidden = 10, std::size_t classes = 3) {
  NetGraph g;
  g.input = {2, 8, 8};
  g.classes = classes;
  g.nodes = {conv_node("c1", kInputId, f1, 3, 1, 1),
             simple_node("r1", LayerKind::ReLU, {"c1"}),
             pool_node("p1", "r1", 2, 2),
             conv_node("c2", "p1", f2, 3, 1, 1),
             simple_node("r2", LayerKind::ReLU, {"c2"}),
             simple_node("flat", LayerKind::Flatten, {"r2"}),
             dense_node("fc1", "flat", hidden),
             simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}),
             dropout_node("drop", "fc1_relu", 0.25),
             dense_node("fc2", "drop", classes),
             simple_node("prob", LayerKind::Softmax, {"fc2"})};
  g.last_hidden = "fc1_relu";
  g.validate();
  initialize_weights(g, seed);
  return g;
}

/// Conv stem, a three-branch module (1x1 | 1x1->3x3 | 1x1->5x5) joined by
/// Concat, pooling and two dense layers, on 2 x 8 x 8 input.
inline NetGraph small_modular(std::uint64_t seed, std::size_t classes = 3) {
  NetGraph g;
  g.input = {2, 8, 8};
  g.classes = classes;
  g.nodes = {conv_node("stem", kInputId, 4, 3, 1, 1),
             simple_node("stem_relu", LayerKind::ReLU, {"stem"}),
             conv_node("b1", "stem_relu", 3, 1),
             simple_node("b1_relu", LayerKind::ReLU, {"b1"}),
             conv_node("b2_reduce", "stem_relu", 2, 1),
             simple_node("b2_reduce_relu", LayerKind::ReLU, {"b2_reduce"}),
             conv_node("b2", "b2_reduce_relu", 3, 3, 1, 1),
             simple_node("b2_relu", LayerKind::ReLU, {"b2"}),
             conv_node("b3_reduce", "stem_relu", 2, 1),
             simple_node("b3_reduce_relu", LayerKind::ReLU, {"b3_reduce"}),
             conv_node("b3", "b3_reduce_relu", 2, 5, 1, 2),
             simple_node("b3_relu", LayerKind::ReLU, {"b3"}),
             simple_node("cat", LayerKind::Concat, {"b1_relu", "b2_relu", "b3_relu"}),
             pool_node("pool", "cat", 2, 2),
             simple_node("flat", LayerKind::Flatten, {"pool"}),
             dense_node("fc1", "flat", 8),
             simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}),
             dense_node("fc2", "fc1_relu", classes),
             simple_node("prob", LayerKind::Softmax, {"fc2"})};
  g.last_hidden = "fc1_relu";
  g.validate();
  initialize_weights(g, seed);
  return g;
}

/// Every layer kind including Concat, under 500 parameters: two convs read the
/// input and are concatenated, then relu, pool, flatten, dropout, two dense.
inline NetGraph gradcheck_net(std::uint64_t seed) {
  NetGraph g;
  g.input = {1, 6, 6};
  g.classes = 3;
  g.nodes = {conv_node("ca", kInputId, 2, 3, 1, 1),
             conv_node("cb", kInputId, 2, 1),
             simple_node("cat", LayerKind::Concat, {"ca", "cb"}),
             simple_node("relu", LayerKind::ReLU, {"cat"}),
             pool_node("pool", "relu", 2, 2),
             simple_node("flat", LayerKind::Flatten, {"pool"}),
             dropout_node("drop", "flat", 0.3),
             dense_node("fc1", "drop", 8),
             simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}),
             dense_node("fc2", "fc1_relu", 3),
             simple_node("prob", LayerKind::Softmax, {"fc2"})};
  g.last_hidden = "fc1_relu";
  g.validate();
  initialize_weights(g, seed);
  std::mt19937_64 rng(seed + 99);
  for (auto& n : g.nodes)
    if (n.has_params())
      for (double& b : n.bias.values()) b = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  return g;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central differences on every weight and bias against the analytic gradient.
inline GradCheck finite_difference_check(const NetGraph& g, const Tensor& x, const std::vector<int>& y,
                                         double l2, std::uint64_t dropout_seed, double h = 1e-6) {
  std::mt19937_64 rng(dropout_seed);
  Gradients grads;
  auto analytic_rng = rng;
  loss_and_gradients(g, x, y, l2, &analytic_rng, &grads);
  GradCheck out;
  NetGraph probe = g;
  auto loss = [&]() {
    auto r = rng;
    return loss_and_gradients(probe, x, y, l2, &r, nullptr);
  };
  auto check = [&](double& param, double analytic) {
    const double keep = param;
    param = keep + h;
    const double up = loss();
    param = keep - h;
    const double down = loss();
    param = keep;
    const double numeric = (up - down) / (2 * h);
    const double scale = std::max(std::abs(numeric), std::abs(analytic));
    ++out.checked;
    if (scale < 1e-7) return;
    out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic) / scale);
  };
  for (std::size_t i = 0; i < probe.nodes.size(); ++i) {
    if (!probe.nodes[i].has_params()) continue;
    for (std::size_t k = 0; k < probe.nodes[i].weight.size(); ++k)
      check(probe.nodes[i].weight[k], grads.weight[i][k]);
    for (std::size_t k = 0; k < probe.nodes[i].bias.size(); ++k)
      check(probe.nodes[i].bias[k], grads.bias[i][k]);
  }
  return out;
}

/// Oracle for a pruned net: the original graph with every removed filter's
/// kernel slice and bias set to zero, so its activations are exactly zero.
inline NetGraph zero_masked(const NetGraph& g, const PruneMask& m) {
  NetGraph z = g;
  for (auto& n : z.nodes) {
    if (!n.has_params()) continue;
    auto it = m.layers.find(n.id);
    if (it == m.layers.end()) continue;
    const std::size_t per = n.weight.size() / n.filters;
    for (std::size_t f = 0; f < n.filters; ++f) {
      if (std::binary_search(it->second.kept_filters.begin(), it->second.kept_filters.end(), f)) continue;
      for (std::size_t k = 0; k < per; ++k) n.weight[f * per + k] = 0.0;
      n.bias[f] = 0.0;
    }
  }
  return z;
}

/// Random kept-filter sets for every non-decision layer (never empty, except
/// that one inception branch may be dropped whole when `allow_branch_drop`).
inline PruneMask random_mask(const NetGraph& g, std::mt19937_64& rng, bool allow_branch_drop = false) {
  std::map<std::string, IndexSet> filters;
  std::bernoulli_distribution keep(0.6);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (!n.has_params() || i == g.decision_index()) continue;
    IndexSet s;
    for (std::size_t f = 0; f < n.filters; ++f)
      if (keep(rng)) s.push_back(f);
    if (s.empty()) s.push_back(uniform_index(rng, 0, n.filters - 1));
    filters[n.id] = s;
  }
  if (allow_branch_drop && std::bernoulli_distribution(0.5)(rng)) {
    const std::vector<std::string> branch_tips = {"b1", "b2", "b3"};
    filters[branch_tips[uniform_index(rng, 0, 2)]].clear();
  }
  return complete_mask(g, filters);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace fptest

#endif  // FISHERPRUNE_TESTS_SUPPORT_HPP
