#ifndef FISHERPRUNE_FORWARD_HPP
#define FISHERPRUNE_FORWARD_HPP

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fisherprune/graph.hpp"
#include "fisherprune/kernels.hpp"

namespace fisherprune {

/// Everything a forward pass produced, kept for backprop and utility tracing.
/// Node outputs are stored as N x C x H x W (dense outputs as N x C x 1 x 1).
struct ActivationCache {
  Tensor input;
  std::vector<Tensor> outputs;
  std::vector<PoolSwitches> switches;    // filled for MaxPool nodes
  std::vector<Tensor> dropout_scale;     // filled for Dropout nodes in training mode

  std::size_t batch() const { return input.empty() ? 0 : input.dim(0); }

  const Tensor& node_input(const NetGraph& g, std::size_t i, std::size_t k = 0) const {
    const std::size_t p = g.producers(i).at(k);
    return p == NetGraph::kInput ? input : outputs.at(p);
  }
};

struct ForwardResult {
  Tensor logits;  // N x classes, decision layer output
  Tensor probs;   // N x classes, softmax output
  ActivationCache cache;
};

namespace detail {

inline Tensor as_batch(const Tensor& x, const FeatureShape& s) {
  if (x.rank() == 3) {
    require(x.shape() == s.shape(), ErrorKind::Shape,
            "forward: sample shape " + shape_str(x.shape()) + " != model input " +
                shape_str(s.shape()));
    return x.reshaped({1, s.c, s.h, s.w});
  }
  require(x.rank() == 4 && x.dim(1) == s.c && x.dim(2) == s.h && x.dim(3) == s.w,
          ErrorKind::Shape,
          "forward: batch shape " + shape_str(x.shape()) + " != N x " + shape_str(s.shape()));
  return x;
}

inline void softmax_rows(const double* logits, double* probs, std::size_t n, std::size_t c) {
  for (std::size_t s = 0; s < n; ++s) {
    const double* z = logits + s * c;
    double* p = probs + s * c;
    const double m = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (p[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < c; ++j) p[j] /= total;
  }
}

}  // namespace detail

/// Runs the graph on a batch. With `dropout_rng` set, Dropout nodes sample
/// inverted-dropout masks from it; otherwise they are the identity.
inline ForwardResult forward(const NetGraph& g, const Tensor& batch,
                             std::mt19937_64* dropout_rng = nullptr) {
  require(g.validated(), ErrorKind::Usage, "forward: graph not validated");
  require(g.materialized(), ErrorKind::Usage, "forward: graph has no weights");
  ForwardResult r;
  ActivationCache& c = r.cache;
  c.input = detail::as_batch(batch, g.input);
  const std::size_t N = c.input.dim(0);
  c.outputs.resize(g.nodes.size());
  c.switches.resize(g.nodes.size());
  c.dropout_scale.resize(g.nodes.size());

  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    const FeatureShape os = g.out_shape(i);
    const Shape out4{N, os.c, os.h, os.w};
    const Tensor& x = c.node_input(g, i);
    switch (n.kind) {
      case LayerKind::Conv:
        c.outputs[i] = conv2d_forward(x, n.conv_weights());
        break;
      case LayerKind::Dense:
        c.outputs[i] = dense_forward_batch(x, n.weight, n.bias).reshaped(out4);
        break;
      case LayerKind::ReLU:
        c.outputs[i] = rectify(x);
        break;
      case LayerKind::MaxPool: {
        auto [y, sw] = maxpool_forward(x, n.pool, n.stride);
        c.outputs[i] = std::move(y);
        c.switches[i] = std::move(sw);
        break;
      }
      case LayerKind::Dropout:
        if (dropout_rng && n.rate > 0.0) {
          Tensor scale(x.shape());
          std::bernoulli_distribution keep(1.0 - n.rate);
          const double up = 1.0 / (1.0 - n.rate);
          for (double& v : scale.values()) v = keep(*dropout_rng) ? up : 0.0;
          Tensor y = x;
          for (std::size_t k = 0; k < y.size(); ++k) y[k] *= scale[k];
          c.outputs[i] = std::move(y);
          c.dropout_scale[i] = std::move(scale);
        } else {
          c.outputs[i] = x;
        }
        break;
      case LayerKind::Flatten:
        c.outputs[i] = x.reshaped(out4);
        break;
      case LayerKind::Concat: {
        Tensor y(out4);
        const std::size_t hw = os.h * os.w;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = c.node_input(g, i, k);
          const std::size_t pc = part.dim(1);
          for (std::size_t s = 0; s < N; ++s)
            std::copy_n(part.data() + s * pc * hw, pc * hw,
                        y.data() + (s * os.c + offset) * hw);
          offset += pc;
        }
        c.outputs[i] = std::move(y);
        break;
      }
      case LayerKind::Softmax: {
        Tensor y(out4);
        detail::softmax_rows(x.data(), y.data(), N, os.size());
        c.outputs[i] = std::move(y);
        break;
      }
    }
  }
  const std::size_t C = g.classes;
  r.logits = c.outputs[g.decision_index()].reshaped({N, C});
  r.probs = c.outputs[g.softmax_index()].reshaped({N, C});
  return r;
}

/// Index of the largest logit per sample; ties go to the lowest class.
inline std::vector<int> predict(const NetGraph& g, const Tensor& batch) {
  const ForwardResult r = forward(g, batch);
  const std::size_t N = r.logits.dim(0), C = r.logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t s = 0; s < N; ++s) {
    const double* z = r.logits.data() + s * C;
    out[s] = static_cast<int>(std::max_element(z, z + C) - z);
  }
  return out;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_FORWARD_HPP
