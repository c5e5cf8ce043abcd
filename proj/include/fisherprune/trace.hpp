#ifndef FISHERPRUNE_TRACE_HPP
#define FISHERPRUNE_TRACE_HPP

// Deconvolution-based utility tracing. Starting from the selected neurons of
// the last hidden layer, a reconstruction field is pushed back to the input:
// unpooling through the stored max switches, rectification wherever a ReLU
// stands, and the transpose of every conv (dense layers are treated as
// convolutions whose kernel covers the whole input map). Concat splits its
// field back to the branches; a node feeding several consumers receives the
// sum of their fields. Fields are averaged over samples, and a channel's
// utility is the spatial max of its averaged field.

#include <algorithm>
#include <vector>

#include "fisherprune/dataset.hpp"
#include "fisherprune/forward.hpp"
#include "fisherprune/graph.hpp"
#include "fisherprune/kernels.hpp"
#include "fisherprune/lda.hpp"

namespace fisherprune {

struct UtilityMap {
  std::vector<Tensor> fields;                       // per node output, C x H x W; empty if untraced
  std::vector<std::vector<double>> channel_scores;  // per node, spatial max of its field
  std::vector<std::size_t> selected;                // seeded last-hidden neurons
  std::size_t samples = 0;

  bool traced(std::size_t node) const { return !fields.at(node).empty(); }
};

struct TraceOptions {
  // Scale each seeded neuron by its Fisher ratio in addition to its activation.
  bool weight_seed_by_fisher = false;
  std::size_t chunk = 64;
};

/// Nodes whose output can influence the last hidden layer (inclusive).
inline std::vector<bool> last_hidden_ancestors(const NetGraph& g) {
  std::vector<bool> anc(g.nodes.size(), false);
  anc[g.last_hidden_index()] = true;
  for (std::size_t i = g.last_hidden_index() + 1; i-- > 0;) {
    if (!anc[i]) continue;
    for (std::size_t p : g.producers(i))
      if (p != NetGraph::kInput) anc[p] = true;
  }
  return anc;
}

/// Seed field at the last hidden layer for a batch: every selected neuron
/// carries its activation at its (first) spatial argmax, all else is zero.
/// `fisher` (optional) rescales each neuron by its Fisher ratio.
inline Tensor seed_utility(const NetGraph& g, const ActivationCache& cache,
                           const std::vector<std::size_t>& selected,
                           const LDAScores* fisher = nullptr) {
  require(!selected.empty(), ErrorKind::Usage, "seed_utility: empty selection");
  const Tensor& act = cache.outputs.at(g.last_hidden_index());
  const std::size_t N = act.dim(0), M = act.dim(1), S = act.dim(2) * act.dim(3);
  std::vector<double> factor(M, 1.0);
  if (fisher) {
    std::fill(factor.begin(), factor.end(), 0.0);
    for (std::size_t c = 0; c < fisher->size(); ++c) factor[fisher->column_to_neuron[c]] = fisher->v[c];
  }
  Tensor seed(act.shape());
  for (std::size_t j : selected) {
    require(j < M, ErrorKind::Usage, "seed_utility: neuron " + std::to_string(j) + " out of range");
    for (std::size_t s = 0; s < N; ++s) {
      const double* p = act.data() + (s * M + j) * S;
      const std::size_t at = static_cast<std::size_t>(std::max_element(p, p + S) - p);
      seed[(s * M + j) * S + at] = p[at] * factor[j];
    }
  }
  return seed;
}

/// Dense layer viewed as a convolution over its (unflattened) input maps:
/// kernel dout x C x H x W with output 1 x 1. Pure FC input gives 1 x 1 maps.
inline ConvWeights dense_as_conv(const NetGraph& g, std::size_t node) {
  const LayerNode& n = g.nodes.at(node);
  require(n.kind == LayerKind::Dense, ErrorKind::Usage, "dense_as_conv: '" + n.id + "' is not Dense");
  std::size_t src = g.producers(node).front();
  while (src != NetGraph::kInput &&
         (g.nodes[src].kind == LayerKind::Flatten || g.nodes[src].kind == LayerKind::Dropout))
    src = g.producers(src).front();
  const FeatureShape in = src == NetGraph::kInput ? g.input : g.out_shape(src);
  return ConvWeights{n.weight.reshaped({n.filters, in.c, in.h, in.w}), n.bias, 1, 0};
}

/// One deconvolution step through node `i` for a batch field `above`
/// (N x C x H x W, shaped like the node's output). Returns one field per
/// input of the node, shaped like that input.
inline std::vector<Tensor> deconv_step_batch(const NetGraph& g, std::size_t i, const Tensor& above,
                                             const ActivationCache& cache) {
  const LayerNode& n = g.nodes.at(i);
  const std::size_t N = above.dim(0);
  auto in_shape = [&](std::size_t k) {
    const FeatureShape s = g.in_shape(i, k);
    return Shape{N, s.c, s.h, s.w};
  };
  switch (n.kind) {
    case LayerKind::Conv: {
      const FeatureShape s = g.in_shape(i);
      return {conv2d_transpose(above, n.conv_weights(), s.h, s.w)};
    }
    case LayerKind::Dense: {
      const ConvWeights view = dense_as_conv(g, i);
      const Tensor maps = conv2d_transpose(above.reshaped({N, n.filters, 1, 1}), view,
                                           view.kh(), view.kw());
      return {maps.reshaped(in_shape(0))};
    }
    case LayerKind::MaxPool: {
      const PoolSwitches& sw = cache.switches.at(i);
      require(!sw.index.empty(), ErrorKind::Usage, "deconv: no cached switches for '" + n.id + "'");
      require(sw.index.size() == above.size(), ErrorKind::Shape,
              "deconv: cached switches of '" + n.id + "' do not match the field");
      return {unpool(above, sw, in_shape(0))};
    }
    case LayerKind::ReLU:
      return {rectify(above)};
    case LayerKind::Dropout:
    case LayerKind::Softmax:
      return {above};
    case LayerKind::Flatten:
      return {above.reshaped(in_shape(0))};
    case LayerKind::Concat: {
      std::vector<Tensor> parts;
      const FeatureShape os = g.out_shape(i);
      const std::size_t hw = os.h * os.w;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Tensor part(in_shape(k));
        const std::size_t pc = part.dim(1);
        for (std::size_t s = 0; s < N; ++s)
          std::copy_n(above.data() + (s * os.c + offset) * hw, pc * hw, part.data() + s * pc * hw);
        offset += pc;
        parts.push_back(std::move(part));
      }
      return parts;
    }
  }
  return {};
}

/// Single-sample form: `above` is C x H x W for sample `sample` of the cache.
inline std::vector<Tensor> deconv_step(const NetGraph& g, std::size_t i, const Tensor& above,
                                       const ActivationCache& cache, std::size_t sample) {
  require(above.rank() == 3, ErrorKind::Shape, "deconv_step: expected a C x H x W field");
  require(sample < cache.batch(), ErrorKind::Usage, "deconv_step: sample out of range");
  const Tensor batched = above.reshaped({1, above.dim(0), above.dim(1), above.dim(2)});
  std::vector<Tensor> out;
  if (g.nodes.at(i).kind == LayerKind::MaxPool) {
    const PoolSwitches& all = cache.switches.at(i);
    require(!all.index.empty(), ErrorKind::Usage,
            "deconv: no cached switches for '" + g.nodes[i].id + "'");
    const std::size_t per_out = above.size();
    const FeatureShape in = g.in_shape(i);
    const std::size_t per_in = in.size();
    PoolSwitches sw;
    sw.input_shape = {1, in.c, in.h, in.w};
    sw.output_shape = batched.shape();
    for (std::size_t k = 0; k < per_out; ++k)
      sw.index.push_back(all.index.at(sample * per_out + k) - sample * per_in);
    out = {unpool(batched, sw, sw.input_shape)};
  } else {
    out = deconv_step_batch(g, i, batched, cache);
  }
  for (auto& t : out) t = t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
  return out;
}

/// Accumulates the reconstruction fields of every sample in `cache` into
/// `sums` (per node, C x H x W). Uses only the cached activations, switches
/// and the weights at or above each traced layer.
inline void trace_cache(const NetGraph& g, const ActivationCache& cache,
                        const std::vector<std::size_t>& selected, const LDAScores* fisher,
                        std::vector<Tensor>& sums) {
  const std::size_t L = g.nodes.size(), lh = g.last_hidden_index();
  const auto anc = last_hidden_ancestors(g);
  if (sums.size() != L) sums.assign(L, Tensor());
  std::vector<Tensor> field(L);
  field[lh] = seed_utility(g, cache, selected, fisher);
  for (std::size_t i = lh + 1; i-- > 0;) {
    if (!anc[i] || field[i].empty()) continue;
    const Tensor& u = field[i];
    const std::size_t N = u.dim(0), per = u.size() / N;
    if (sums[i].empty()) {
      const FeatureShape s = g.out_shape(i);
      sums[i] = Tensor({s.c, s.h, s.w});
    }
    for (std::size_t s = 0; s < N; ++s)
      for (std::size_t k = 0; k < per; ++k) sums[i][k] += u[s * per + k];
    auto below = deconv_step_batch(g, i, u, cache);
    for (std::size_t k = 0; k < below.size(); ++k) {
      const std::size_t p = g.producers(i)[k];
      if (p == NetGraph::kInput) continue;
      if (field[p].empty()) {
        field[p] = std::move(below[k]);
      } else {
        for (std::size_t e = 0; e < field[p].size(); ++e) field[p][e] += below[k][e];
      }
    }
    field[i] = Tensor();
  }
}

inline UtilityMap finish_utility(std::vector<Tensor> sums, std::size_t samples,
                                 std::vector<std::size_t> selected) {
  UtilityMap um;
  um.samples = samples;
  um.selected = std::move(selected);
  um.channel_scores.resize(sums.size());
  for (std::size_t i = 0; i < sums.size(); ++i) {
    if (sums[i].empty()) continue;
    for (double& v : sums[i].values()) v /= static_cast<double>(samples);
    const std::size_t C = sums[i].dim(0), S = sums[i].dim(1) * sums[i].dim(2);
    um.channel_scores[i].resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = sums[i].data() + c * S;
      um.channel_scores[i][c] = *std::max_element(p, p + S);
    }
  }
  um.fields = std::move(sums);
  return um;
}

/// Utility of every layer for the selected last-hidden neurons, averaged over
/// all samples of `data`.
inline UtilityMap trace_utility(const NetGraph& g, const Dataset& data,
                                const std::vector<std::size_t>& selected,
                                const LDAScores* fisher = nullptr, const TraceOptions& opt = {}) {
  data.validate();
  require(!selected.empty(), ErrorKind::Usage, "trace_utility: empty selection");
  const LDAScores* weights = opt.weight_seed_by_fisher ? fisher : nullptr;
  require(!opt.weight_seed_by_fisher || fisher, ErrorKind::Usage,
          "trace_utility: Fisher-weighted seeds need LDA scores");
  std::vector<Tensor> sums;
  for (std::size_t b = 0; b < data.size(); b += opt.chunk) {
    const std::size_t n = std::min(opt.chunk, data.size() - b);
    const ForwardResult fr = forward(g, data.batch(b, n));
    trace_cache(g, fr.cache, selected, weights, sums);
  }
  return finish_utility(std::move(sums), data.size(), selected);
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_TRACE_HPP
