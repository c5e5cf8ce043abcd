#ifndef FISHERPRUNE_TRAIN_HPP
#define FISHERPRUNE_TRAIN_HPP

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "fisherprune/dataset.hpp"
#include "fisherprune/forward.hpp"
#include "fisherprune/graph.hpp"

namespace fisherprune {

struct TrainConfig {
  double learning_rate = 0.05;
  double l2 = 1e-4;
  bool dropout = true;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;

  void validate() const {
    require(learning_rate > 0.0, ErrorKind::Usage, "learning rate must be positive");
    require(l2 >= 0.0, ErrorKind::Usage, "L2 coefficient must be non-negative");
    require(batch_size >= 1, ErrorKind::Usage, "batch size must be positive");
  }
};

/// Per-node parameter gradients (empty tensors for parameter-free nodes).
struct Gradients {
  std::vector<Tensor> weight;
  std::vector<Tensor> bias;
};

/// Objective = mean cross-entropy over the batch + (l2 / 2) * sum of squared
/// weights (biases are not decayed). Returns the objective; fills `grads` when
/// non-null. Dropout masks are drawn from `rng` when it is non-null.
inline double loss_and_gradients(const NetGraph& g, const Tensor& batch,
                                 const std::vector<int>& labels, double l2,
                                 std::mt19937_64* rng, Gradients* grads) {
  ForwardResult fr = forward(g, batch, rng);
  const ActivationCache& c = fr.cache;
  const std::size_t N = c.batch(), C = g.classes;
  require(labels.size() == N, ErrorKind::Usage, "label count does not match batch size");

  double ce = 0.0;
  for (std::size_t s = 0; s < N; ++s) {
    require(labels[s] >= 0 && static_cast<std::size_t>(labels[s]) < C, ErrorKind::Usage,
            "label " + std::to_string(labels[s]) + " outside [0, classes)");
    const double p = fr.probs[s * C + static_cast<std::size_t>(labels[s])];
    ce -= std::log(std::max(p, 1e-300));
  }
  double loss = ce / static_cast<double>(N);
  double reg = 0.0;
  for (const auto& n : g.nodes)
    if (n.has_params()) reg += sum_squares(n.weight.values());
  loss += 0.5 * l2 * reg;
  require(std::isfinite(loss), ErrorKind::Numerical,
          "non-finite loss; the learning rate is probably too high");
  if (!grads) return loss;

  const std::size_t L = g.nodes.size();
  grads->weight.assign(L, Tensor());
  grads->bias.assign(L, Tensor());
  std::vector<Tensor> dout(L);
  auto accumulate = [&](std::size_t target, Tensor&& t) {
    if (target == NetGraph::kInput) return;
    if (dout[target].empty()) {
      dout[target] = std::move(t);
    } else {
      for (std::size_t k = 0; k < t.size(); ++k) dout[target][k] += t[k];
    }
  };

  {
    const std::size_t dec = g.decision_index();
    Tensor dz = fr.probs;
    for (std::size_t s = 0; s < N; ++s) dz[s * C + static_cast<std::size_t>(labels[s])] -= 1.0;
    for (double& v : dz.values()) v /= static_cast<double>(N);
    dout[dec] = dz.reshaped(c.outputs[dec].shape());
  }

  for (std::size_t i = L; i-- > 0;) {
    const LayerNode& n = g.nodes[i];
    if (n.kind == LayerKind::Softmax || dout[i].empty()) continue;
    const Tensor& dy = dout[i];
    const Tensor& x = c.node_input(g, i);
    const std::size_t src = g.producers(i).front();
    switch (n.kind) {
      case LayerKind::Conv: {
        const ConvWeights cw = n.conv_weights();
        auto [dk, db] = conv2d_weight_grad(x, dy, cw);
        for (std::size_t k = 0; k < dk.size(); ++k) dk[k] += l2 * n.weight[k];
        grads->weight[i] = std::move(dk);
        grads->bias[i] = std::move(db);
        if (src != NetGraph::kInput) accumulate(src, conv2d_transpose(dy, cw, x.dim(2), x.dim(3)));
        break;
      }
      case LayerKind::Dense: {
        const std::size_t dout_n = n.filters, din = n.channels;
        Tensor dW(n.weight.shape()), db({dout_n});
        for (std::size_t s = 0; s < N; ++s) {
          const double* gy = dy.data() + s * dout_n;
          const double* xs = x.data() + s * din;
          for (std::size_t o = 0; o < dout_n; ++o) {
            double* row = dW.data() + o * din;
            const double a = gy[o];
            for (std::size_t k = 0; k < din; ++k) row[k] += a * xs[k];
            db[o] += a;
          }
        }
        for (std::size_t k = 0; k < dW.size(); ++k) dW[k] += l2 * n.weight[k];
        grads->weight[i] = std::move(dW);
        grads->bias[i] = std::move(db);
        if (src != NetGraph::kInput)
          accumulate(src, dense_transpose_batch(dy, n.weight).reshaped(x.shape()));
        break;
      }
      case LayerKind::ReLU: {
        Tensor dx = dy;
        for (std::size_t k = 0; k < dx.size(); ++k)
          if (!(x[k] > 0.0)) dx[k] = 0.0;
        accumulate(src, std::move(dx));
        break;
      }
      case LayerKind::MaxPool:
        accumulate(src, unpool(dy, c.switches[i], x.shape()));
        break;
      case LayerKind::Dropout: {
        Tensor dx = dy;
        if (!c.dropout_scale[i].empty())
          for (std::size_t k = 0; k < dx.size(); ++k) dx[k] *= c.dropout_scale[i][k];
        accumulate(src, std::move(dx));
        break;
      }
      case LayerKind::Flatten:
        accumulate(src, dy.reshaped(x.shape()));
        break;
      case LayerKind::Concat: {
        const FeatureShape os = g.out_shape(i);
        const std::size_t hw = os.h * os.w;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = c.node_input(g, i, k);
          const std::size_t pc = part.dim(1);
          Tensor dp(part.shape());
          for (std::size_t s = 0; s < N; ++s)
            std::copy_n(dy.data() + (s * os.c + offset) * hw, pc * hw, dp.data() + s * pc * hw);
          offset += pc;
          accumulate(g.producers(i)[k], std::move(dp));
        }
        break;
      }
      case LayerKind::Softmax:
        break;
    }
  }
  return loss;
}

/// Re-zeroes weights held by a freeze mask.
inline void enforce_frozen(NetGraph& g) {
  for (auto& n : g.nodes)
    for (std::size_t k = 0; k < n.frozen.size(); ++k)
      if (n.frozen[k]) n.weight[k] = 0.0;
}

/// One SGD step w <- w - lr * (dCE/dw + l2 * w). Returns the pre-step loss.
inline double backward_sgd_step(NetGraph& g, const Tensor& batch, const std::vector<int>& labels,
                                const TrainConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  Gradients grads;
  const double loss =
      loss_and_gradients(g, batch, labels, cfg.l2, cfg.dropout ? &rng : nullptr, &grads);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    LayerNode& n = g.nodes[i];
    if (!n.has_params()) continue;
    for (std::size_t k = 0; k < n.weight.size(); ++k)
      n.weight[k] -= cfg.learning_rate * grads.weight[i][k];
    for (std::size_t k = 0; k < n.bias.size(); ++k)
      n.bias[k] -= cfg.learning_rate * grads.bias[i][k];
  }
  enforce_frozen(g);
  return loss;
}

/// Fraction of samples whose top logit matches the label.
inline double evaluate(const NetGraph& g, const Dataset& data, std::size_t chunk = 256) {
  data.validate();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const std::size_t n = std::min(chunk, data.size() - b);
    const auto pred = predict(g, data.batch(b, n));
    for (std::size_t k = 0; k < n; ++k) correct += pred[k] == data.labels[b + k];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct EpochRecord {
  double loss = 0.0;          // mean of per-batch pre-step losses
  double val_accuracy = -1;   // -1 when no validation set was given
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  bool operator==(const TrainHistory& o) const {
    if (epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i)
      if (epochs[i].loss != o.epochs[i].loss || epochs[i].val_accuracy != o.epochs[i].val_accuracy)
        return false;
    return true;
  }
};

/// Minibatch SGD over shuffled epochs; fully determined by cfg.seed.
inline TrainHistory train(NetGraph& g, const Dataset& data, const TrainConfig& cfg,
                          const Dataset* validation = nullptr) {
  cfg.validate();
  data.validate();
  require(data.shape == g.input, ErrorKind::Data, "dataset sample shape does not match model input");
  require(data.classes == g.classes, ErrorKind::Data, "dataset class count does not match model");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainHistory h;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - b);
      std::vector<std::size_t> idx(order.begin() + b, order.begin() + b + n);
      std::vector<int> y(n);
      for (std::size_t k = 0; k < n; ++k) y[k] = data.labels[idx[k]];
      total += backward_sgd_step(g, data.gather(idx), y, cfg, rng);
      ++batches;
    }
    EpochRecord rec;
    rec.loss = total / static_cast<double>(batches);
    if (validation) rec.val_accuracy = evaluate(g, *validation);
    h.epochs.push_back(rec);
  }
  return h;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_TRAIN_HPP
