#ifndef FISHERPRUNE_GRAPH_HPP
#define FISHERPRUNE_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fisherprune/error.hpp"
#include "fisherprune/kernels.hpp"
#include "fisherprune/tensor.hpp"

namespace fisherprune {

enum class LayerKind { Conv, ReLU, MaxPool, Dense, Dropout, Flatten, Concat, Softmax };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Dropout: return "Dropout";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Concat: return "Concat";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

inline LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::ReLU, LayerKind::MaxPool, LayerKind::Dense,
                      LayerKind::Dropout, LayerKind::Flatten, LayerKind::Concat,
                      LayerKind::Softmax})
    if (s == kind_name(k)) return k;
  fail(ErrorKind::Schema, "unknown layer kind '" + s + "'");
}

/// Reserved id naming the network input in `LayerNode::inputs`.
inline constexpr const char* kInputId = "input";

/// Per-sample feature extents.
struct FeatureShape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  Shape shape() const { return {c, h, w}; }
  bool operator==(const FeatureShape&) const = default;
};

/// One node of the model DAG. Kind-specific fields are ignored by other kinds.
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::ReLU;
  std::vector<std::string> inputs;

  // Conv: fn x cn x kh x kw kernel. Dense: `filters` output units, `channels`
  // input features (both filled in by validation when zero).
  std::size_t filters = 0;
  std::size_t channels = 0;
  std::size_t kh = 0, kw = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;

  // MaxPool window; stride shared with conv's field.
  std::size_t pool = 0;

  // Dropout probability in [0, 1).
  double rate = 0.0;

  // Empty when unmaterialized (count-only configs).
  Tensor weight;
  Tensor bias;
  // Optional per-weight freeze mask (1 = held at zero), used by magnitude pruning.
  std::vector<std::uint8_t> frozen;

  bool has_params() const { return kind == LayerKind::Conv || kind == LayerKind::Dense; }
  bool materialized() const { return !weight.empty(); }

  Shape weight_shape() const {
    if (kind == LayerKind::Conv) return {filters, channels, kh, kw};
    return {filters, channels};
  }

  ConvWeights conv_weights() const { return ConvWeights{weight, bias, stride, pad}; }

  bool operator==(const LayerNode&) const = default;
};

/// Pruning-unit layout of a node output: `channels` units of `group`
/// contiguous elements each. Flatten keeps its input's layout so that dense
/// columns stay grouped by the feature map they came from.
struct ChannelLayout {
  std::size_t channels = 0;
  std::size_t group = 0;
};

class NetGraph {
 public:
  FeatureShape input;
  std::size_t classes = 0;
  std::string last_hidden;
  std::vector<LayerNode> nodes;

  /// Checks structure and propagates shapes; fills inferred dims. Throws
  /// Error(Schema|Shape) naming the offending node.
  void validate() {
    index_.clear();
    out_.assign(nodes.size(), {});
    layout_.assign(nodes.size(), {});
    producers_.assign(nodes.size(), {});
    consumers_.assign(nodes.size(), {});
    require(input.size() > 0, ErrorKind::Schema, "model: input shape must be positive");
    require(classes >= 1, ErrorKind::Schema, "model: class count must be positive");

    std::size_t softmax_count = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      LayerNode& n = nodes[i];
      const std::string where = "node '" + n.id + "': ";
      require(!n.id.empty() && n.id != kInputId, ErrorKind::Schema,
              where + "id must be nonempty and not '" + kInputId + "'");
      require(index_.emplace(n.id, i).second, ErrorKind::Schema, where + "duplicate id");

      std::vector<FeatureShape> ins;
      std::vector<ChannelLayout> in_layouts;
      for (const auto& src : n.inputs) {
        if (src == kInputId) {
          producers_[i].push_back(kInput);
          ins.push_back(input);
          in_layouts.push_back({input.c, input.h * input.w});
          continue;
        }
        auto it = index_.find(src);
        require(it != index_.end(), ErrorKind::Schema,
                where + "input '" + src + "' is not defined by an earlier node");
        producers_[i].push_back(it->second);
        consumers_[it->second].push_back(i);
        ins.push_back(out_[it->second]);
        in_layouts.push_back(layout_[it->second]);
      }
      if (n.kind == LayerKind::Concat)
        require(!n.inputs.empty(), ErrorKind::Schema, where + "Concat needs at least one input");
      else
        require(n.inputs.size() == 1, ErrorKind::Schema, where + "expects exactly one input");

      const FeatureShape in = ins.front();
      switch (n.kind) {
        case LayerKind::Conv: {
          require(n.filters >= 1 && n.kh >= 1 && n.kw >= 1 && n.stride >= 1, ErrorKind::Schema,
                  where + "conv needs positive filters, kernel extents and stride");
          if (n.channels == 0) n.channels = in.c;
          require(n.channels == in.c, ErrorKind::Shape,
                  where + "kernel channel count " + std::to_string(n.channels) +
                      " != input channels " + std::to_string(in.c));
          const std::size_t oh = conv_extent(in.h, n.kh, n, where + "height");
          const std::size_t ow = conv_extent(in.w, n.kw, n, where + "width");
          out_[i] = {n.filters, oh, ow};
          layout_[i] = {n.filters, oh * ow};
          break;
        }
        case LayerKind::Dense: {
          require(n.filters >= 1, ErrorKind::Schema, where + "dense needs positive units");
          if (n.channels == 0) n.channels = in.size();
          require(n.channels == in.size(), ErrorKind::Shape,
                  where + "dense input features " + std::to_string(n.channels) +
                      " != incoming size " + std::to_string(in.size()));
          out_[i] = {n.filters, 1, 1};
          layout_[i] = {n.filters, 1};
          break;
        }
        case LayerKind::ReLU:
        case LayerKind::Dropout:
          if (n.kind == LayerKind::Dropout)
            require(n.rate >= 0.0 && n.rate < 1.0, ErrorKind::Schema,
                    where + "dropout rate must lie in [0,1)");
          out_[i] = in;
          layout_[i] = in_layouts.front();
          break;
        case LayerKind::MaxPool: {
          require(n.pool >= 1 && n.stride >= 1, ErrorKind::Schema,
                  where + "pool window and stride must be positive");
          require(in.h >= n.pool && in.w >= n.pool && (in.h - n.pool) % n.stride == 0 &&
                      (in.w - n.pool) % n.stride == 0,
                  ErrorKind::Shape,
                  where + "pool window " + std::to_string(n.pool) + "/" +
                      std::to_string(n.stride) + " does not tile " + std::to_string(in.h) + "x" +
                      std::to_string(in.w));
          const std::size_t oh = (in.h - n.pool) / n.stride + 1;
          const std::size_t ow = (in.w - n.pool) / n.stride + 1;
          out_[i] = {in.c, oh, ow};
          layout_[i] = {in.c, oh * ow};
          break;
        }
        case LayerKind::Flatten:
          out_[i] = {in.size(), 1, 1};
          layout_[i] = in_layouts.front();
          break;
        case LayerKind::Concat: {
          std::size_t c = 0;
          for (std::size_t k = 0; k < ins.size(); ++k) {
            require(ins[k].h == in.h && ins[k].w == in.w, ErrorKind::Shape,
                    where + "concat input '" + n.inputs[k] + "' has spatial extent " +
                        std::to_string(ins[k].h) + "x" + std::to_string(ins[k].w) +
                        " but '" + n.inputs[0] + "' has " + std::to_string(in.h) + "x" +
                        std::to_string(in.w));
            require(in_layouts[k].group == in.h * in.w, ErrorKind::Shape,
                    where + "concat inputs must be unflattened feature maps");
            c += ins[k].c;
          }
          out_[i] = {c, in.h, in.w};
          layout_[i] = {c, in.h * in.w};
          break;
        }
        case LayerKind::Softmax:
          ++softmax_count;
          out_[i] = in;
          layout_[i] = in_layouts.front();
          softmax_ = i;
          break;
      }
      if (n.has_params()) check_param_shapes(n, where);
    }

    require(softmax_count == 1, ErrorKind::Schema, "model: exactly one Softmax node required");
    require(consumers_[softmax_].empty(), ErrorKind::Schema, "model: Softmax must be the sink");
    const std::size_t dec = producers_[softmax_].front();
    require(dec != kInput && nodes[dec].kind == LayerKind::Dense, ErrorKind::Schema,
            "model: Softmax must be fed by a Dense decision layer");
    require(nodes[dec].filters == classes, ErrorKind::Schema,
            "model: decision layer '" + nodes[dec].id + "' has " +
                std::to_string(nodes[dec].filters) + " units but class count is " +
                std::to_string(classes));
    require(consumers_[dec].size() == 1, ErrorKind::Schema,
            "model: decision layer must feed only the Softmax");
    decision_ = dec;

    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (i != softmax_)
        require(!consumers_[i].empty(), ErrorKind::Schema,
                "node '" + nodes[i].id + "': output is never consumed");
      if (nodes[i].kind == LayerKind::Dropout)
        for (std::size_t c : consumers_[i])
          require(nodes[c].kind == LayerKind::Dense, ErrorKind::Schema,
                  "node '" + nodes[i].id + "': dropout may only feed Dense layers");
    }

    auto lh = index_.find(last_hidden);
    require(lh != index_.end(), ErrorKind::Schema,
            "model: last_hidden '" + last_hidden + "' does not name a node");
    std::size_t walk = producers_[dec].front();
    while (walk != kInput && walk != lh->second &&
           (nodes[walk].kind == LayerKind::Dropout || nodes[walk].kind == LayerKind::Flatten))
      walk = producers_[walk].front();
    require(walk == lh->second, ErrorKind::Schema,
            "model: last_hidden '" + last_hidden + "' does not feed the decision layer '" +
                nodes[dec].id + "'");
    last_hidden_ = lh->second;
    validated_ = true;
  }

  bool validated() const { return validated_; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    require(it != index_.end(), ErrorKind::Usage, "no node named '" + id + "'");
    return it->second;
  }
  const LayerNode& node(const std::string& id) const { return nodes[index_of(id)]; }
  LayerNode& node(const std::string& id) { return nodes[index_of(id)]; }

  const FeatureShape& out_shape(std::size_t i) const { return out_.at(i); }
  const ChannelLayout& layout(std::size_t i) const { return layout_.at(i); }
  FeatureShape in_shape(std::size_t i, std::size_t k = 0) const {
    const std::size_t p = producers_.at(i).at(k);
    return p == kInput ? input : out_[p];
  }
  ChannelLayout in_layout(std::size_t i, std::size_t k = 0) const {
    const std::size_t p = producers_.at(i).at(k);
    return p == kInput ? ChannelLayout{input.c, input.h * input.w} : layout_[p];
  }
  /// Producer indices of node i; kInput stands for the network input.
  const std::vector<std::size_t>& producers(std::size_t i) const { return producers_.at(i); }
  const std::vector<std::size_t>& consumers(std::size_t i) const { return consumers_.at(i); }

  std::size_t softmax_index() const { return softmax_; }
  std::size_t decision_index() const { return decision_; }
  std::size_t last_hidden_index() const { return last_hidden_; }

  bool materialized() const {
    return std::all_of(nodes.begin(), nodes.end(),
                       [](const LayerNode& n) { return !n.has_params() || n.materialized(); });
  }

  /// Structural and weight equality; derived shape tables are ignored.
  bool same_as(const NetGraph& o) const {
    return input == o.input && classes == o.classes && last_hidden == o.last_hidden &&
           nodes == o.nodes;
  }

  static constexpr std::size_t kInput = static_cast<std::size_t>(-1);

 private:
  std::size_t conv_extent(std::size_t in, std::size_t k, const LayerNode& n,
                          const std::string& what) const {
    require(in + 2 * n.pad >= k, ErrorKind::Shape,
            what + ": kernel " + std::to_string(k) + " exceeds padded input " +
                std::to_string(in + 2 * n.pad));
    return (in + 2 * n.pad - k) / n.stride + 1;
  }

  static void check_param_shapes(const LayerNode& n, const std::string& where) {
    if (!n.materialized()) {
      require(n.bias.empty() && n.frozen.empty(), ErrorKind::Schema,
              where + "bias or mask present without weights");
      return;
    }
    require(n.weight.shape() == n.weight_shape(), ErrorKind::Shape,
            where + "weight shape " + shape_str(n.weight.shape()) + " != expected " +
                shape_str(n.weight_shape()));
    require(n.bias.rank() == 1 && n.bias.dim(0) == n.filters, ErrorKind::Shape,
            where + "bias length must be " + std::to_string(n.filters));
    require(n.frozen.empty() || n.frozen.size() == n.weight.size(), ErrorKind::Shape,
            where + "freeze mask length must match weight count");
  }

  std::map<std::string, std::size_t> index_;
  std::vector<FeatureShape> out_;
  std::vector<ChannelLayout> layout_;
  std::vector<std::vector<std::size_t>> producers_;
  std::vector<std::vector<std::size_t>> consumers_;
  std::size_t softmax_ = 0, decision_ = 0, last_hidden_ = 0;
  bool validated_ = false;
};

// Node constructors used by the architecture builders and tests.

inline LayerNode conv_node(std::string id, std::string in, std::size_t filters, std::size_t k,
                           std::size_t stride = 1, std::size_t pad = 0) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Conv;
  n.inputs = {std::move(in)};
  n.filters = filters;
  n.kh = n.kw = k;
  n.stride = stride;
  n.pad = pad;
  return n;
}

inline LayerNode dense_node(std::string id, std::string in, std::size_t units) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::Dense;
  n.inputs = {std::move(in)};
  n.filters = units;
  return n;
}

inline LayerNode pool_node(std::string id, std::string in, std::size_t k, std::size_t stride) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = LayerKind::MaxPool;
  n.inputs = {std::move(in)};
  n.pool = k;
  n.stride = stride;
  return n;
}

inline LayerNode simple_node(std::string id, LayerKind kind, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = std::move(id);
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

inline LayerNode dropout_node(std::string id, std::string in, double rate) {
  LayerNode n = simple_node(std::move(id), LayerKind::Dropout, {std::move(in)});
  n.rate = rate;
  return n;
}

/// He-normal kernels, zero biases. Deterministic for a given seed.
inline void initialize_weights(NetGraph& g, std::uint64_t seed) {
  if (!g.validated()) g.validate();
  std::mt19937_64 rng(seed);
  for (auto& n : g.nodes) {
    if (!n.has_params()) continue;
    const std::size_t fan_in = n.kind == LayerKind::Conv ? n.channels * n.kh * n.kw : n.channels;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    n.weight = Tensor(n.weight_shape());
    for (double& v : n.weight.values()) v = dist(rng);
    n.bias = Tensor({n.filters});
    n.frozen.clear();
  }
}

/// Drops all weights, leaving a count-only graph.
inline void dematerialize(NetGraph& g) {
  for (auto& n : g.nodes) {
    n.weight = Tensor();
    n.bias = Tensor();
    n.frozen.clear();
  }
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_GRAPH_HPP
