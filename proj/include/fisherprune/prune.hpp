#ifndef FISHERPRUNE_PRUNE_HPP
#define FISHERPRUNE_PRUNE_HPP

// Structured pruning: per-layer utility thresholds, filter/channel masks,
// dead-dependency cascade, structural removal, and the two baselines
// (global weight magnitude, per-layer filter L1 norm).

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fisherprune/accounting.hpp"
#include "fisherprune/graph.hpp"
#include "fisherprune/lda.hpp"
#include "fisherprune/trace.hpp"

namespace fisherprune {

using IndexSet = std::vector<std::size_t>;  // sorted ascending

/// Survivors of one Conv/Dense layer. `kept_inputs` indexes the pruning units
/// (channels) of the layer's input layout; for a dense layer fed by flattened
/// maps each unit stands for one whole map.
struct LayerMask {
  IndexSet kept_filters;
  IndexSet kept_inputs;
  bool operator==(const LayerMask&) const = default;
};

struct PruneMask {
  std::map<std::string, LayerMask> layers;
  std::vector<std::string> warnings;

  bool operator==(const PruneMask& o) const { return layers == o.layers; }
};

inline IndexSet all_indices(std::size_t n) {
  IndexSet s(n);
  std::iota(s.begin(), s.end(), std::size_t{0});
  return s;
}

/// Kept output channels of every node implied by the kept filters of the
/// Conv/Dense layers. Missing entries mean "all filters kept"; the decision
/// layer always keeps every class.
inline std::vector<IndexSet> propagate_channels(const NetGraph& g,
                                                const std::map<std::string, IndexSet>& filters) {
  std::vector<IndexSet> kept(g.nodes.size());
  auto input_set = [&](std::size_t i, std::size_t k) {
    const std::size_t p = g.producers(i)[k];
    return p == NetGraph::kInput ? all_indices(g.input.c) : kept[p];
  };
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (n.has_params()) {
      auto it = filters.find(n.id);
      kept[i] = (i == g.decision_index() || it == filters.end()) ? all_indices(n.filters) : it->second;
    } else if (n.kind == LayerKind::Concat) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        for (std::size_t c : input_set(i, k)) kept[i].push_back(offset + c);
        offset += g.in_layout(i, k).channels;
      }
    } else {
      kept[i] = input_set(i, 0);
    }
  }
  return kept;
}

inline std::map<std::string, IndexSet> kept_filter_table(const PruneMask& m) {
  std::map<std::string, IndexSet> t;
  for (const auto& [id, lm] : m.layers) t[id] = lm.kept_filters;
  return t;
}

/// Fills a mask for every Conv/Dense layer from the given kept-filter sets
/// (absent layers keep everything), deriving kept inputs from producers.
inline PruneMask complete_mask(const NetGraph& g, const std::map<std::string, IndexSet>& filters,
                               std::vector<std::string> warnings = {}) {
  for (const auto& [id, set] : filters) {
    const LayerNode& n = g.node(id);
    require(n.has_params(), ErrorKind::Usage, "mask names parameter-free layer '" + id + "'");
    require(std::is_sorted(set.begin(), set.end()) &&
                std::adjacent_find(set.begin(), set.end()) == set.end() &&
                (set.empty() || set.back() < n.filters),
            ErrorKind::Usage, "mask for '" + id + "' is not a sorted subset of its filters");
  }
  const auto kept = propagate_channels(g, filters);
  PruneMask m;
  m.warnings = std::move(warnings);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (!n.has_params()) continue;
    const std::size_t p = g.producers(i).front();
    m.layers[n.id] = {kept[i], p == NetGraph::kInput ? all_indices(g.input.c) : kept[p]};
  }
  return m;
}

inline PruneMask identity_mask(const NetGraph& g) { return complete_mask(g, {}); }

/// Structural soundness: no layer with surviving filters reads from an emptied
/// producer, and the decision layer still has inputs.
inline bool mask_connected(const NetGraph& g, const std::vector<IndexSet>& kept) {
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (kept[i].empty() || g.nodes[i].kind == LayerKind::Concat) continue;
    const std::size_t p = g.producers(i).front();
    if (p != NetGraph::kInput && kept[p].empty()) return false;
  }
  return !kept[g.softmax_index()].empty();
}

/// Layer threshold: eta times the sample standard deviation of every
/// activation-level utility value of the layer.
inline double layer_threshold(const Tensor& field, double eta) {
  require(field.size() >= 2, ErrorKind::Usage,
          "layer_threshold: need at least two activations, got " + std::to_string(field.size()));
  require(eta >= 0.0, ErrorKind::Usage, "layer_threshold: eta must be non-negative");
  return eta * sample_stddev(field.storage());
}

/// Maps channel `c` of node `i` back to the Conv/Dense filter that produced it.
inline std::pair<std::size_t, std::size_t> channel_source(const NetGraph& g, std::size_t i,
                                                          std::size_t c) {
  while (true) {
    const LayerNode& n = g.nodes.at(i);
    if (n.has_params()) return {i, c};
    std::size_t k = 0;
    if (n.kind == LayerKind::Concat) {
      while (c >= g.in_layout(i, k).channels) c -= g.in_layout(i, k++).channels;
    }
    const std::size_t p = g.producers(i)[k];
    require(p != NetGraph::kInput, ErrorKind::Usage,
            "channel_source: channel of '" + g.nodes.at(i).id + "' comes straight from the input");
    i = p;
  }
}

/// Channel keep rule: keep c iff score >= t and score > 0.
inline IndexSet threshold_channels(const std::vector<double>& scores, double t) {
  IndexSet kept;
  for (std::size_t c = 0; c < scores.size(); ++c)
    if (scores[c] >= t && scores[c] > 0.0) kept.push_back(c);
  return kept;
}

/// Mask from a utility map. Last-hidden producers keep exactly the selected
/// neurons; every other traced layer keeps channels whose utility reaches
/// eta * stddev of its field. A layer that would be emptied keeps its single
/// highest-utility channel and records a warning.
inline PruneMask build_mask(const NetGraph& g, const UtilityMap& um, double eta) {
  std::map<std::string, IndexSet> filters;
  std::vector<std::string> warnings;
  const std::size_t lh = g.last_hidden_index();
  std::map<std::size_t, IndexSet> from_selection;
  for (std::size_t j : um.selected) {
    auto [node, f] = channel_source(g, lh, j);
    from_selection[node].push_back(f);
  }
  // Producers of the last hidden layer that lost every neuron.
  for (std::size_t c = 0; c < g.out_shape(lh).c; ++c) from_selection.try_emplace(channel_source(g, lh, c).first);

  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (!n.has_params() || i == g.decision_index()) continue;
    IndexSet kept;
    std::vector<double> scores;
    if (auto it = from_selection.find(i); it != from_selection.end()) {
      kept = it->second;
      std::sort(kept.begin(), kept.end());
      if (um.traced(i)) scores = um.channel_scores[i];
    } else if (um.traced(i)) {
      scores = um.channel_scores[i];
      kept = threshold_channels(scores, layer_threshold(um.fields[i], eta));
    } else {
      continue;
    }
    if (kept.empty()) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < scores.size(); ++c)
        if (scores[c] > scores[best]) best = c;
      kept = {best};
      warnings.push_back("layer '" + n.id + "' would lose every filter; keeping filter " +
                         std::to_string(best));
    }
    filters[n.id] = kept;
  }
  return complete_mask(g, filters, std::move(warnings));
}

namespace detail {

// True if some surviving filter of a Conv/Dense consumer reachable from
// channel c of node i has a nonzero weight on it.
inline bool channel_used(const NetGraph& g, const std::vector<IndexSet>& kept, std::size_t i,
                         std::size_t c) {
  for (std::size_t q : g.consumers(i)) {
    const LayerNode& n = g.nodes[q];
    if (n.kind == LayerKind::Concat) {
      // A node can feed the same Concat more than once; every occurrence counts.
      const auto& ps = g.producers(q);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < ps.size(); offset += g.in_layout(q, k).channels, ++k)
        if (ps[k] == i && channel_used(g, kept, q, offset + c)) return true;
      continue;
    }
    if (!n.has_params()) {
      if (channel_used(g, kept, q, c)) return true;
      continue;
    }
    if (!n.materialized()) {
      if (!kept[q].empty()) return true;
      continue;
    }
    if (n.kind == LayerKind::Conv) {
      const std::size_t area = n.kh * n.kw;
      for (std::size_t f : kept[q]) {
        const double* w = n.weight.data() + (f * n.channels + c) * area;
        for (std::size_t a = 0; a < area; ++a)
          if (w[a] != 0.0) return true;
      }
    } else {
      const std::size_t group = g.in_layout(q).group;
      for (std::size_t f : kept[q]) {
        const double* w = n.weight.data() + f * n.channels + c * group;
        for (std::size_t a = 0; a < group; ++a)
          if (w[a] != 0.0) return true;
      }
    }
  }
  return false;
}

}  // namespace detail

/// Removes filters none of whose downstream dependencies survive (no kept
/// consumer filter has a nonzero weight on them), until a fixpoint. A layer
/// may vanish entirely only when that leaves the graph connected, i.e. a
/// whole inception branch; otherwise it keeps its lowest-index filter.
inline PruneMask cascade_dead(const PruneMask& mask, const NetGraph& g) {
  auto filters = kept_filter_table(mask);
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (g.nodes[i].has_params() && i != g.decision_index() && !filters.count(g.nodes[i].id))
      filters[g.nodes[i].id] = all_indices(g.nodes[i].filters);
  std::vector<std::string> warnings = mask.warnings;
  std::set<std::string> guarded;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = g.nodes.size(); i-- > 0;) {
      const LayerNode& n = g.nodes[i];
      if (!n.has_params() || i == g.decision_index()) continue;
      auto kept = propagate_channels(g, filters);
      IndexSet& current = filters[n.id];
      IndexSet alive;
      for (std::size_t f : current)
        if (detail::channel_used(g, kept, i, f)) alive.push_back(f);
      if (alive.size() == current.size()) continue;
      if (alive.empty()) {
        IndexSet saved = current;
        current.clear();
        if (!mask_connected(g, propagate_channels(g, filters))) {
          current = {saved.front()};
          if (guarded.insert(n.id).second)
            warnings.push_back("layer '" + n.id +
                               "' has no surviving dependencies; keeping filter " +
                               std::to_string(saved.front()));
          if (saved.size() == 1) continue;
        }
      } else {
        current = alive;
      }
      changed = true;
    }
  }
  return complete_mask(g, filters, std::move(warnings));
}

/// Structurally removes pruned filters and the matching input channels of
/// their consumers. Layers left with no filters, and the parameter-free nodes
/// that only carried them, are dropped; Concat loses those inputs.
inline NetGraph apply_mask(const NetGraph& g, const PruneMask& mask) {
  require(g.validated(), ErrorKind::Usage, "apply_mask: graph not validated");
  const auto kept = propagate_channels(g, kept_filter_table(mask));
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerNode& n = g.nodes[i];
    if (!n.has_params()) continue;
    auto it = mask.layers.find(n.id);
    if (it == mask.layers.end()) continue;
    const std::size_t p = g.producers(i).front();
    const IndexSet expect = p == NetGraph::kInput ? all_indices(g.input.c) : kept[p];
    require(it->second.kept_inputs == expect, ErrorKind::Usage,
            "inconsistent mask: kept inputs of '" + n.id +
                "' differ from the surviving channels of its producer");
    if (i == g.decision_index())
      require(it->second.kept_filters == all_indices(n.filters), ErrorKind::Usage,
              "inconsistent mask: the decision layer must keep every class");
  }
  require(mask_connected(g, kept), ErrorKind::Usage, "inconsistent mask: pruned graph is disconnected");

  NetGraph out;
  out.input = g.input;
  out.classes = g.classes;
  out.last_hidden = g.last_hidden;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (kept[i].empty()) continue;
    LayerNode n = g.nodes[i];
    if (n.kind == LayerKind::Concat) {
      std::vector<std::string> inputs;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t p = g.producers(i)[k];
        if (p == NetGraph::kInput || !kept[p].empty()) inputs.push_back(n.inputs[k]);
      }
      n.inputs = std::move(inputs);
    }
    if (n.has_params()) {
      const std::size_t p = g.producers(i).front();
      const IndexSet& rows = kept[i];
      const IndexSet in = p == NetGraph::kInput ? all_indices(g.input.c) : kept[p];
      const LayerNode& src = g.nodes[i];
      const std::size_t group = n.kind == LayerKind::Conv ? src.kh * src.kw : g.in_layout(i).group;
      n.filters = rows.size();
      n.channels = n.kind == LayerKind::Conv ? in.size() : in.size() * group;
      if (src.materialized()) {
        Tensor w(n.weight_shape()), b({rows.size()});
        std::vector<std::uint8_t> frozen;
        std::size_t o = 0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const std::size_t f = rows[r];
          b[r] = src.bias[f];
          for (std::size_t c : in)
            for (std::size_t a = 0; a < group; ++a, ++o) {
              const std::size_t from = f * src.channels * (n.kind == LayerKind::Conv ? group : 1) +
                                       c * group + a;
              w[o] = src.weight[from];
              if (!src.frozen.empty()) frozen.push_back(src.frozen[from]);
            }
        }
        n.weight = std::move(w);
        n.bias = std::move(b);
        n.frozen = std::move(frozen);
      }
    }
    out.nodes.push_back(std::move(n));
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

/// Zeroes the globally smallest-|w| fraction `rate` of all Conv/Dense weights
/// (biases untouched) and freezes them so retraining keeps them at zero.
/// Ties go to the earlier weight in graph order.
inline NetGraph magnitude_prune(const NetGraph& g, double rate) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::Usage, "magnitude rate must lie in [0,1)");
  require(g.materialized(), ErrorKind::Usage, "magnitude_prune: graph has no weights");
  NetGraph out = g;
  struct Ref {
    double mag;
    std::size_t node, k;
  };
  std::vector<Ref> all;
  for (std::size_t i = 0; i < out.nodes.size(); ++i)
    if (out.nodes[i].has_params())
      for (std::size_t k = 0; k < out.nodes[i].weight.size(); ++k)
        all.push_back({std::abs(out.nodes[i].weight[k]), i, k});
  const auto drop = static_cast<std::size_t>(std::floor(rate * static_cast<double>(all.size())));
  std::stable_sort(all.begin(), all.end(), [](const Ref& a, const Ref& b) { return a.mag < b.mag; });
  for (auto& n : out.nodes)
    if (n.has_params() && n.frozen.empty()) n.frozen.assign(n.weight.size(), 0);
  for (std::size_t r = 0; r < drop; ++r) {
    LayerNode& n = out.nodes[all[r].node];
    n.weight[all[r].k] = 0.0;
    n.frozen[all[r].k] = 1;
  }
  return out;
}

/// Per-layer filter removal by smallest L1 kernel norm (lowest index first on
/// ties). `rates` maps layer id to the fraction of its filters to drop;
/// absent layers are untouched. At least one filter always survives.
inline PruneMask filter_norm_mask(const NetGraph& g, const std::map<std::string, double>& rates) {
  require(g.materialized(), ErrorKind::Usage, "filter_norm_prune: graph has no weights");
  std::map<std::string, IndexSet> filters;
  for (const auto& [id, rate] : rates) {
    const std::size_t i = g.index_of(id);
    const LayerNode& n = g.nodes[i];
    require(n.has_params(), ErrorKind::Usage, "filter-norm rate given for parameter-free '" + id + "'");
    require(rate >= 0.0 && rate < 1.0, ErrorKind::Usage, "filter-norm rate must lie in [0,1)");
    if (i == g.decision_index()) continue;
    const std::size_t per = n.weight.size() / n.filters;
    std::vector<std::pair<double, std::size_t>> norms;
    for (std::size_t f = 0; f < n.filters; ++f) {
      double s = 0.0;
      for (std::size_t k = 0; k < per; ++k) s += std::abs(n.weight[f * per + k]);
      norms.push_back({s, f});
    }
    std::stable_sort(norms.begin(), norms.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t drop = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n.filters)));
    drop = std::min(drop, n.filters - 1);
    IndexSet kept;
    for (std::size_t r = drop; r < norms.size(); ++r) kept.push_back(norms[r].second);
    std::sort(kept.begin(), kept.end());
    filters[id] = kept;
  }
  return complete_mask(g, filters);
}

inline NetGraph filter_norm_prune(const NetGraph& g, const std::map<std::string, double>& rates) {
  return apply_mask(g, filter_norm_mask(g, rates));
}

// ---------------------------------------------------------------------------
// Reports

struct LayerReport {
  std::string id;
  std::size_t filters_before = 0, filters_after = 0;
  std::uint64_t params_before = 0, params_after = 0;
  std::uint64_t flops_before = 0, flops_after = 0;
};

struct PruneReport {
  std::string method;
  double eta = 0.0;   // fisher threshold scale, or the baseline rate
  std::vector<LayerReport> layers;
  std::uint64_t params_before = 0, params_after = 0;
  std::uint64_t flops_before = 0, flops_after = 0;
  double accuracy_before_retrain = -1.0;
  double accuracy_after_retrain = -1.0;
  double base_accuracy = -1.0;
  std::vector<std::string> warnings;

  double param_reduction() const {
    return params_before ? 1.0 - static_cast<double>(params_after) / static_cast<double>(params_before) : 0.0;
  }

  /// Fraction of filters removed per layer, for rate-matched baselines.
  std::map<std::string, double> layer_rates() const {
    std::map<std::string, double> r;
    for (const auto& l : layers)
      if (l.filters_before) r[l.id] = 1.0 - static_cast<double>(l.filters_after) / l.filters_before;
    return r;
  }
};

/// Before/after ledger. Layers removed entirely count as zero after.
inline PruneReport make_report(const NetGraph& before, const NetGraph& after, std::string method,
                               double eta) {
  PruneReport r;
  r.method = std::move(method);
  r.eta = eta;
  const auto cb = layer_counts(before);
  const auto ca = layer_counts(after);
  std::map<std::string, LayerCount> after_by_id;
  for (const auto& c : ca) after_by_id[c.id] = c;
  for (const auto& c : cb) {
    LayerReport l;
    l.id = c.id;
    l.filters_before = before.node(c.id).filters;
    l.params_before = c.params;
    l.flops_before = c.flops;
    if (auto it = after_by_id.find(c.id); it != after_by_id.end()) {
      l.filters_after = after.node(c.id).filters;
      l.params_after = it->second.params;
      l.flops_after = it->second.flops;
    }
    r.params_before += l.params_before;
    r.params_after += l.params_after;
    r.flops_before += l.flops_before;
    r.flops_after += l.flops_after;
    r.layers.push_back(l);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fisher pipeline

/// LDA of the last hidden layer; shared by every eta of a sweep.
struct FisherAnalysis {
  FiringMatrix firing;
  ScatterPair scatter;
  LDAScores scores;
};

inline FisherAnalysis analyze_last_hidden(const NetGraph& g, const Dataset& data) {
  FisherAnalysis a;
  a.firing = build_firing_matrix(g, data);
  a.scatter = scatter(a.firing);
  a.scores = lda_scores(a.scatter, a.firing.column_to_neuron);
  return a;
}

struct FisherOptions {
  double eta = 1.0;
  // Overrides the default eta-stddev rule for the last hidden layer.
  std::optional<SelectionPolicy> selection;
  TraceOptions trace;
};

struct FisherResult {
  std::vector<std::size_t> selected;
  UtilityMap utility;
  PruneMask mask;
  NetGraph pruned;
  PruneReport report;
};

inline FisherResult fisher_prune(const NetGraph& g, const Dataset& data,
                                 const FisherAnalysis& analysis, const FisherOptions& opt) {
  require(opt.eta >= 0.0, ErrorKind::Usage, "eta must be non-negative");
  FisherResult r;
  r.selected = select_neurons(analysis.scores,
                              opt.selection.value_or(SelectionPolicy::eta_stddev(opt.eta)));
  r.utility = trace_utility(g, data, r.selected, &analysis.scores, opt.trace);
  r.mask = cascade_dead(build_mask(g, r.utility, opt.eta), g);
  r.pruned = apply_mask(g, r.mask);
  r.report = make_report(g, r.pruned, "fisher", opt.eta);
  r.report.warnings = r.mask.warnings;
  return r;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_PRUNE_HPP
