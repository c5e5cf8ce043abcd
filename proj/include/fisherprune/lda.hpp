#ifndef FISHERPRUNE_LDA_HPP
#define FISHERPRUNE_LDA_HPP

// Fisher LDA utility of the last hidden layer.
//
// The firing matrix X holds one row per sample and one column per neuron of
// the last hidden layer (spatial max for convolutional neurons). Scatter
// matrices use raw sums of squares:
//   Sw = sum_i Xi~^T Xi~   (per-class centering)
//   Sa = X~^T X~           (global centering)
//   Sb = Sa - Sw
// and each neuron's utility is the diagonal Fisher ratio
//   v_j = Sb[j,j] / (Sw[j,j] + eps).
// The full generalized eigenproblem Sb e = v (Sw + eps I) e is solved only
// by `generalized_eig_oracle`, for validation and reporting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "fisherprune/dataset.hpp"
#include "fisherprune/forward.hpp"

namespace fisherprune {

inline constexpr double kFisherEpsilon = 1e-9;
inline constexpr double kZeroVariance = 1e-12;
inline constexpr double kDuplicateQuantum = 1e-9;

struct FiringMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> X;                     // rows x cols, row-major
  std::vector<std::size_t> column_to_neuron; // surviving column -> neuron index
  std::vector<int> labels;
  std::size_t neurons = 0;                   // neuron count before cleaning
  std::size_t classes = 0;

  double at(std::size_t r, std::size_t c) const { return X[r * cols + c]; }
};

/// Drops zero-variance and duplicate columns (keeping the first of each
/// duplicate group) from a raw rows x neurons firing table.
inline FiringMatrix clean_firing_matrix(const std::vector<double>& raw, std::size_t rows,
                                        std::size_t neurons, std::vector<int> labels,
                                        std::size_t classes) {
  require(raw.size() == rows * neurons, ErrorKind::Shape, "firing table size mismatch");
  require(labels.size() == rows, ErrorKind::Shape, "firing table label count mismatch");
  require(rows >= 2, ErrorKind::Data, "firing matrix needs at least two samples");
  std::vector<std::size_t> keep;
  std::map<std::vector<std::int64_t>, std::size_t> seen;
  for (std::size_t j = 0; j < neurons; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += raw[r * neurons + j];
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double d = raw[r * neurons + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(rows - 1);
    if (var < kZeroVariance) continue;
    std::vector<std::int64_t> key(rows);
    for (std::size_t r = 0; r < rows; ++r)
      key[r] = std::llround(raw[r * neurons + j] / kDuplicateQuantum);
    if (!seen.emplace(std::move(key), j).second) continue;
    keep.push_back(j);
  }
  require(!keep.empty(), ErrorKind::Numerical,
          "every last-hidden neuron is constant or duplicated; the net is dead");
  FiringMatrix fm;
  fm.rows = rows;
  fm.cols = keep.size();
  fm.neurons = neurons;
  fm.classes = classes;
  fm.labels = std::move(labels);
  fm.column_to_neuron = keep;
  fm.X.resize(rows * keep.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < keep.size(); ++c) fm.X[r * keep.size() + c] = raw[r * neurons + keep[c]];
  return fm;
}

/// Per-sample, per-channel spatial max of a N x C x H x W activation tensor.
inline std::vector<double> spatial_max(const Tensor& act) {
  const std::size_t N = act.dim(0), C = act.dim(1), S = act.dim(2) * act.dim(3);
  std::vector<double> out(N * C);
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = act.data() + (s * C + c) * S;
      out[s * C + c] = *std::max_element(p, p + S);
    }
  return out;
}

/// Firing matrix of the net's last hidden layer over `data`.
inline FiringMatrix build_firing_matrix(const NetGraph& g, const Dataset& data,
                                        std::size_t chunk = 256) {
  data.validate();
  const std::size_t lh = g.last_hidden_index();
  const std::size_t M = g.out_shape(lh).c;
  std::vector<double> raw;
  raw.reserve(data.size() * M);
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const std::size_t n = std::min(chunk, data.size() - b);
    const ForwardResult fr = forward(g, data.batch(b, n));
    const auto m = spatial_max(fr.cache.outputs[lh]);
    raw.insert(raw.end(), m.begin(), m.end());
  }
  return clean_firing_matrix(raw, data.size(), M, data.labels, data.classes);
}

struct ScatterPair {
  std::size_t m = 0;
  std::vector<double> within;   // m x m
  std::vector<double> between;  // m x m
  std::vector<double> all;      // m x m
};

namespace detail {

// Accumulates Y^T Y for the centered rows `idx` of X into out (m x m).
inline void centered_gram(const FiringMatrix& fm, const std::vector<std::size_t>& idx,
                          std::vector<double>& out) {
  const std::size_t m = fm.cols;
  std::vector<double> mean(m, 0.0);
  for (std::size_t r : idx)
    for (std::size_t j = 0; j < m; ++j) mean[j] += fm.at(r, j);
  for (double& v : mean) v /= static_cast<double>(idx.size());
  std::vector<double> y(m);
  for (std::size_t r : idx) {
    for (std::size_t j = 0; j < m; ++j) y[j] = fm.at(r, j) - mean[j];
    for (std::size_t a = 0; a < m; ++a) {
      const double ya = y[a];
      double* row = out.data() + a * m;
      for (std::size_t b = 0; b < m; ++b) row[b] += ya * y[b];
    }
  }
}

}  // namespace detail

inline ScatterPair scatter(const FiringMatrix& fm) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t r = 0; r < fm.rows; ++r) by_class[fm.labels[r]].push_back(r);
  require(by_class.size() >= 2, ErrorKind::Data, "scatter needs at least two classes");
  for (const auto& [cls, rows] : by_class)
    require(rows.size() >= 2, ErrorKind::Data,
            "scatter: class " + std::to_string(cls) + " has fewer than two samples");
  ScatterPair s;
  s.m = fm.cols;
  s.within.assign(s.m * s.m, 0.0);
  s.all.assign(s.m * s.m, 0.0);
  for (const auto& [cls, rows] : by_class) detail::centered_gram(fm, rows, s.within);
  std::vector<std::size_t> every(fm.rows);
  std::iota(every.begin(), every.end(), std::size_t{0});
  detail::centered_gram(fm, every, s.all);
  s.between.resize(s.m * s.m);
  for (std::size_t k = 0; k < s.between.size(); ++k) s.between[k] = s.all[k] - s.within[k];
  return s;
}

struct LDAScores {
  std::vector<double> within;              // sigma^2_w(j)
  std::vector<double> between;             // sigma^2_b(j)
  std::vector<double> v;                   // Fisher ratio
  std::vector<bool> separable;             // zero within-class spread, nonzero between
  std::vector<std::size_t> column_to_neuron;

  std::size_t size() const { return v.size(); }

  /// Column indices, most useful first: separable columns (by between-class
  /// spread), then by v descending; ties go to the lower column.
  std::vector<std::size_t> ranking() const {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (separable[a] != separable[b]) return static_cast<bool>(separable[a]);
      if (separable[a]) return between[a] > between[b];
      return v[a] > v[b];
    });
    return idx;
  }
};

inline LDAScores lda_scores(const ScatterPair& s, std::vector<std::size_t> column_to_neuron = {},
                            double eps = kFisherEpsilon) {
  LDAScores out;
  const std::size_t m = s.m;
  if (column_to_neuron.empty()) {
    column_to_neuron.resize(m);
    std::iota(column_to_neuron.begin(), column_to_neuron.end(), std::size_t{0});
  }
  require(column_to_neuron.size() == m, ErrorKind::Shape, "lda_scores: column map size mismatch");
  out.column_to_neuron = std::move(column_to_neuron);
  out.within.resize(m);
  out.between.resize(m);
  out.v.resize(m);
  out.separable.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double sw = s.within[j * m + j];
    // Sa - Sw can dip a rounding error below zero on the diagonal.
    const double sb = std::max(0.0, s.between[j * m + j]);
    out.within[j] = sw;
    out.between[j] = sb;
    out.v[j] = sb / (sw + eps);
    out.separable[j] = sw < eps && sb > eps;
  }
  return out;
}

/// ||offdiag(Sw)||_1 / ||diag(Sw)||_1: how far the within-class scatter is
/// from the diagonal the Fisher shortcut assumes.
inline double off_diagonal_mass(const std::vector<double>& sym, std::size_t m) {
  double off = 0.0, on = 0.0;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) (a == b ? on : off) += std::abs(sym[a * m + b]);
  return on > 0.0 ? off / on : 0.0;
}

struct EigenPairs {
  std::vector<double> values;                // descending
  std::vector<std::vector<double>> vectors;  // vectors[k] pairs with values[k]
};

/// All generalized eigenpairs of the pencil (Sb, Sw + eps I), descending.
inline EigenPairs generalized_eig_oracle(const std::vector<double>& between,
                                         const std::vector<double>& within, std::size_t m,
                                         double eps = kFisherEpsilon) {
  require(between.size() == m * m && within.size() == m * m, ErrorKind::Shape,
          "eig oracle: matrices must be m x m");
  Eigen::MatrixXd A(m, m), B(m, m);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      A(a, b) = 0.5 * (between[a * m + b] + between[b * m + a]);
      B(a, b) = 0.5 * (within[a * m + b] + within[b * m + a]) + (a == b ? eps : 0.0);
    }
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(A, B);
  require(es.info() == Eigen::Success, ErrorKind::Numerical,
          "generalized eigensolver failed (Sw + eps I not positive definite?)");
  EigenPairs out;
  for (std::size_t k = m; k-- > 0;) {
    out.values.push_back(es.eigenvalues()(static_cast<Eigen::Index>(k)));
    Eigen::VectorXd e = es.eigenvectors().col(static_cast<Eigen::Index>(k));
    e.normalize();
    out.vectors.emplace_back(e.data(), e.data() + m);
  }
  return out;
}

inline EigenPairs generalized_eig_oracle(const ScatterPair& s, double eps = kFisherEpsilon) {
  return generalized_eig_oracle(s.between, s.within, s.m, eps);
}

/// How neurons survive in the last hidden layer.
struct SelectionPolicy {
  enum class Kind { TopK, Threshold, EtaStddev };
  Kind kind = Kind::EtaStddev;
  std::size_t k = 0;       // TopK
  double threshold = 0.0;  // Threshold: keep v >= threshold
  double eta = 0.0;        // EtaStddev: keep v >= eta * stddev(v of non-separable columns)

  static SelectionPolicy top_k(std::size_t k) { return {Kind::TopK, k, 0.0, 0.0}; }
  static SelectionPolicy at_least(double t) { return {Kind::Threshold, 0, t, 0.0}; }
  static SelectionPolicy eta_stddev(double eta) { return {Kind::EtaStddev, 0, 0.0, eta}; }
};

/// Sample standard deviation (1/(n-1)); zero for fewer than two values.
inline double sample_stddev(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// Surviving neuron indices (original last-hidden numbering), ascending.
inline std::vector<std::size_t> select_neurons(const LDAScores& s, const SelectionPolicy& p) {
  std::vector<std::size_t> cols;
  const auto rank = s.ranking();
  switch (p.kind) {
    case SelectionPolicy::Kind::TopK:
      cols.assign(rank.begin(), rank.begin() + static_cast<long>(std::min(p.k, rank.size())));
      break;
    case SelectionPolicy::Kind::Threshold:
    case SelectionPolicy::Kind::EtaStddev: {
      double t = p.threshold;
      if (p.kind == SelectionPolicy::Kind::EtaStddev) {
        std::vector<double> finite;
        for (std::size_t j = 0; j < s.size(); ++j)
          if (!s.separable[j]) finite.push_back(s.v[j]);
        t = p.eta * sample_stddev(finite);
      }
      for (std::size_t j : rank)
        if (s.separable[j] || s.v[j] >= t) cols.push_back(j);
      break;
    }
  }
  require(!cols.empty(), ErrorKind::Usage, "neuron selection is empty");
  std::vector<std::size_t> neurons;
  for (std::size_t c : cols) neurons.push_back(s.column_to_neuron.at(c));
  std::sort(neurons.begin(), neurons.end());
  return neurons;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_LDA_HPP
