#ifndef FISHERPRUNE_HARNESS_HPP
#define FISHERPRUNE_HARNESS_HPP

// Experiment plumbing: config files, accuracy-vs-size sweeps over the Fisher
// method and the two baselines, sweep CSV rows, summary tables, and CSV dumps
// of the LDA and utility intermediates.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fisherprune/accounting.hpp"
#include "fisherprune/architectures.hpp"
#include "fisherprune/dataset.hpp"
#include "fisherprune/model_io.hpp"
#include "fisherprune/prune.hpp"
#include "fisherprune/train.hpp"

namespace fisherprune {

// ---------------------------------------------------------------------------
// Datasets by name

/// "synthetic:<samples>:<seed>[:<noise>[:<side>]]", an IDX pair
/// "images,labels", or a dataset directory.
inline Dataset resolve_dataset(const std::string& spec) {
  const std::string tag = "synthetic:";
  if (spec.rfind(tag, 0) != 0) return load_dataset(spec);
  std::vector<std::string> parts;
  std::stringstream ss(spec.substr(tag.size()));
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  require(parts.size() >= 2 && parts.size() <= 4, ErrorKind::Usage,
          "synthetic dataset spec must be synthetic:<samples>:<seed>[:<noise>[:<side>]]");
  SynthOptions o;
  try {
    o.samples = std::stoul(parts[0]);
    o.seed = std::stoull(parts[1]);
    if (parts.size() > 2) o.noise = std::stod(parts[2]);
    if (parts.size() > 3) o.side = std::stoul(parts[3]);
  } catch (const std::exception&) {
    fail(ErrorKind::Usage, "bad number in dataset spec '" + spec + "'");
  }
  return make_synthetic_glyphs(o);
}

// ---------------------------------------------------------------------------
// JSON conversions

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"l2", c.l2},       {"dropout", c.dropout},
          {"batch_size", c.batch_size},       {"epochs", c.epochs}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  require(j.is_object(), ErrorKind::Schema, "training config must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "l2") c.l2 = value.get<double>();
      else if (key == "dropout") c.dropout = value.get<bool>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else fail(ErrorKind::Schema, "unknown training field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const PruneReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"id", l.id},
                      {"filters_before", l.filters_before},
                      {"filters_after", l.filters_after},
                      {"params_before", l.params_before},
                      {"params_after", l.params_after},
                      {"flops_before", l.flops_before},
                      {"flops_after", l.flops_after}});
  nlohmann::json j = {{"method", r.method},
                      {"eta", r.eta},
                      {"params_before", r.params_before},
                      {"params_after", r.params_after},
                      {"flops_before", r.flops_before},
                      {"flops_after", r.flops_after},
                      {"param_reduction", r.param_reduction()},
                      {"layers", layers},
                      {"warnings", r.warnings}};
  if (r.base_accuracy >= 0) j["base_accuracy"] = r.base_accuracy;
  if (r.accuracy_before_retrain >= 0) j["accuracy_before_retrain"] = r.accuracy_before_retrain;
  if (r.accuracy_after_retrain >= 0) j["accuracy_after_retrain"] = r.accuracy_after_retrain;
  return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  require(out.good(), ErrorKind::Data, "cannot write " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::Data, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Experiment config

enum class Method { Fisher, Magnitude, FilterNorm };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Fisher: return "fisher";
    case Method::Magnitude: return "magnitude";
    case Method::FilterNorm: return "filternorm";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "fisher") return Method::Fisher;
  if (s == "magnitude") return Method::Magnitude;
  if (s == "filternorm") return Method::FilterNorm;
  fail(ErrorKind::Usage, "unknown method '" + s + "' (expected fisher, magnitude, filternorm)");
}

struct ExperimentConfig {
  // A model file, or an architecture name trained from scratch per seed.
  std::string model = "desk-cnn";
  std::string train_data = "synthetic:6000:1";
  std::string val_data;
  std::string test_data = "synthetic:2000:2";
  std::size_t analysis_samples = 1000;  // leading training samples used for LDA and tracing
  TrainConfig base;
  TrainConfig retrain{0.02, 1e-4, true, 32, 2, 1};
  std::vector<double> etas;
  std::vector<Method> methods{Method::Fisher, Method::Magnitude, Method::FilterNorm};
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "sweep_out";
  bool parallel = false;
  bool save_models = true;

  void validate() const {
    require(!etas.empty(), ErrorKind::Usage, "experiment needs at least one eta");
    for (double e : etas) require(e >= 0.0 && std::isfinite(e), ErrorKind::Usage, "eta values must be >= 0");
    require(!methods.empty(), ErrorKind::Usage, "experiment needs at least one method");
    require(!seeds.empty(), ErrorKind::Usage, "experiment needs at least one seed");
    require(analysis_samples >= 4, ErrorKind::Usage, "analysis_samples must be at least 4");
    base.validate();
    retrain.validate();
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  std::vector<std::string> methods;
  for (Method m : c.methods) methods.push_back(method_name(m));
  return {{"format", "fisherprune-experiment"},
          {"version", 1},
          {"model", c.model},
          {"train_data", c.train_data},
          {"val_data", c.val_data},
          {"test_data", c.test_data},
          {"analysis_samples", c.analysis_samples},
          {"base_training", to_json(c.base)},
          {"retraining", to_json(c.retrain)},
          {"etas", c.etas},
          {"methods", methods},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir},
          {"parallel", c.parallel},
          {"save_models", c.save_models}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::Schema, "experiment config must be a JSON object");
  ExperimentConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "format") {
        require(value == "fisherprune-experiment", ErrorKind::Schema,
                "experiment config: unexpected format " + value.dump());
      } else if (key == "version") {
        require(value == 1, ErrorKind::Schema, "experiment config: unsupported version " + value.dump());
      } else if (key == "model") c.model = value.get<std::string>();
      else if (key == "train_data") c.train_data = value.get<std::string>();
      else if (key == "val_data") c.val_data = value.get<std::string>();
      else if (key == "test_data") c.test_data = value.get<std::string>();
      else if (key == "analysis_samples") c.analysis_samples = value.get<std::size_t>();
      else if (key == "base_training") c.base = train_config_from_json(value, c.base);
      else if (key == "retraining") c.retrain = train_config_from_json(value, c.retrain);
      else if (key == "etas") c.etas = value.get<std::vector<double>>();
      else if (key == "methods") {
        c.methods.clear();
        for (const auto& m : value) c.methods.push_back(parse_method(m.get<std::string>()));
      } else if (key == "seeds") c.seeds = value.get<std::vector<std::uint64_t>>();
      else if (key == "output_dir") c.output_dir = value.get<std::string>();
      else if (key == "parallel") c.parallel = value.get<bool>();
      else if (key == "save_models") c.save_models = value.get<bool>();
      else fail(ErrorKind::Schema, "experiment config: unknown field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, p.string() + ": not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

// ---------------------------------------------------------------------------
// Sweep rows

struct SweepRow {
  std::string method;      // base, fisher, magnitude, filternorm
  double eta = 0.0;        // Fisher eta the row belongs to (baselines: the matched eta)
  double rate = 0.0;       // achieved parameter reduction
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  double acc_pre = -1.0;   // before retraining
  double acc_post = -1.0;  // after retraining
  std::uint64_t seed = 0;
  double wall_ms = 0.0;
  std::string status = "ok";

  bool same_result(const SweepRow& o) const {
    return method == o.method && eta == o.eta && rate == o.rate && params == o.params &&
           flops == o.flops && acc_pre == o.acc_pre && acc_post == o.acc_post && seed == o.seed &&
           status == o.status;
  }
};

inline const char* kSweepHeader = "method,eta,rate,params,flops,acc_pre,acc_post,seed,wall_ms,status";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace detail

inline std::string to_csv_line(const SweepRow& r) {
  using detail::fmt_double;
  return r.method + ',' + fmt_double(r.eta) + ',' + fmt_double(r.rate) + ',' + std::to_string(r.params) +
         ',' + std::to_string(r.flops) + ',' + fmt_double(r.acc_pre) + ',' + fmt_double(r.acc_post) +
         ',' + std::to_string(r.seed) + ',' + fmt_double(r.wall_ms) + ',' + detail::csv_safe(r.status);
}

inline SweepRow parse_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  require(f.size() == 10, ErrorKind::Data, "sweep CSV: expected 10 fields in '" + line + "'");
  SweepRow r;
  try {
    r.method = f[0];
    r.eta = std::stod(f[1]);
    r.rate = std::stod(f[2]);
    r.params = std::stoull(f[3]);
    r.flops = std::stoull(f[4]);
    r.acc_pre = std::stod(f[5]);
    r.acc_post = std::stod(f[6]);
    r.seed = std::stoull(f[7]);
    r.wall_ms = std::stod(f[8]);
    r.status = f[9];
  } catch (const std::exception&) {
    fail(ErrorKind::Data, "sweep CSV: malformed row '" + line + "'");
  }
  return r;
}

inline std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& p) {
  std::stringstream ss(read_text(p));
  std::string line;
  require(static_cast<bool>(std::getline(ss, line)), ErrorKind::Data, p.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == kSweepHeader, ErrorKind::Data, p.string() + ": unexpected header '" + line + "'");
  std::vector<SweepRow> rows;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(parse_csv_line(line));
  }
  return rows;
}

/// Appends one row; the header is written when the file is new. Each row
/// goes out in a single write so a crash never leaves half a line.
inline void append_sweep_row(const std::filesystem::path& p, const SweepRow& r) {
  const bool fresh = !std::filesystem::exists(p) || std::filesystem::file_size(p) == 0;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::app | std::ios::binary);
  std::string text = (fresh ? std::string(kSweepHeader) + '\n' : std::string()) + to_csv_line(r) + '\n';
  out << text << std::flush;
  require(out.good(), ErrorKind::Data, "cannot append to " + p.string());
}

/// Fixed-width summary of a sweep, grouped by seed and method. Wall time is
/// left out so the table is reproducible.
inline std::string summary_table(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::fixed;
  std::map<std::uint64_t, double> base_acc;
  std::map<std::uint64_t, std::uint64_t> base_params;
  for (const auto& r : rows)
    if (r.method == "base") {
      base_acc[r.seed] = r.acc_post;
      base_params[r.seed] = r.params;
    }
  out << "seed  method      eta    reduction  params      flops         acc_pre  acc_post  delta    status\n";
  const std::vector<std::string> order = {"base", "fisher", "magnitude", "filternorm"};
  std::map<std::uint64_t, bool> seeds;
  for (const auto& r : rows) seeds[r.seed] = true;
  auto pct = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
  };
  for (const auto& [seed, unused] : seeds) {
    for (const auto& m : order) {
      for (const auto& r : rows) {
        if (r.seed != seed || r.method != m) continue;
        std::string delta = "-";
        if (base_acc.count(seed) && r.acc_post >= 0 && r.method != "base") {
          std::ostringstream s;
          s << std::showpos << std::fixed << std::setprecision(2) << 100.0 * (r.acc_post - base_acc[seed]);
          delta = s.str();
        }
        out << std::left << std::setw(6) << seed << std::setw(12) << r.method << std::setw(7)
            << std::setprecision(3) << r.eta << std::setw(11) << (pct(r.rate) + "%") << std::setw(12)
            << r.params << std::setw(14) << r.flops << std::setw(9)
            << (r.acc_pre >= 0 ? pct(r.acc_pre) : std::string("-")) << std::setw(10)
            << (r.acc_post >= 0 ? pct(r.acc_post) : std::string("-")) << std::setw(9) << delta
            << r.status << '\n';
      }
    }
  }
  // Best Fisher point per seed within two accuracy points of the base.
  for (const auto& [seed, acc] : base_acc) {
    const SweepRow* best = nullptr;
    for (const auto& r : rows)
      if (r.seed == seed && r.method == "fisher" && r.status == "ok" && r.acc_post >= acc - 0.02 &&
          (!best || r.rate > best->rate))
        best = &r;
    out << "seed " << seed << ": base accuracy " << pct(acc) << "%, ";
    if (best)
      out << "best fisher reduction within 2 points: " << pct(best->rate) << "% at eta "
          << std::setprecision(3) << best->eta << '\n';
    else
      out << "no fisher point within 2 points\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Dumps

/// Firing matrix (label + one column per surviving neuron) and per-neuron
/// scatter diagonals, Fisher ratio and selection flag.
inline void dump_lda(const FisherAnalysis& a, const std::vector<std::size_t>& selected,
                     const std::filesystem::path& dir) {
  std::ostringstream x;
  x << "label";
  for (std::size_t c = 0; c < a.firing.cols; ++c) x << ",n" << a.firing.column_to_neuron[c];
  x << '\n';
  for (std::size_t r = 0; r < a.firing.rows; ++r) {
    x << a.firing.labels[r];
    for (std::size_t c = 0; c < a.firing.cols; ++c) x << ',' << detail::fmt_double(a.firing.at(r, c));
    x << '\n';
  }
  write_text(dir / "lda_firing.csv", x.str());

  std::ostringstream s;
  s << "neuron,within,between,fisher_ratio,separable,selected\n";
  for (std::size_t c = 0; c < a.scores.size(); ++c) {
    const std::size_t n = a.scores.column_to_neuron[c];
    const bool sel = std::binary_search(selected.begin(), selected.end(), n);
    s << n << ',' << detail::fmt_double(a.scores.within[c]) << ','
      << detail::fmt_double(a.scores.between[c]) << ',' << detail::fmt_double(a.scores.v[c]) << ','
      << (a.scores.separable[c] ? 1 : 0) << ',' << (sel ? 1 : 0) << '\n';
  }
  write_text(dir / "lda_scores.csv", s.str());
}

struct FieldStats {
  std::size_t n = 0;
  double mean = 0, stddev = 0, skew = 0, kurtosis = 0;  // excess kurtosis
};

inline FieldStats field_stats(const std::vector<double>& x) {
  FieldStats s;
  s.n = x.size();
  if (x.empty()) return s;
  for (double v : x) s.mean += v;
  s.mean /= static_cast<double>(x.size());
  double m2 = 0, m3 = 0, m4 = 0;
  for (double v : x) {
    const double d = v - s.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  const double n = static_cast<double>(x.size());
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.stddev = sample_stddev(x);
  if (m2 > 0) {
    s.skew = m3 / std::pow(m2, 1.5);
    s.kurtosis = m4 / (m2 * m2) - 3.0;
  }
  return s;
}

/// Per-channel utility scores with the layer threshold and decision, plus
/// per-layer distribution statistics of the utility field.
inline void dump_utility(const NetGraph& g, const UtilityMap& um, const PruneMask& mask, double eta,
                         const std::filesystem::path& dir) {
  std::ostringstream ch, st;
  ch << "layer,channel,score,threshold,kept\n";
  st << "layer,values,mean,stddev,skew,excess_kurtosis,threshold\n";
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (!um.traced(i)) continue;
    const LayerNode& n = g.nodes[i];
    const FieldStats fs = field_stats(um.fields[i].storage());
    const double t = fs.n >= 2 ? eta * fs.stddev : 0.0;
    st << n.id << ',' << fs.n << ',' << detail::fmt_double(fs.mean) << ','
       << detail::fmt_double(fs.stddev) << ',' << detail::fmt_double(fs.skew) << ','
       << detail::fmt_double(fs.kurtosis) << ',' << detail::fmt_double(t) << '\n';
    if (!n.has_params()) continue;
    const auto it = mask.layers.find(n.id);
    for (std::size_t c = 0; c < um.channel_scores[i].size(); ++c) {
      const bool kept = it == mask.layers.end() ||
                        std::binary_search(it->second.kept_filters.begin(), it->second.kept_filters.end(), c);
      ch << n.id << ',' << c << ',' << detail::fmt_double(um.channel_scores[i][c]) << ','
         << detail::fmt_double(t) << ',' << (kept ? 1 : 0) << '\n';
    }
  }
  write_text(dir / "utility_channels.csv", ch.str());
  write_text(dir / "utility_stats.csv", st.str());
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepResult {
  std::vector<SweepRow> rows;
  std::filesystem::path csv;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline NetGraph base_model(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train_set,
                           const Dataset* val) {
  if (std::filesystem::exists(cfg.model)) return load_model_file(cfg.model);
  NetGraph g = architecture_by_name(cfg.model, train_set.shape.h, train_set.classes);
  initialize_weights(g, seed);
  TrainConfig tc = cfg.base;
  tc.seed = seed;
  train(g, train_set, tc, val);
  return g;
}

}  // namespace detail

/// One cell: prune with `method` at the point matched to a Fisher result,
/// retrain, evaluate. Failures become the row status.
inline SweepRow run_cell(Method method, double eta, std::uint64_t seed, const NetGraph& base,
                         const FisherResult* fisher, const std::optional<std::string>& fisher_error,
                         const Dataset& train_set, const Dataset& test_set, const TrainConfig& retrain,
                         const std::filesystem::path& out_dir, bool save) {
  const auto t0 = std::chrono::steady_clock::now();
  SweepRow row;
  row.method = method_name(method);
  row.eta = eta;
  row.seed = seed;
  try {
    require(fisher != nullptr, ErrorKind::Usage,
            "fisher stage failed: " + fisher_error.value_or("unknown error"));
    NetGraph pruned;
    PruneReport report;
    switch (method) {
      case Method::Fisher:
        pruned = fisher->pruned;
        report = fisher->report;
        break;
      case Method::Magnitude:
        pruned = magnitude_prune(base, fisher->report.param_reduction());
        report = make_report(base, pruned, "magnitude", fisher->report.param_reduction());
        break;
      case Method::FilterNorm:
        pruned = filter_norm_prune(base, fisher->report.layer_rates());
        report = make_report(base, pruned, "filternorm", eta);
        break;
    }
    row.acc_pre = evaluate(pruned, test_set);
    TrainConfig tc = retrain;
    tc.seed = seed;
    if (tc.epochs > 0) train(pruned, train_set, tc);
    row.acc_post = evaluate(pruned, test_set);
    row.params = count_params(pruned);
    row.flops = count_flops(pruned);
    row.rate = report.param_reduction();
    report.accuracy_before_retrain = row.acc_pre;
    report.accuracy_after_retrain = row.acc_post;
    if (save) {
      std::ostringstream name;
      name << row.method << "_eta" << std::setprecision(6) << eta;
      const auto stem = out_dir / ("seed" + std::to_string(seed)) / name.str();
      save_model_file(pruned, stem.string() + ".json");
      write_text(stem.string() + ".report.json", to_json(report).dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    row.status = std::string("error: ") + e.what();
  }
  row.wall_ms = detail::elapsed_ms(t0);
  return row;
}

/// Runs every (method, eta, seed) cell. Baselines are matched to the Fisher
/// result of the same eta: magnitude pruning removes the same fraction of
/// parameters, filter-norm pruning the same fraction of filters per layer.
inline SweepResult run_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const Dataset train_set = resolve_dataset(cfg.train_data);
  const Dataset test_set = resolve_dataset(cfg.test_data);
  std::optional<Dataset> val;
  if (!cfg.val_data.empty()) val = resolve_dataset(cfg.val_data);
  const Dataset analysis_set = train_set.head(std::min(cfg.analysis_samples, train_set.size()));

  SweepResult res;
  res.csv = std::filesystem::path(cfg.output_dir) / "sweep.csv";
  std::filesystem::create_directories(cfg.output_dir);
  std::filesystem::remove(res.csv);
  write_text(std::filesystem::path(cfg.output_dir) / "experiment.json", to_json(cfg).dump(2) + "\n");
  auto emit = [&](const SweepRow& r) {
    append_sweep_row(res.csv, r);
    res.rows.push_back(r);
    if (log) *log << to_csv_line(r) << std::endl;
  };

  for (std::uint64_t seed : cfg.seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    NetGraph base = detail::base_model(cfg, seed, train_set, val ? &*val : nullptr);
    SweepRow b;
    b.method = "base";
    b.seed = seed;
    b.params = count_params(base);
    b.flops = count_flops(base);
    b.acc_pre = b.acc_post = evaluate(base, test_set);
    b.wall_ms = detail::elapsed_ms(t0);
    if (cfg.save_models)
      save_model_file(base, std::filesystem::path(cfg.output_dir) / ("seed" + std::to_string(seed)) / "base.json");
    emit(b);

    std::optional<FisherAnalysis> analysis;
    std::string analysis_error;
    try {
      analysis = analyze_last_hidden(base, analysis_set);
    } catch (const std::exception& e) {
      analysis_error = e.what();
    }

    // Fisher masks first (cheap, sequential); retraining cells may run in parallel.
    std::vector<std::optional<FisherResult>> fisher(cfg.etas.size());
    std::vector<std::optional<std::string>> fisher_err(cfg.etas.size());
    for (std::size_t e = 0; e < cfg.etas.size(); ++e) {
      try {
        require(analysis.has_value(), ErrorKind::Data, "LDA analysis failed: " + analysis_error);
        FisherOptions fo;
        fo.eta = cfg.etas[e];
        fisher[e] = fisher_prune(base, analysis_set, *analysis, fo);
        for (const auto& w : fisher[e]->report.warnings)
          std::cerr << "warning: eta " << cfg.etas[e] << ": " << w << '\n';
      } catch (const std::exception& ex) {
        fisher_err[e] = ex.what();
      }
    }

    struct Cell {
      Method method;
      std::size_t e;
    };
    std::vector<Cell> cells;
    for (Method m : cfg.methods)
      for (std::size_t e = 0; e < cfg.etas.size(); ++e) cells.push_back({m, e});
    auto run = [&](const Cell& c) {
      return run_cell(c.method, cfg.etas[c.e], seed, base, fisher[c.e] ? &*fisher[c.e] : nullptr,
                      fisher_err[c.e], train_set, test_set, cfg.retrain, cfg.output_dir, cfg.save_models);
    };
    if (cfg.parallel) {
      std::vector<std::future<SweepRow>> futures;
      for (const auto& c : cells) futures.push_back(std::async(std::launch::async, run, c));
      for (auto& f : futures) emit(f.get());
    } else {
      for (const auto& c : cells) emit(run(c));
    }
  }
  return res;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_HARNESS_HPP
