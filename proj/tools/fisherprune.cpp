// Command-line front end: train, prune, eval, sweep, report, plus helpers to
// generate the synthetic dataset and export reference architectures.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fisherprune/accounting.hpp"
#include "fisherprune/architectures.hpp"
#include "fisherprune/dataset.hpp"
#include "fisherprune/harness.hpp"
#include "fisherprune/model_io.hpp"
#include "fisherprune/prune.hpp"
#include "fisherprune/train.hpp"

namespace fs = std::filesystem;
using namespace fisherprune;

namespace {

void add_train_options(CLI::App* cmd, TrainConfig& tc) {
  cmd->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", tc.learning_rate, "SGD learning rate")->capture_default_str();
  cmd->add_option("--l2", tc.l2, "Weight decay coefficient")->capture_default_str();
  cmd->add_option("--batch", tc.batch_size, "Mini-batch size")->capture_default_str();
  cmd->add_option("--seed", tc.seed, "Shuffle and dropout seed")->capture_default_str();
  cmd->add_flag("!--no-dropout", tc.dropout, "Disable dropout during training");
}

std::map<std::string, double> read_layer_rates(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, path + ": not valid JSON: " + e.what());
  }
  require(j.contains("layers") && j["layers"].is_array(), ErrorKind::Schema,
          path + ": report has no layer list");
  std::map<std::string, double> rates;
  for (const auto& l : j["layers"]) {
    const double before = l.at("filters_before").get<double>();
    if (before > 0) rates[l.at("id").get<std::string>()] = 1.0 - l.at("filters_after").get<double>() / before;
  }
  return rates;
}

void print_counts(const NetGraph& g) {
  std::printf("%-22s %12s %16s\n", "layer", "params", "flops");
  for (const auto& c : layer_counts(g))
    std::printf("%-22s %12llu %16llu\n", c.id.c_str(), static_cast<unsigned long long>(c.params),
                static_cast<unsigned long long>(c.flops));
  std::printf("%-22s %12llu %16llu\n", "total", static_cast<unsigned long long>(count_params(g)),
              static_cast<unsigned long long>(count_flops(g)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisher/deconvolution structured pruning for small CNNs"};
  app.require_subcommand(1);

  // train
  std::string arch = "desk-cnn", init_model, train_data, val_data, test_data, out_model;
  std::uint64_t init_seed = 1;
  TrainConfig tc;
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch or continue training one");
  auto* arch_opt = train_cmd->add_option("--arch", arch, "Architecture to initialize")->capture_default_str();
  train_cmd->add_option("--model", init_model, "Existing model to continue from")->excludes(arch_opt);
  train_cmd->add_option("--init-seed", init_seed, "Weight initialization seed")->capture_default_str();
  train_cmd->add_option("--train", train_data, "Training data")->required();
  train_cmd->add_option("--val", val_data, "Validation data evaluated after every epoch");
  train_cmd->add_option("--test", test_data, "Test data; its accuracy is recorded with the model");
  train_cmd->add_option("-o,--out", out_model, "Output model file")->required();
  add_train_options(train_cmd, tc);

  // prune
  std::string method = "fisher", prune_model, prune_data, rates_from, lda_dir, utility_dir, prune_out,
              prune_test, prune_train;
  double eta = 1.0, rate = -1.0;
  TrainConfig retrain{0.02, 1e-4, true, 32, 0, 1};
  auto* prune_cmd = app.add_subcommand("prune", "Prune a trained model");
  prune_cmd->add_option("--model", prune_model, "Trained model")->required();
  prune_cmd->add_option("--method", method, "fisher | magnitude | filternorm")->capture_default_str()
      ->check(CLI::IsMember({"fisher", "magnitude", "filternorm"}));
  prune_cmd->add_option("--eta", eta, "Fisher threshold scale")->capture_default_str();
  prune_cmd->add_option("--rate", rate, "Magnitude: weight fraction; filternorm: per-layer filter fraction");
  prune_cmd->add_option("--rates-from", rates_from, "Filternorm: per-layer rates taken from a prune report");
  prune_cmd->add_option("--data", prune_data, "Data for LDA and tracing (fisher)");
  prune_cmd->add_option("--test", prune_test, "Test data for accuracy before and after retraining");
  prune_cmd->add_option("--train", prune_train, "Training data for retraining");
  prune_cmd->add_option("--dump-lda", lda_dir, "Directory for firing matrix and Fisher ratio CSVs");
  prune_cmd->add_option("--dump-utility", utility_dir, "Directory for utility score CSVs");
  prune_cmd->add_option("-o,--out", prune_out, "Output model file (report goes next to it)")->required();
  prune_cmd->add_option("--retrain-epochs", retrain.epochs, "Retraining epochs")->capture_default_str();
  prune_cmd->add_option("--retrain-lr", retrain.learning_rate, "Retraining learning rate")->capture_default_str();
  prune_cmd->add_option("--retrain-seed", retrain.seed, "Retraining seed")->capture_default_str();

  // eval
  std::string eval_model, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model");
  eval_cmd->add_option("--model", eval_model, "Model file")->required();
  eval_cmd->add_option("--data", eval_data, "Evaluation data")->required();

  // sweep
  std::string sweep_config, sweep_out;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run an eta sweep with baselines");
  sweep_cmd->add_option("--config", sweep_config, "Experiment config (JSON)")->required();
  sweep_cmd->add_option("--out", sweep_out, "Override the output directory");

  // report
  std::string report_csv, report_out;
  auto* report_cmd = app.add_subcommand("report", "Render a sweep CSV as a summary table");
  report_cmd->add_option("--csv", report_csv, "Sweep CSV")->required();
  report_cmd->add_option("-o,--out", report_out, "Write the table here instead of stdout");

  // gen-data
  SynthOptions synth{6000, 16, 0.08, 1};
  std::string gen_out;
  bool gen_idx = false;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic glyph dataset");
  gen_cmd->add_option("--samples", synth.samples, "Sample count")->capture_default_str();
  gen_cmd->add_option("--side", synth.side, "Image side length")->capture_default_str();
  gen_cmd->add_option("--noise", synth.noise, "Pixel noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_flag("--idx", gen_idx, "Write an IDX pair (<out>-images.idx, <out>-labels.idx)");
  gen_cmd->add_option("-o,--out", gen_out, "Output directory or IDX prefix")->required();

  // arch
  std::string arch_name, arch_out;
  std::size_t arch_classes = 0, arch_side = 16;
  auto* arch_cmd = app.add_subcommand("arch", "Print parameter/FLOP counts of a reference architecture");
  arch_cmd->add_option("--name", arch_name, "vgg16 | googlenet | desk-cnn | desk-modular")->required();
  arch_cmd->add_option("--classes", arch_classes, "Class count (0 = architecture default)");
  arch_cmd->add_option("--side", arch_side, "Input side for the desk nets")->capture_default_str();
  arch_cmd->add_option("-o,--out", arch_out, "Write the (weightless) model file");
  auto* counts_cmd = app.add_subcommand("counts", "Print parameter/FLOP counts of a model file");
  std::string counts_model;
  counts_cmd->add_option("--model", counts_model, "Model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      const Dataset data = resolve_dataset(train_data);
      NetGraph g;
      if (!init_model.empty()) {
        g = load_model_file(init_model);
        require(g.materialized(), ErrorKind::Usage, init_model + " has no weights to continue from");
      } else {
        g = architecture_by_name(arch, data.shape.h, data.classes);
        initialize_weights(g, init_seed);
      }
      std::optional<Dataset> val;
      if (!val_data.empty()) val = resolve_dataset(val_data);
      const TrainHistory h = train(g, data, tc, val ? &*val : nullptr);
      nlohmann::json log = {{"training", to_json(tc)}, {"init_seed", init_seed}, {"epochs", nlohmann::json::array()}};
      for (std::size_t e = 0; e < h.epochs.size(); ++e) {
        std::printf("epoch %zu loss %.6f", e + 1, h.epochs[e].loss);
        if (h.epochs[e].val_accuracy >= 0) std::printf(" val_acc %.4f", h.epochs[e].val_accuracy);
        std::printf("\n");
        log["epochs"].push_back({{"loss", h.epochs[e].loss}, {"val_accuracy", h.epochs[e].val_accuracy}});
      }
      if (!test_data.empty()) {
        const double acc = evaluate(g, resolve_dataset(test_data));
        std::printf("test accuracy %.17g\n", acc);
        log["test_accuracy"] = acc;
      }
      save_model_file(g, out_model);
      fs::path logp(out_model);
      logp.replace_extension(".train.json");
      write_text(logp, log.dump(2) + "\n");
      std::printf("saved %s (%llu params)\n", out_model.c_str(), static_cast<unsigned long long>(count_params(g)));
    } else if (*prune_cmd) {
      const NetGraph g = load_model_file(prune_model);
      require(g.materialized(), ErrorKind::Usage, prune_model + " has no weights");
      NetGraph pruned;
      PruneReport report;
      const Method m = parse_method(method);
      if (m == Method::Fisher) {
        require(!prune_data.empty(), ErrorKind::Usage, "fisher pruning needs --data");
        require(eta >= 0.0, ErrorKind::Usage, "--eta must be non-negative");
        const Dataset data = resolve_dataset(prune_data);
        const FisherAnalysis a = analyze_last_hidden(g, data);
        FisherOptions fo;
        fo.eta = eta;
        FisherResult r = fisher_prune(g, data, a, fo);
        if (!lda_dir.empty()) dump_lda(a, r.selected, lda_dir);
        if (!utility_dir.empty()) dump_utility(g, r.utility, r.mask, eta, utility_dir);
        pruned = std::move(r.pruned);
        report = std::move(r.report);
      } else {
        require(lda_dir.empty() && utility_dir.empty(), ErrorKind::Usage,
                "--dump-lda and --dump-utility apply to the fisher method");
        if (m == Method::Magnitude) {
          require(rate >= 0.0, ErrorKind::Usage, "magnitude pruning needs --rate");
          pruned = magnitude_prune(g, rate);
          report = make_report(g, pruned, "magnitude", rate);
        } else {
          std::map<std::string, double> rates;
          if (!rates_from.empty()) {
            rates = read_layer_rates(rates_from);
          } else {
            require(rate >= 0.0, ErrorKind::Usage, "filternorm pruning needs --rate or --rates-from");
            for (std::size_t i = 0; i < g.nodes.size(); ++i)
              if (g.nodes[i].has_params() && i != g.decision_index()) rates[g.nodes[i].id] = rate;
          }
          pruned = filter_norm_prune(g, rates);
          report = make_report(g, pruned, "filternorm", rate);
        }
      }
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      std::optional<Dataset> test;
      if (!prune_test.empty()) {
        test = resolve_dataset(prune_test);
        report.base_accuracy = evaluate(g, *test);
        report.accuracy_before_retrain = evaluate(pruned, *test);
      }
      if (retrain.epochs > 0) {
        require(!prune_train.empty(), ErrorKind::Usage, "--retrain-epochs needs --train");
        train(pruned, resolve_dataset(prune_train), retrain);
        if (test) report.accuracy_after_retrain = evaluate(pruned, *test);
      }
      save_model_file(pruned, prune_out);
      fs::path rp(prune_out);
      rp.replace_extension(".report.json");
      write_text(rp, to_json(report).dump(2) + "\n");
      std::printf("params %llu -> %llu (%.2f%% removed), flops %llu -> %llu\n",
                  static_cast<unsigned long long>(report.params_before),
                  static_cast<unsigned long long>(report.params_after), 100.0 * report.param_reduction(),
                  static_cast<unsigned long long>(report.flops_before),
                  static_cast<unsigned long long>(report.flops_after));
      if (report.accuracy_before_retrain >= 0)
        std::printf("accuracy base %.4f pruned %.4f\n", report.base_accuracy, report.accuracy_before_retrain);
      if (report.accuracy_after_retrain >= 0) std::printf("accuracy retrained %.4f\n", report.accuracy_after_retrain);
      std::printf("wrote %s and %s\n", prune_out.c_str(), rp.string().c_str());
    } else if (*eval_cmd) {
      const NetGraph g = load_model_file(eval_model);
      require(g.materialized(), ErrorKind::Usage, eval_model + " has no weights");
      const double acc = evaluate(g, resolve_dataset(eval_data));
      std::printf("accuracy %.17g\nparams %llu\nflops %llu\n", acc,
                  static_cast<unsigned long long>(count_params(g)),
                  static_cast<unsigned long long>(count_flops(g)));
    } else if (*sweep_cmd) {
      ExperimentConfig cfg = load_experiment(sweep_config);
      if (!sweep_out.empty()) cfg.output_dir = sweep_out;
      const SweepResult r = run_sweep(cfg, &std::cout);
      std::cout << '\n' << summary_table(r.rows);
      std::cout << "wrote " << r.csv.string() << '\n';
    } else if (*report_cmd) {
      const std::string table = summary_table(read_sweep_csv(report_csv));
      if (report_out.empty())
        std::cout << table;
      else
        write_text(report_out, table);
    } else if (*gen_cmd) {
      const Dataset d = make_synthetic_glyphs(synth);
      if (gen_idx)
        save_idx(d, gen_out + "-images.idx", gen_out + "-labels.idx");
      else
        save_dataset_dir(d, gen_out);
      std::printf("wrote %zu samples\n", d.size());
    } else if (*arch_cmd) {
      const NetGraph g = architecture_by_name(arch_name, arch_side, arch_classes);
      print_counts(g);
      if (!arch_out.empty()) save_model_file(g, arch_out);
    } else if (*counts_cmd) {
      print_counts(load_model_file(counts_model));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
