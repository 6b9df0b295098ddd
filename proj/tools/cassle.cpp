#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "cassle/checkpoint.hpp"
#include "cassle/gradcheck_suite.hpp"
#include "cassle/rng.hpp"
#include "cassle/runner.hpp"

using namespace cassle;

namespace {

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kNumeric:
    case ErrorCode::kDomain:
      return 2;
    default:
      return 1;
  }
}

RunConfig load_run_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig{};
  return parse_config_file(config_path);
}

void apply_overrides(RunConfig& cfg, const std::string& strategy, const std::string& method,
                     const std::string& scenario, int tasks, int64_t seed) {
  if (!strategy.empty()) cfg.strategy = strategy_from_string(strategy);
  if (!method.empty()) cfg.method = method_from_string(method);
  if (!scenario.empty()) cfg.regime = regime_from_string(scenario);
  if (tasks > 0) cfg.tasks = tasks;
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  cfg.validate();
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::string& strategy, const std::string& method, const std::string& scenario,
            int tasks, int64_t seed, bool canonical) {
  RunConfig cfg = load_run_config(config_path);
  apply_overrides(cfg, strategy, method, scenario, tasks, seed);
  RunReport report = run_scenario(cfg, out_dir);
  if (!out_dir.empty()) write_report_files(report, out_dir, canonical);

  std::printf("run %s/%s seed=%llu  A=%.4f", strategy_name(cfg.strategy),
              method_name(cfg.method), static_cast<unsigned long long>(cfg.seed),
              report.metrics.average_accuracy);
  if (report.metrics.forgetting) std::printf("  F=%.4f", *report.metrics.forgetting);
  if (report.metrics.forward_transfer) std::printf("  FT=%.4f", *report.metrics.forward_transfer);
  std::printf("%s\n", report.incomplete ? "  [INCOMPLETE]" : "");
  return report.incomplete ? 2 : 0;
}

int cmd_gradcheck() {
  int failures = 0;
  auto print = [&](const std::vector<GradCheckResult>& results) {
    for (const auto& r : results) {
      std::printf("%-34s %s  (checks: %3d, worst |diff|: %.3e)\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.inputs_checked, r.worst_abs_diff);
      if (!r.passed) ++failures;
    }
  };
  std::printf("primitive gradient checks (20 seeds each)\n");
  print(run_primitive_gradchecks(20));
  std::printf("\nloss gradient checks (20 instances each)\n");
  print(run_loss_gradchecks(20));
  std::printf("\n%s\n", failures == 0 ? "all gradient checks passed" : "GRADIENT CHECKS FAILED");
  return failures == 0 ? 0 : 2;
}

int cmd_eval(const std::string& train_path, const std::string& test_path,
             const std::string& checkpoint, const std::string& mode, Scalar label_fraction,
             int probe_epochs, int knn_k, Scalar knn_tau, int64_t seed) {
  FeatureDump train = read_feature_dump(train_path);
  FeatureDump test = read_feature_dump(test_path);

  MatrixRM train_feats = train.features;
  MatrixRM test_feats = test.features;
  if (!checkpoint.empty()) {
    EncoderState enc = encoder_from_checkpoint(checkpoint);
    train_feats = extract_features(enc, train.features);
    test_feats = extract_features(enc, test.features);
  }
  auto to_int = [](const std::vector<uint32_t>& v) {
    return std::vector<int>(v.begin(), v.end());
  };
  const std::vector<int> train_labels = to_int(train.labels);
  const std::vector<int> test_labels = to_int(test.labels);
  int n_classes = 1;
  for (int y : train_labels) n_classes = std::max(n_classes, y + 1);

  Scalar accuracy = 0.0;
  if (mode == "probe") {
    ProbeTrainConfig cfg;
    cfg.label_fraction = label_fraction;
    cfg.epochs = probe_epochs;
    cfg.seed = seed >= 0 ? static_cast<uint64_t>(seed) : 0;
    ProbeState probe = train_linear_probe(train_feats, train_labels, n_classes, cfg);
    accuracy = evaluate_probe(probe, test_feats, test_labels);
  } else if (mode == "knn") {
    accuracy = knn_evaluate(train_feats, train_labels, test_feats, test_labels, knn_k, knn_tau);
  } else {
    throw config_error("eval mode must be probe or knn");
  }
  std::printf("%s accuracy: %.4f\n", mode.c_str(), accuracy);
  return 0;
}

int cmd_plot(const std::vector<std::string>& report_paths, const std::string& out_path) {
  std::vector<nlohmann::json> reports;
  for (const auto& p : report_paths) reports.push_back(load_json_file(p));
  const std::string svg = emit_plot_svg(reports);
  std::ofstream out(out_path);
  if (!out) throw io_error("cannot write " + out_path);
  out << svg;
  std::printf("wrote %s (%zu reports)\n", out_path.c_str(), reports.size());
  return 0;
}

int cmd_gen_data(const std::string& config_path, const std::string& cifar_path,
                 const std::string& out_path, bool eval_split, int64_t seed) {
  LabeledDataset ds;
  if (!cifar_path.empty()) {
    ds = read_cifar100_binary(cifar_path);
  } else {
    RunConfig cfg = load_run_config(config_path);
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    SyntheticSpec spec = cfg.synthetic;
    spec.seed = Rng::mix(cfg.seed, 0xDA7A5EED);
    SyntheticGenerator gen(spec);
    ds = eval_split ? gen.sample(cfg.eval_per_class, Rng::mix(spec.seed, 2))
                    : gen.sample(spec.samples_per_class, Rng::mix(spec.seed, 1));
  }
  std::vector<uint32_t> labels(ds.labels.begin(), ds.labels.end());
  write_feature_dump(out_path, ds.samples, labels);
  std::printf("wrote %s (%lld samples, dim %lld)\n", out_path.c_str(),
              static_cast<long long>(ds.size()), static_cast<long long>(ds.dim()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual self-supervised representation-learning benchmark"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "train a scenario and write its report");
  std::string config_path, out_dir, strategy, method, scenario;
  int tasks = 0;
  int64_t seed = -1;
  bool canonical = false;
  run->add_option("--config", config_path, "config JSON path");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--strategy", strategy)
      ->check(CLI::IsMember({"finetune", "cassle", "ewc", "cassle_swap", "cassle_nopred"}));
  run->add_option("--method", method)
      ->check(CLI::IsMember({"simclr", "barlow", "byol", "swav"}));
  run->add_option("--scenario", scenario)->check(CLI::IsMember({"class", "data", "domain"}));
  run->add_option("--tasks", tasks);
  run->add_option("--seed", seed);
  run->add_flag("--canonical", canonical, "blank volatile fields in the report");

  // eval
  auto* eval = app.add_subcommand("eval", "probe or k-NN over feature dumps");
  std::string train_path, test_path, checkpoint, mode = "probe";
  Scalar label_fraction = 1.0, knn_tau = 0.07;
  int probe_epochs = 100, knn_k = 20;
  int64_t eval_seed = -1;
  eval->add_option("--train", train_path, "training feature dump (CSFE)")->required();
  eval->add_option("--test", test_path, "test feature dump (CSFE)")->required();
  eval->add_option("--checkpoint", checkpoint, "encode dumps through this checkpoint first");
  eval->add_option("--mode", mode)->check(CLI::IsMember({"probe", "knn"}));
  eval->add_option("--label-fraction", label_fraction);
  eval->add_option("--probe-epochs", probe_epochs);
  eval->add_option("--knn-k", knn_k);
  eval->add_option("--knn-tau", knn_tau);
  eval->add_option("--seed", eval_seed);

  // gradcheck
  app.add_subcommand("gradcheck", "finite-difference verification of all gradients");

  // plot
  auto* plot = app.add_subcommand("plot", "accuracy-over-tasks SVG from reports");
  std::vector<std::string> report_paths;
  std::string plot_out = "plot.svg";
  plot->add_option("reports", report_paths, "report.json files")->required();
  plot->add_option("--out", plot_out, "output SVG path");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize a dataset or convert CIFAR-100");
  std::string gen_config, gen_cifar, gen_out = "data.csfe";
  bool gen_eval = false;
  int64_t gen_seed = -1;
  gen->add_option("--config", gen_config, "config JSON for the synthetic spec");
  gen->add_option("--cifar", gen_cifar, "CIFAR-100 binary file to convert");
  gen->add_option("--out", gen_out, "output CSFE path");
  gen->add_flag("--eval", gen_eval, "emit the evaluation draw instead of the training draw");
  gen->add_option("--seed", gen_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n\n", e.what());
    std::fputs(app.help().c_str(), stderr);
    return 1;
  }

  try {
    if (run->parsed())
      return cmd_run(config_path, out_dir, strategy, method, scenario, tasks, seed, canonical);
    if (eval->parsed())
      return cmd_eval(train_path, test_path, checkpoint, mode, label_fraction, probe_epochs,
                      knn_k, knn_tau, eval_seed);
    if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
    if (plot->parsed()) return cmd_plot(report_paths, plot_out);
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_cifar, gen_out, gen_eval, gen_seed);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
