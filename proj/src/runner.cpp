#include "cassle/runner.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "cassle/checkpoint.hpp"
#include "cassle/rng.hpp"

namespace cassle {

namespace {

struct ScenarioData {
  TaskStream train;
  TaskStream eval;
  Index input_dim = 0;
  int n_classes = 0;
};

ScenarioData build_data(const RunConfig& cfg) {
  ScenarioData out;
  LabeledDataset train, eval;
  if (cfg.data_source == "synthetic") {
    SyntheticSpec spec = cfg.synthetic;
    spec.seed = Rng::mix(cfg.seed, 0xDA7A5EED);
    SyntheticGenerator gen(spec);
    train = gen.sample(spec.samples_per_class, Rng::mix(spec.seed, 1));
    eval = gen.sample(cfg.eval_per_class, Rng::mix(spec.seed, 2));
  } else {
    LabeledDataset all = read_cifar100_binary(cfg.cifar_path);
    if (all.size() < 2) throw config_error("cifar dataset too small");
    std::vector<Index> order(static_cast<size_t>(all.size()));
    for (Index i = 0; i < all.size(); ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(Rng::mix(cfg.seed, 0xC1FA2));
    rng.shuffle(order);
    const Index n_eval = std::max<Index>(1, static_cast<Index>(
                             cfg.cifar_eval_fraction * static_cast<Scalar>(all.size())));
    std::vector<Index> eval_rows(order.begin(), order.begin() + n_eval);
    std::vector<Index> train_rows(order.begin() + n_eval, order.end());
    auto take = [&](const std::vector<Index>& rows) {
      LabeledDataset ds;
      ds.samples.resize(static_cast<Index>(rows.size()), all.dim());
      for (size_t i = 0; i < rows.size(); ++i) {
        ds.samples.row(static_cast<Index>(i)) = all.samples.row(rows[i]);
        ds.labels.push_back(all.labels[static_cast<size_t>(rows[i])]);
      }
      return ds;
    };
    train = take(train_rows);
    eval = take(eval_rows);
  }

  out.input_dim = train.dim();
  int max_label = 0;
  for (int y : train.labels) max_label = std::max(max_label, y);
  out.n_classes = max_label + 1;

  const uint64_t split_seed = Rng::mix(cfg.seed, 0x5B117);
  out.train = split_stream(train, cfg.regime, cfg.tasks, split_seed);
  out.eval = split_stream(eval, cfg.regime, cfg.tasks, split_seed);
  if (out.train.size() != out.eval.size())
    throw contract_error("train/eval task streams disagree on task count");
  return out;
}

// Fills row `row` (0-based) of the accuracy matrix: probe on the current
// encoder, evaluated against every task's eval split.
void evaluate_row(const RunConfig& cfg, EncoderState& encoder, const ScenarioData& data,
                  int row, AccuracyMatrix& matrix) {
  const bool task_aware = cfg.resolved_task_aware();
  const int tasks = data.train.size();

  if (!task_aware) {
    // one probe over the union of all tasks' probe-train data
    Index total = 0;
    for (const auto& t : data.train.tasks) total += t.size();
    MatrixRM samples(total, data.input_dim);
    std::vector<int> labels;
    labels.reserve(static_cast<size_t>(total));
    Index at = 0;
    for (const auto& t : data.train.tasks) {
      samples.middleRows(at, t.size()) = t.samples;
      labels.insert(labels.end(), t.labels.begin(), t.labels.end());
      at += t.size();
    }
    const MatrixRM features = extract_features(encoder, samples);
    ProbeState probe = train_linear_probe(
        features, labels, data.n_classes,
        cfg.probe_config(Rng::mix(cfg.seed, 0x9C0BE5, static_cast<uint64_t>(row))));
    for (int k = 0; k < tasks; ++k) {
      const auto& ev = data.eval.tasks[static_cast<size_t>(k)];
      const MatrixRM ev_features = extract_features(encoder, ev.samples);
      matrix.set(row, k, evaluate_probe(probe, ev_features, ev.labels));
    }
    return;
  }

  // task-aware: an independent probe per task, never mixing eval splits
  for (int k = 0; k < tasks; ++k) {
    const auto& tr = data.train.tasks[static_cast<size_t>(k)];
    const auto& ev = data.eval.tasks[static_cast<size_t>(k)];
    const MatrixRM features = extract_features(encoder, tr.samples);
    ProbeState probe = train_linear_probe(
        features, tr.labels, data.n_classes,
        cfg.probe_config(Rng::mix(cfg.seed, 0x9C0BE5,
                                  static_cast<uint64_t>(row) * 1000 + static_cast<uint64_t>(k))));
    const MatrixRM ev_features = extract_features(encoder, ev.samples);
    matrix.set(row, k, evaluate_probe(probe, ev_features, ev.labels));
  }
}

}  // namespace

RunReport run_scenario(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  RunReport report;
  report.config = cfg.to_json();
  report.version = kVersionTag;
  report.lr_schedule =
      cfg.optimizer.cosine_schedule ? "cosine_restart_per_task" : "constant";

  ScenarioData data = build_data(cfg);
  const int tasks = data.train.size();
  report.matrix = AccuracyMatrix(tasks);

  TrainConfig train_cfg = cfg.train_config();
  TrainerState trainer = init_trainer(cfg.arch_spec(data.input_dim, data.n_classes), cfg.method,
                                      cfg.seed, cfg.ema_momentum);

  // R_i: the probe on the freshly initialized encoder, once per (arch, seed)
  {
    AccuracyMatrix baseline_row(tasks);
    evaluate_row(cfg, trainer.encoder, data, 0, baseline_row);
    report.random_baseline.resize(static_cast<size_t>(tasks));
    for (int k = 0; k < tasks; ++k)
      report.random_baseline[static_cast<size_t>(k)] = baseline_row.at(0, k);
  }

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  for (int t = 1; t <= tasks; ++t) {
    begin_task(trainer, t, train_cfg);
    TaskLog log = train_task(trainer, data.train.tasks[static_cast<size_t>(t - 1)], t, train_cfg);
    const bool completed = log.completed;
    report.task_logs.push_back(std::move(log));
    if (!completed) {
      report.incomplete = true;
      break;
    }
    if (cfg.strategy == Strategy::kEwc)
      trainer.fisher = estimate_fisher(trainer, data.train.tasks[static_cast<size_t>(t - 1)],
                                       train_cfg, cfg.ewc_fisher_batches);

    report.checkpoint_digests.push_back(encoder_digest(trainer.encoder));
    if (!out_dir.empty())
      write_checkpoint(out_dir + "/task_" + std::to_string(t) + ".ckpt", trainer.encoder);

    evaluate_row(cfg, trainer.encoder, data, t - 1, report.matrix);
  }

  if (!report.incomplete) report.metrics = compute_metrics(report.matrix, report.random_baseline);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

int cssl_thread_cap() {
  const char* env = std::getenv("CSSL_THREADS");
  if (env == nullptr) return 1;
  const int v = std::atoi(env);
  return v >= 1 ? v : 1;
}

std::vector<RunReport> run_many(const std::vector<RunConfig>& configs) {
  std::vector<RunReport> reports(configs.size());
  const int workers = std::min<int>(cssl_thread_cap(), static_cast<int>(configs.size()));
  if (workers <= 1) {
    for (size_t i = 0; i < configs.size(); ++i) reports[i] = run_scenario(configs[i]);
    return reports;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (size_t i = next.fetch_add(1); i < configs.size(); i = next.fetch_add(1))
          reports[i] = run_scenario(configs[i]);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);
  return reports;
}

}  // namespace cassle
