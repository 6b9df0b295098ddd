#include "cassle/config.hpp"

#include <fstream>
#include <set>

namespace cassle {

Method method_from_string(const std::string& s) {
  if (s == "simclr") return Method::kSimclr;
  if (s == "barlow") return Method::kBarlow;
  if (s == "byol") return Method::kByol;
  if (s == "swav") return Method::kSwav;
  throw config_error("unknown method '" + s + "'");
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "finetune") return Strategy::kFinetune;
  if (s == "cassle") return Strategy::kCassle;
  if (s == "ewc") return Strategy::kEwc;
  if (s == "cassle_swap") return Strategy::kCassleSwap;
  if (s == "cassle_nopred") return Strategy::kCassleNopred;
  throw config_error("unknown strategy '" + s + "'");
}

Regime regime_from_string(const std::string& s) {
  if (s == "class") return Regime::kClassInc;
  if (s == "data") return Regime::kDataInc;
  if (s == "domain") return Regime::kDomainInc;
  throw config_error("unknown scenario regime '" + s + "'");
}

namespace {

DistillFamily family_from_string(const std::string& s) {
  if (s == "contrastive") return DistillFamily::kContrastive;
  if (s == "mse") return DistillFamily::kMse;
  if (s == "prototype_ce") return DistillFamily::kPrototypeCe;
  if (s == "cross_correlation") return DistillFamily::kCrossCorrelation;
  throw config_error("unknown distill family '" + s + "'");
}

[[noreturn]] void fail_at(const std::string& path, const std::string& msg) {
  throw config_error(msg + " at " + path);
}

void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& known,
                         const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key())) fail_at(path + "." + it.key(), "unknown config key");
  }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out, const std::string& path) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail_at(path + "." + key, "wrong type");
  }
}

}  // namespace

void RunConfig::validate() const {
  if (tasks < 1) throw config_error("scenario.tasks must be >= 1");
  if (steps_per_task < 0) throw config_error("scenario.steps_per_task must be >= 0");
  if (batch_size < 2) throw config_error("scenario.batch_size must be >= 2");
  if (data_source != "synthetic" && data_source != "cifar100")
    throw config_error("data.source must be 'synthetic' or 'cifar100'");
  if (data_source == "cifar100" && cifar_path.empty())
    throw config_error("data.cifar_path required for cifar100 source");
  if (cifar_eval_fraction <= 0.0 || cifar_eval_fraction >= 1.0)
    throw config_error("data.cifar_eval_fraction must be in (0, 1)");
  if (eval_per_class < 1) throw config_error("data.eval_per_class must be >= 1");
  synthetic.validate();
  losses.validate();
  optimizer.validate();
  augment.validate();
  if (ema_momentum < 0.0 || ema_momentum > 1.0)
    throw config_error("ema.momentum must be in [0, 1]");
  if (ewc_lambda < 0.0) throw config_error("ewc.lambda must be >= 0");
  if (ewc_fisher_batches < 1) throw config_error("ewc.fisher_batches must be >= 1");
  if (label_fraction <= 0.0 || label_fraction > 1.0)
    throw config_error("probe.label_fraction must be in (0, 1]");
  if (probe_epochs < 1) throw config_error("probe.epochs must be >= 1");
  if (probe_lr <= 0.0) throw config_error("probe.lr must be positive");
  if (probe_batch < 1) throw config_error("probe.batch_size must be >= 1");
  if (task_aware != "auto" && task_aware != "true" && task_aware != "false")
    throw config_error("probe.task_aware must be auto|true|false");
  if (knn_k < 1) throw config_error("knn.k must be >= 1");
  if (knn_temperature <= 0.0) throw config_error("knn.temperature must be positive");
  if (log_every < 1) throw config_error("report.log_every must be >= 1");
  if (distill_family != "auto") (void)family_from_string(distill_family);
  if (regime == Regime::kDomainInc && data_source == "synthetic" && synthetic.n_domains < 2)
    throw config_error("domain-incremental synthetic runs need data.n_domains >= 2");
  for (Index w : backbone)
    if (w <= 0) throw config_error("arch.backbone widths must be positive");
  for (Index w : projector)
    if (w <= 0) throw config_error("arch.projector widths must be positive");
  if (backbone.empty() || projector.empty())
    throw config_error("arch.backbone and arch.projector must be non-empty");
}

DistillFamily RunConfig::resolved_distill_family() const {
  if (distill_family == "auto") return family_of(method);
  return family_from_string(distill_family);
}

bool RunConfig::resolved_task_aware() const {
  if (task_aware == "true") return true;
  if (task_aware == "false") return false;
  return regime == Regime::kDomainInc;
}

ArchSpec RunConfig::arch_spec(Index input_dim, Index n_classes) const {
  ArchSpec arch;
  arch.input_dim = input_dim;
  arch.backbone = backbone;
  arch.projector = projector;
  arch.predictor_hidden = predictor_hidden;
  arch.head_hidden = head_hidden;
  arch.prototypes = prototypes > 0 ? prototypes : 4 * n_classes;
  if (method != Method::kSwav) arch.prototypes = 0;
  return arch;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig cfg;
  cfg.strategy = strategy;
  cfg.method.method = method;
  cfg.method.loss = losses;
  cfg.method.distill_family = resolved_distill_family();
  cfg.method.ema_momentum = ema_momentum;
  cfg.method.predictor_hidden = predictor_hidden;
  cfg.method.reinit_predictor_per_task = predictor_reinit_per_task;
  cfg.optimizer = optimizer;
  cfg.augment = augment;
  cfg.steps_per_task = steps_per_task;
  cfg.batch_size = batch_size;
  cfg.ewc_lambda = ewc_lambda;
  cfg.ewc_fisher_batches = ewc_fisher_batches;
  cfg.log_every = log_every;
  return cfg;
}

ProbeTrainConfig RunConfig::probe_config(uint64_t probe_seed) const {
  ProbeTrainConfig cfg;
  cfg.label_fraction = label_fraction;
  cfg.epochs = probe_epochs;
  cfg.lr = probe_lr;
  cfg.batch_size = probe_batch;
  cfg.seed = probe_seed;
  return cfg;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["method"] = method_name(method);
  j["strategy"] = strategy_name(strategy);
  j["seed"] = seed;
  j["scenario"] = {{"regime", regime_name(regime)},
                   {"tasks", tasks},
                   {"steps_per_task", steps_per_task},
                   {"batch_size", batch_size}};
  j["data"] = {{"source", data_source},
               {"n_classes", synthetic.n_classes},
               {"samples_per_class", synthetic.samples_per_class},
               {"eval_per_class", eval_per_class},
               {"input_dim", synthetic.input_dim},
               {"cluster_std", synthetic.cluster_std},
               {"n_domains", synthetic.n_domains},
               {"domain_shift_strength", synthetic.domain_shift_strength},
               {"cifar_path", cifar_path},
               {"cifar_eval_fraction", cifar_eval_fraction}};
  j["arch"] = {{"backbone", backbone},
               {"projector", projector},
               {"predictor_hidden", predictor_hidden},
               {"head_hidden", head_hidden},
               {"prototypes", prototypes}};
  j["losses"] = {{"temperature", losses.temperature},
                 {"prototype_temperature", losses.prototype_temperature},
                 {"barlow_lambda", losses.barlow_offdiag_weight},
                 {"sinkhorn_iters", losses.sinkhorn_iters},
                 {"sinkhorn_eps", losses.sinkhorn_eps},
                 {"include_positive_in_denominator", losses.include_positive_in_denominator},
                 {"distill_family", distill_family}};
  j["optimizer"] = {{"kind", optimizer.kind == OptimizerKind::kLars ? "lars" : "sgd"},
                    {"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay},
                    {"lars_eta", optimizer.lars_eta},
                    {"eps", optimizer.eps},
                    {"cosine_schedule", optimizer.cosine_schedule}};
  j["augment"] = {{"noise_std", augment.noise_std},
                  {"noise_prob", augment.noise_prob},
                  {"mask_rate", augment.mask_rate},
                  {"mask_prob", augment.mask_prob},
                  {"scale_min", augment.scale_min},
                  {"scale_max", augment.scale_max},
                  {"scale_prob", augment.scale_prob},
                  {"rotate_prob", augment.rotate_prob},
                  {"rotate_max_angle", augment.rotate_max_angle},
                  {"rotate_planes", augment.rotate_planes}};
  j["ema"] = {{"momentum", ema_momentum}};
  j["ewc"] = {{"lambda", ewc_lambda}, {"fisher_batches", ewc_fisher_batches}};
  j["predictor"] = {{"reinit_per_task", predictor_reinit_per_task}};
  j["probe"] = {{"epochs", probe_epochs},
                {"lr", probe_lr},
                {"batch_size", probe_batch},
                {"label_fraction", label_fraction},
                {"task_aware", task_aware}};
  j["knn"] = {{"k", knn_k}, {"temperature", knn_temperature}};
  j["report"] = {{"log_every", log_every}};
  return j;
}

RunConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw parse_error("config must be a JSON object");
  RunConfig cfg;
  reject_unknown_keys(j,
                      {"method", "strategy", "seed", "scenario", "data", "arch", "losses",
                       "optimizer", "augment", "ema", "ewc", "predictor", "probe", "knn",
                       "report"},
                      "config");

  std::string method_s = method_name(cfg.method);
  std::string strategy_s = strategy_name(cfg.strategy);
  read_field(j, "method", method_s, "config");
  read_field(j, "strategy", strategy_s, "config");
  cfg.method = method_from_string(method_s);
  cfg.strategy = strategy_from_string(strategy_s);
  read_field(j, "seed", cfg.seed, "config");

  if (j.contains("scenario")) {
    const auto& s = j.at("scenario");
    if (s.is_string()) {
      cfg.regime = regime_from_string(s.get<std::string>());
    } else if (s.is_object()) {
      reject_unknown_keys(s, {"regime", "tasks", "steps_per_task", "batch_size"}, "scenario");
      std::string regime_s = regime_name(cfg.regime);
      read_field(s, "regime", regime_s, "scenario");
      cfg.regime = regime_from_string(regime_s);
      read_field(s, "tasks", cfg.tasks, "scenario");
      read_field(s, "steps_per_task", cfg.steps_per_task, "scenario");
      read_field(s, "batch_size", cfg.batch_size, "scenario");
    } else {
      fail_at("scenario", "must be a string or object");
    }
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown_keys(d,
                        {"source", "n_classes", "samples_per_class", "eval_per_class",
                         "input_dim", "cluster_std", "n_domains", "domain_shift_strength",
                         "cifar_path", "cifar_eval_fraction"},
                        "data");
    read_field(d, "source", cfg.data_source, "data");
    read_field(d, "n_classes", cfg.synthetic.n_classes, "data");
    read_field(d, "samples_per_class", cfg.synthetic.samples_per_class, "data");
    read_field(d, "eval_per_class", cfg.eval_per_class, "data");
    read_field(d, "input_dim", cfg.synthetic.input_dim, "data");
    read_field(d, "cluster_std", cfg.synthetic.cluster_std, "data");
    read_field(d, "n_domains", cfg.synthetic.n_domains, "data");
    read_field(d, "domain_shift_strength", cfg.synthetic.domain_shift_strength, "data");
    read_field(d, "cifar_path", cfg.cifar_path, "data");
    read_field(d, "cifar_eval_fraction", cfg.cifar_eval_fraction, "data");
  }

  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    reject_unknown_keys(a, {"backbone", "projector", "predictor_hidden", "head_hidden", "prototypes"},
                        "arch");
    read_field(a, "backbone", cfg.backbone, "arch");
    read_field(a, "projector", cfg.projector, "arch");
    read_field(a, "predictor_hidden", cfg.predictor_hidden, "arch");
    read_field(a, "head_hidden", cfg.head_hidden, "arch");
    read_field(a, "prototypes", cfg.prototypes, "arch");
  }

  if (j.contains("losses")) {
    const auto& l = j.at("losses");
    reject_unknown_keys(l,
                        {"temperature", "prototype_temperature", "barlow_lambda",
                         "sinkhorn_iters", "sinkhorn_eps", "include_positive_in_denominator",
                         "distill_family"},
                        "losses");
    read_field(l, "temperature", cfg.losses.temperature, "losses");
    read_field(l, "prototype_temperature", cfg.losses.prototype_temperature, "losses");
    read_field(l, "barlow_lambda", cfg.losses.barlow_offdiag_weight, "losses");
    read_field(l, "sinkhorn_iters", cfg.losses.sinkhorn_iters, "losses");
    read_field(l, "sinkhorn_eps", cfg.losses.sinkhorn_eps, "losses");
    read_field(l, "include_positive_in_denominator",
               cfg.losses.include_positive_in_denominator, "losses");
    read_field(l, "distill_family", cfg.distill_family, "losses");
  }

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    reject_unknown_keys(
        o, {"kind", "lr", "momentum", "weight_decay", "lars_eta", "eps", "cosine_schedule"},
        "optimizer");
    std::string kind = cfg.optimizer.kind == OptimizerKind::kLars ? "lars" : "sgd";
    read_field(o, "kind", kind, "optimizer");
    if (kind == "lars")
      cfg.optimizer.kind = OptimizerKind::kLars;
    else if (kind == "sgd")
      cfg.optimizer.kind = OptimizerKind::kSgd;
    else
      fail_at("optimizer.kind", "must be lars or sgd");
    read_field(o, "lr", cfg.optimizer.lr, "optimizer");
    read_field(o, "momentum", cfg.optimizer.momentum, "optimizer");
    read_field(o, "weight_decay", cfg.optimizer.weight_decay, "optimizer");
    read_field(o, "lars_eta", cfg.optimizer.lars_eta, "optimizer");
    read_field(o, "eps", cfg.optimizer.eps, "optimizer");
    read_field(o, "cosine_schedule", cfg.optimizer.cosine_schedule, "optimizer");
  }

  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    reject_unknown_keys(a,
                        {"noise_std", "noise_prob", "mask_rate", "mask_prob", "scale_min",
                         "scale_max", "scale_prob", "rotate_prob", "rotate_max_angle",
                         "rotate_planes"},
                        "augment");
    read_field(a, "noise_std", cfg.augment.noise_std, "augment");
    read_field(a, "noise_prob", cfg.augment.noise_prob, "augment");
    read_field(a, "mask_rate", cfg.augment.mask_rate, "augment");
    read_field(a, "mask_prob", cfg.augment.mask_prob, "augment");
    read_field(a, "scale_min", cfg.augment.scale_min, "augment");
    read_field(a, "scale_max", cfg.augment.scale_max, "augment");
    read_field(a, "scale_prob", cfg.augment.scale_prob, "augment");
    read_field(a, "rotate_prob", cfg.augment.rotate_prob, "augment");
    read_field(a, "rotate_max_angle", cfg.augment.rotate_max_angle, "augment");
    read_field(a, "rotate_planes", cfg.augment.rotate_planes, "augment");
  }

  if (j.contains("ema")) {
    reject_unknown_keys(j.at("ema"), {"momentum"}, "ema");
    read_field(j.at("ema"), "momentum", cfg.ema_momentum, "ema");
  }
  if (j.contains("ewc")) {
    reject_unknown_keys(j.at("ewc"), {"lambda", "fisher_batches"}, "ewc");
    read_field(j.at("ewc"), "lambda", cfg.ewc_lambda, "ewc");
    read_field(j.at("ewc"), "fisher_batches", cfg.ewc_fisher_batches, "ewc");
  }
  if (j.contains("predictor")) {
    reject_unknown_keys(j.at("predictor"), {"reinit_per_task"}, "predictor");
    read_field(j.at("predictor"), "reinit_per_task", cfg.predictor_reinit_per_task, "predictor");
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    reject_unknown_keys(p, {"epochs", "lr", "batch_size", "label_fraction", "task_aware"},
                        "probe");
    read_field(p, "epochs", cfg.probe_epochs, "probe");
    read_field(p, "lr", cfg.probe_lr, "probe");
    read_field(p, "batch_size", cfg.probe_batch, "probe");
    read_field(p, "label_fraction", cfg.label_fraction, "probe");
    read_field(p, "task_aware", cfg.task_aware, "probe");
  }
  if (j.contains("knn")) {
    reject_unknown_keys(j.at("knn"), {"k", "temperature"}, "knn");
    read_field(j.at("knn"), "k", cfg.knn_k, "knn");
    read_field(j.at("knn"), "temperature", cfg.knn_temperature, "knn");
  }
  if (j.contains("report")) {
    reject_unknown_keys(j.at("report"), {"log_every"}, "report");
    read_field(j.at("report"), "log_every", cfg.log_every, "report");
  }

  cfg.validate();
  return cfg;
}

RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("malformed config JSON: ") + e.what());
  }
  return parse_config(j);
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path);
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_config_text(text);
}

}  // namespace cassle
