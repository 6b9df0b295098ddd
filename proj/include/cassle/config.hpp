#pragma once

#include <json.hpp>

#include <string>

#include "cassle/data.hpp"
#include "cassle/evaluation.hpp"
#include "cassle/scenarios.hpp"

namespace cassle {

inline constexpr const char* kVersionTag = "cassle-bench 0.1.0";

Method method_from_string(const std::string& s);
Strategy strategy_from_string(const std::string& s);
Regime regime_from_string(const std::string& s);

// One experiment = one (method, strategy, scenario, seed). Every field has a
// default; parsing fills them in and rejects unknown keys.
struct RunConfig {
  Method method = Method::kSimclr;
  Strategy strategy = Strategy::kFinetune;
  uint64_t seed = 0;

  // scenario
  Regime regime = Regime::kClassInc;
  int tasks = 2;
  int steps_per_task = 2000;
  int batch_size = 128;

  // data
  std::string data_source = "synthetic";  // or "cifar100"
  SyntheticSpec synthetic;                // .seed is derived from the run seed
  Index eval_per_class = 100;
  std::string cifar_path;
  Scalar cifar_eval_fraction = 0.2;

  // architecture
  std::vector<Index> backbone = {256, 256};
  std::vector<Index> projector = {128, 64};
  Index predictor_hidden = 0;  // 0 = 4x projector output
  Index head_hidden = 0;
  Index prototypes = 0;  // 0 = 4x n_classes (swav only)

  LossConfig losses;
  std::string distill_family = "auto";  // or an explicit family name

  OptimizerConfig optimizer;
  AugmentPolicy augment;

  Scalar ema_momentum = 0.99;
  Scalar ewc_lambda = 10.0;
  int ewc_fisher_batches = 16;
  bool predictor_reinit_per_task = true;

  int probe_epochs = 100;
  Scalar probe_lr = 0.3;
  int probe_batch = 256;
  Scalar label_fraction = 1.0;
  std::string task_aware = "auto";  // "auto" | "true" | "false"

  int knn_k = 20;
  Scalar knn_temperature = 0.07;

  int log_every = 10;

  void validate() const;
  nlohmann::json to_json() const;

  DistillFamily resolved_distill_family() const;
  bool resolved_task_aware() const;
  ArchSpec arch_spec(Index input_dim, Index n_classes) const;
  TrainConfig train_config() const;
  ProbeTrainConfig probe_config(uint64_t probe_seed) const;
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

}  // namespace cassle
