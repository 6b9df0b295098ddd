#pragma once

#include <optional>
#include <unordered_map>

#include "cassle/data.hpp"
#include "cassle/distill.hpp"

namespace cassle {

enum class Regime { kClassInc, kDataInc, kDomainInc };
enum class Strategy { kFinetune, kCassle, kEwc, kCassleSwap, kCassleNopred };

const char* regime_name(Regime r);
const char* strategy_name(Strategy s);
bool strategy_distills(Strategy s);
AblationFlags strategy_flags(Strategy s);

struct TaskStream {
  std::vector<LabeledDataset> tasks;         // D_1..D_T
  std::vector<std::vector<int>> class_sets;  // Y_t (class-incremental)

  int size() const { return static_cast<int>(tasks.size()); }
};

// Seeded shuffle of class ids, contiguous partition into T near-equal groups
// (sizes differ by at most one class).
TaskStream split_class_incremental(const LabeledDataset& ds, int tasks, uint64_t seed);
// Seeded sample-level shuffle into T near-equal disjoint chunks.
TaskStream split_data_incremental(const LabeledDataset& ds, int tasks, uint64_t seed);
// One task per domain, ordered by decreasing sample count, ties by domain id.
TaskStream split_domain_incremental(const LabeledDataset& ds, uint64_t seed);

TaskStream split_stream(const LabeledDataset& ds, Regime regime, int tasks, uint64_t seed);

// ---------------------------------------------------------------------------
// Stochastic augmentation in input-vector space
// ---------------------------------------------------------------------------

struct AugmentPolicy {
  Scalar noise_std = 0.1;
  Scalar noise_prob = 1.0;
  Scalar mask_rate = 0.1;
  Scalar mask_prob = 0.5;
  Scalar scale_min = 0.9;
  Scalar scale_max = 1.1;
  Scalar scale_prob = 0.5;
  Scalar rotate_prob = 0.5;
  Scalar rotate_max_angle = 0.4;
  int rotate_planes = 4;
  uint64_t seed = 0;

  void validate() const;
};

// One stochastic view; bitwise deterministic in (policy.seed, sample_index,
// draw_index). Transforms fire independently with their probabilities, in the
// order scale, rotate, noise, mask.
Eigen::VectorXd augment_view(const Eigen::VectorXd& x, const AugmentPolicy& policy,
                             uint64_t sample_index, uint64_t draw_index);

struct ViewPair {
  MatrixRM a;
  MatrixRM b;
};

// Two independent draws per row. draw_base distinguishes training steps.
ViewPair augment_pair(const MatrixRM& batch, const std::vector<Index>& sample_indices,
                      const AugmentPolicy& policy, uint64_t draw_base);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

enum class OptimizerKind { kLars, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kLars;
  Scalar lr = 0.4;
  Scalar momentum = 0.9;
  Scalar weight_decay = 1e-5;
  Scalar lars_eta = 0.02;
  Scalar eps = 1e-8;
  bool cosine_schedule = true;  // restarted at every task boundary

  void validate() const;
};

struct OptimizerState {
  std::unordered_map<const Param*, Array> velocity;
};

// LARS per parameter: local_lr = eta * ||w|| / (||grad|| + wd * ||w|| + eps)
// when both norms are positive, else 1; v <- momentum * v + lr * local_lr *
// (grad + wd * w); w <- w - v. Bias-like (rank-1) parameters skip trust
// scaling and weight decay. SGD drops the trust ratio.
void optimizer_step(const std::vector<Param*>& params, const GradientMap& grads,
                    const OptimizerConfig& cfg, OptimizerState& state, Scalar lr_now);

Scalar cosine_lr(Scalar base_lr, int step, int total_steps);

// ---------------------------------------------------------------------------
// EWC
// ---------------------------------------------------------------------------

struct FisherDiagonal {
  std::unordered_map<const Param*, Array> importance;  // mean squared SSL gradient
  std::unordered_map<const Param*, Array> anchor;      // theta* at estimation time
};

// (lambda/2) * sum_i F_i (theta_i - theta*_i)^2 over the encoder parameters
// bound on `g`.
Tensor ewc_penalty(Graph& g, EncoderState& enc, const FisherDiagonal& fisher, Scalar lambda);

// ---------------------------------------------------------------------------
// Per-task training
// ---------------------------------------------------------------------------

struct MethodConfig {
  Method method = Method::kSimclr;
  LossConfig loss;
  DistillFamily distill_family = DistillFamily::kContrastive;  // live family default
  Scalar ema_momentum = 0.99;
  Index predictor_hidden = 0;  // 0 = 4x projector dim
  bool reinit_predictor_per_task = true;
};

struct TrainConfig {
  Strategy strategy = Strategy::kFinetune;
  MethodConfig method;
  OptimizerConfig optimizer;
  AugmentPolicy augment;
  int steps_per_task = 2000;
  int batch_size = 128;
  Scalar ewc_lambda = 10.0;
  int ewc_fisher_batches = 16;
  int log_every = 10;
};

struct TrainLogEntry {
  int step;
  Scalar ssl;
  Scalar distill;
  Scalar total;
};

struct TaskLog {
  std::vector<TrainLogEntry> entries;
  bool completed = true;
  std::string error;
  std::string frozen_digest;  // digest of the frozen encoder used, if any
};

// The model as it evolves across tasks.
struct TrainerState {
  EncoderState encoder;
  std::optional<EmaState> ema;              // byol
  std::optional<PredictorState> predictor;  // cassle, task >= 2
  std::optional<FrozenEncoder> frozen;      // task >= 2
  std::optional<FisherDiagonal> fisher;     // ewc
  OptimizerState opt_state;
  uint64_t run_seed = 0;

  std::vector<Param*> trainable_params(bool include_predictor);
};

TrainerState init_trainer(const ArchSpec& arch, Method method, uint64_t seed,
                          Scalar ema_momentum);

// Runs the task's step budget. For distilling strategies and task_index >= 2
// the caller must have installed a frozen snapshot (begin_task does).
TaskLog train_task(TrainerState& state, const LabeledDataset& task, int task_index,
                   const TrainConfig& cfg);

// Task-boundary bookkeeping: freezes a snapshot (and re-inits the predictor)
// for distilling strategies, resets optimizer state for the cosine restart.
void begin_task(TrainerState& state, int task_index, const TrainConfig& cfg);

// Mean squared gradient of the symmetrized SSL loss over n_batches batches;
// anchors at the current parameters.
FisherDiagonal estimate_fisher(TrainerState& state, const LabeledDataset& task,
                               const TrainConfig& cfg, int n_batches);

}  // namespace cassle
