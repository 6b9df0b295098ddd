#include "cassle/scenarios.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cassle/rng.hpp"

namespace cassle {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kClassInc: return "class";
    case Regime::kDataInc: return "data";
    case Regime::kDomainInc: return "domain";
  }
  return "?";
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFinetune: return "finetune";
    case Strategy::kCassle: return "cassle";
    case Strategy::kEwc: return "ewc";
    case Strategy::kCassleSwap: return "cassle_swap";
    case Strategy::kCassleNopred: return "cassle_nopred";
  }
  return "?";
}

bool strategy_distills(Strategy s) {
  return s == Strategy::kCassle || s == Strategy::kCassleSwap || s == Strategy::kCassleNopred;
}

AblationFlags strategy_flags(Strategy s) {
  AblationFlags flags;
  if (s == Strategy::kCassleSwap) flags.swap_views = true;
  if (s == Strategy::kCassleNopred) flags.use_predictor = false;
  return flags;
}

// ---------------------------------------------------------------------------
// Splitters
// ---------------------------------------------------------------------------

namespace {

LabeledDataset take_rows(const LabeledDataset& ds, const std::vector<Index>& rows) {
  LabeledDataset out;
  out.samples.resize(static_cast<Index>(rows.size()), ds.dim());
  out.labels.reserve(rows.size());
  if (ds.has_domains()) out.domain_ids.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    out.samples.row(static_cast<Index>(i)) = ds.samples.row(rows[i]);
    out.labels.push_back(ds.labels[static_cast<size_t>(rows[i])]);
    if (ds.has_domains()) out.domain_ids.push_back(ds.domain_ids[static_cast<size_t>(rows[i])]);
  }
  return out;
}

}  // namespace

TaskStream split_class_incremental(const LabeledDataset& ds, int tasks, uint64_t seed) {
  ds.validate();
  if (tasks < 1) throw config_error("task count must be >= 1");
  std::vector<int> classes = ds.labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (static_cast<int>(classes.size()) < tasks)
    throw config_error("class-incremental split needs at least T classes");

  Rng rng(Rng::mix(seed, 0xC1A5/*class*/));
  rng.shuffle(classes);

  TaskStream stream;
  const size_t base = classes.size() / static_cast<size_t>(tasks);
  const size_t extra = classes.size() % static_cast<size_t>(tasks);
  size_t at = 0;
  for (int t = 0; t < tasks; ++t) {
    const size_t count = base + (static_cast<size_t>(t) < extra ? 1 : 0);
    std::vector<int> group(classes.begin() + static_cast<long>(at),
                           classes.begin() + static_cast<long>(at + count));
    at += count;
    std::sort(group.begin(), group.end());
    std::vector<Index> rows;
    for (Index i = 0; i < ds.size(); ++i)
      if (std::binary_search(group.begin(), group.end(), ds.labels[static_cast<size_t>(i)]))
        rows.push_back(i);
    stream.tasks.push_back(take_rows(ds, rows));
    stream.class_sets.push_back(std::move(group));
  }
  return stream;
}

TaskStream split_data_incremental(const LabeledDataset& ds, int tasks, uint64_t seed) {
  ds.validate();
  if (tasks < 1) throw config_error("task count must be >= 1");
  if (ds.size() < tasks) throw config_error("data-incremental split needs at least T samples");

  std::vector<Index> order(static_cast<size_t>(ds.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(seed, 0xDA7A1/*data*/));
  rng.shuffle(order);

  TaskStream stream;
  const size_t n = order.size();
  const size_t base = n / static_cast<size_t>(tasks);
  const size_t extra = n % static_cast<size_t>(tasks);
  size_t at = 0;
  for (int t = 0; t < tasks; ++t) {
    const size_t count = base + (static_cast<size_t>(t) < extra ? 1 : 0);
    std::vector<Index> rows(order.begin() + static_cast<long>(at),
                            order.begin() + static_cast<long>(at + count));
    at += count;
    stream.tasks.push_back(take_rows(ds, rows));
    std::vector<int> classes = stream.tasks.back().labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    stream.class_sets.push_back(std::move(classes));
  }
  return stream;
}

TaskStream split_domain_incremental(const LabeledDataset& ds, uint64_t seed) {
  ds.validate();
  (void)seed;  // grouping is fully determined by the domain ids
  if (!ds.has_domains())
    throw config_error("domain-incremental split needs domain ids");

  std::vector<int> domains = ds.domain_ids;
  std::sort(domains.begin(), domains.end());
  domains.erase(std::unique(domains.begin(), domains.end()), domains.end());

  std::vector<std::pair<Index, int>> sized;  // (count, domain), sorted desc by count
  for (int d : domains) {
    Index count = 0;
    for (int id : ds.domain_ids)
      if (id == d) ++count;
    sized.emplace_back(count, d);
  }
  std::sort(sized.begin(), sized.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  TaskStream stream;
  for (const auto& [count, d] : sized) {
    (void)count;
    std::vector<Index> rows;
    for (Index i = 0; i < ds.size(); ++i)
      if (ds.domain_ids[static_cast<size_t>(i)] == d) rows.push_back(i);
    stream.tasks.push_back(take_rows(ds, rows));
    std::vector<int> classes = stream.tasks.back().labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    stream.class_sets.push_back(std::move(classes));
  }
  return stream;
}

TaskStream split_stream(const LabeledDataset& ds, Regime regime, int tasks, uint64_t seed) {
  switch (regime) {
    case Regime::kClassInc: return split_class_incremental(ds, tasks, seed);
    case Regime::kDataInc: return split_data_incremental(ds, tasks, seed);
    case Regime::kDomainInc: return split_domain_incremental(ds, seed);
  }
  throw config_error("unknown regime");
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

void AugmentPolicy::validate() const {
  auto prob_ok = [](Scalar p) { return p >= 0.0 && p <= 1.0; };
  if (!prob_ok(noise_prob) || !prob_ok(mask_prob) || !prob_ok(scale_prob) || !prob_ok(rotate_prob))
    throw config_error("augment probabilities must lie in [0, 1]");
  if (noise_std < 0.0) throw config_error("augment.noise_std must be >= 0");
  if (mask_rate < 0.0 || mask_rate > 1.0) throw config_error("augment.mask_rate must be in [0, 1]");
  if (scale_min <= 0.0 || scale_max < scale_min)
    throw config_error("augment scale range invalid");
  if (rotate_max_angle < 0.0) throw config_error("augment.rotate_max_angle must be >= 0");
  if (rotate_planes < 0) throw config_error("augment.rotate_planes must be >= 0");
}

Eigen::VectorXd augment_view(const Eigen::VectorXd& x, const AugmentPolicy& policy,
                             uint64_t sample_index, uint64_t draw_index) {
  policy.validate();
  Rng rng(Rng::mix(Rng::mix(policy.seed, sample_index), 0xA06, draw_index));
  Eigen::VectorXd v = x;
  const Index dim = v.size();

  if (policy.scale_prob > 0.0 && rng.uniform() < policy.scale_prob)
    v *= rng.uniform(policy.scale_min, policy.scale_max);

  if (policy.rotate_prob > 0.0 && rng.uniform() < policy.rotate_prob && dim >= 2) {
    for (int p = 0; p < policy.rotate_planes; ++p) {
      const Index i = rng.uniform_int(dim);
      Index j = rng.uniform_int(dim - 1);
      if (j >= i) ++j;
      const Scalar theta = rng.uniform(-policy.rotate_max_angle, policy.rotate_max_angle);
      const Scalar c = std::cos(theta), s = std::sin(theta);
      const Scalar vi = v[i], vj = v[j];
      v[i] = c * vi - s * vj;
      v[j] = s * vi + c * vj;
    }
  }

  if (policy.noise_prob > 0.0 && rng.uniform() < policy.noise_prob && policy.noise_std > 0.0) {
    for (Index i = 0; i < dim; ++i) v[i] += policy.noise_std * rng.normal();
  }

  if (policy.mask_prob > 0.0 && rng.uniform() < policy.mask_prob && policy.mask_rate > 0.0) {
    for (Index i = 0; i < dim; ++i)
      if (rng.uniform() < policy.mask_rate) v[i] = 0.0;
  }
  return v;
}

ViewPair augment_pair(const MatrixRM& batch, const std::vector<Index>& sample_indices,
                      const AugmentPolicy& policy, uint64_t draw_base) {
  if (static_cast<Index>(sample_indices.size()) != batch.rows())
    throw shape_error("augment_pair: sample index count mismatch");
  ViewPair out;
  out.a.resize(batch.rows(), batch.cols());
  out.b.resize(batch.rows(), batch.cols());
  for (Index r = 0; r < batch.rows(); ++r) {
    const Eigen::VectorXd x = batch.row(r).transpose();
    const uint64_t sample = static_cast<uint64_t>(sample_indices[static_cast<size_t>(r)]);
    out.a.row(r) = augment_view(x, policy, sample, 2 * draw_base).transpose();
    out.b.row(r) = augment_view(x, policy, sample, 2 * draw_base + 1).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

void OptimizerConfig::validate() const {
  if (lr <= 0.0) throw config_error("optimizer.lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw config_error("optimizer.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw config_error("optimizer.weight_decay must be >= 0");
  if (lars_eta <= 0.0) throw config_error("optimizer.lars_eta must be positive");
  if (eps < 0.0) throw config_error("optimizer.eps must be >= 0");
}

Scalar cosine_lr(Scalar base_lr, int step, int total_steps) {
  if (total_steps <= 1) return base_lr;
  const Scalar t = static_cast<Scalar>(step) / static_cast<Scalar>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

void optimizer_step(const std::vector<Param*>& params, const GradientMap& grads,
                    const OptimizerConfig& cfg, OptimizerState& state, Scalar lr_now) {
  cfg.validate();
  // Abort the whole step before mutating anything if any gradient is bad.
  for (Param* p : params) {
    const Array* g = grads.find_key(p);
    if (g != nullptr && !g->allFinite())
      throw numeric_error("non-finite gradient for " + p->name + "; step aborted");
  }
  for (Param* p : params) {
    if (!p->trainable) continue;
    const Array* gp = grads.find_key(p);
    if (gp == nullptr) continue;  // not reached by this loss
    const Array& grad = *gp;

    const bool bias_like = p->is_bias_like();
    const Scalar wd = bias_like ? 0.0 : cfg.weight_decay;
    Array update = grad + wd * p->value;

    Scalar local_lr = 1.0;
    if (cfg.kind == OptimizerKind::kLars && !bias_like) {
      const Scalar w_norm = std::sqrt(p->value.square().sum());
      const Scalar g_norm = std::sqrt(grad.square().sum());
      if (w_norm > 0.0 && g_norm > 0.0)
        local_lr = cfg.lars_eta * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.eps);
    }

    Array& v = state.velocity.try_emplace(p, Array::Zero(p->value.size())).first->second;
    v = cfg.momentum * v + lr_now * local_lr * update;
    p->value -= v;
  }
}

// ---------------------------------------------------------------------------
// EWC
// ---------------------------------------------------------------------------

Tensor ewc_penalty(Graph& g, EncoderState& enc, const FisherDiagonal& fisher, Scalar lambda) {
  Tensor total = g.constant(0.0);
  for (Param* p : enc.params()) {
    if (!p->trainable) continue;
    auto fit = fisher.importance.find(p);
    auto ait = fisher.anchor.find(p);
    if (fit == fisher.importance.end() || ait == fisher.anchor.end()) continue;
    if (fit->second.size() != p->value.size() || ait->second.size() != p->value.size())
      throw shape_error("fisher shape mismatch for " + p->name);
    Tensor theta = g.bind(p, p->shape, p->value, p->trainable);
    Tensor drift = sub(theta, g.constant(p->shape, ait->second));
    Tensor weighted = mul(pow2(drift), g.constant(p->shape, fit->second));
    total = add(total, sum(weighted));
  }
  return scale(total, 0.5 * lambda);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::vector<Param*> TrainerState::trainable_params(bool include_predictor) {
  std::vector<Param*> out = encoder.params();
  if (include_predictor && predictor) {
    for (Param* p : predictor->params()) out.push_back(p);
  }
  return out;
}

TrainerState init_trainer(const ArchSpec& arch, Method method, uint64_t seed,
                          Scalar ema_momentum) {
  TrainerState st;
  ArchSpec a = arch;
  if (method == Method::kSwav && a.prototypes <= 0)
    throw config_error("swav needs a prototype bank (arch.prototypes > 0)");
  if (method != Method::kSwav) a.prototypes = 0;
  st.encoder = init_encoder(a, seed, /*with_head=*/method == Method::kByol);
  if (method == Method::kByol) st.ema = init_ema(st.encoder, ema_momentum);
  st.run_seed = seed;
  return st;
}

void begin_task(TrainerState& state, int task_index, const TrainConfig& cfg) {
  state.opt_state.velocity.clear();  // schedule restarts at the boundary
  if (!strategy_distills(cfg.strategy) || task_index < 2) return;
  state.frozen = snapshot_frozen(state.encoder);
  if (strategy_flags(cfg.strategy).use_predictor &&
      (cfg.method.reinit_predictor_per_task || !state.predictor)) {
    state.predictor = init_predictor(
        state.encoder.arch.proj_dim(), cfg.method.predictor_hidden,
        Rng::mix(state.run_seed, 0x96ED, static_cast<uint64_t>(task_index)));
  }
}

namespace {

class BatchSampler {
 public:
  BatchSampler(Index n, Index batch, Rng rng)
      : n_(n), batch_(std::min(batch, n)), rng_(rng), order_(static_cast<size_t>(n)) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }

  std::vector<Index> next() {
    std::vector<Index> out;
    out.reserve(static_cast<size_t>(batch_));
    for (Index i = 0; i < batch_; ++i) {
      if (at_ == order_.size()) {
        rng_.shuffle(order_);
        at_ = 0;
      }
      out.push_back(order_[at_++]);
    }
    return out;
  }

 private:
  Index n_, batch_;
  Rng rng_;
  std::vector<Index> order_;
  size_t at_ = 0;
};

MatrixRM normalized_rows(const Array& values, Index rows, Index cols) {
  MatrixRM m = unflatten(values, rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Scalar n = m.row(i).norm();
    if (n < 1e-12) throw degenerate_input("projection with near-zero norm");
    m.row(i) /= n;
  }
  return m;
}

// SwAV targets: balanced assignments of each view against the live bank,
// computed on detached values.
AssignmentMatrix swav_targets(const Tensor& z, const PrototypeBank& bank, const LossConfig& cfg) {
  MatrixRM zn = normalized_rows(z.value(), z.rows(), z.cols());
  MatrixRM cn = normalized_rows(bank.value, bank.shape[0], bank.shape[1]);
  MatrixRM scores = zn * cn.transpose();
  return sinkhorn_assignments(scores, cfg);
}

struct StepLoss {
  Scalar ssl = 0.0;
  Scalar distill = 0.0;
  Scalar total = 0.0;
};

StepLoss run_one_step(TrainerState& state, const TrainConfig& cfg, const MatrixRM& view_a,
                      const MatrixRM& view_b, bool distills, Scalar lr_now) {
  Graph g;
  StepInputs in;
  in.method = cfg.method.method;
  in.distill_family = cfg.method.distill_family;
  in.cfg = cfg.method.loss;
  in.flags = strategy_flags(cfg.strategy);

  Tensor xA = g.constant_matrix(view_a);
  Tensor xB = g.constant_matrix(view_b);
  in.zA = encode(g, state.encoder, xA).projection;
  in.zB = encode(g, state.encoder, xB).projection;

  if (cfg.method.method == Method::kByol) {
    in.qA = head_forward(g, state.encoder, in.zA);
    in.qB = head_forward(g, state.encoder, in.zB);
    in.emaA = encode(g, state.ema->shadow, xA).projection;
    in.emaB = encode(g, state.ema->shadow, xB).projection;
  }
  if (cfg.method.method == Method::kSwav) {
    in.live_bank = &*state.encoder.prototype_bank;
    in.assignA = swav_targets(in.zA, *in.live_bank, in.cfg);
    in.assignB = swav_targets(in.zB, *in.live_bank, in.cfg);
  }
  if (distills) {
    in.zbarA = encode(g, state.frozen->encoder, xA).projection;
    in.zbarB = encode(g, state.frozen->encoder, xB).projection;
    in.frozen_bank = state.frozen->bank();
    if (strategy_flags(cfg.strategy).use_predictor) in.predictor = &*state.predictor;
  }

  TotalLoss tl = cassle_total_loss(g, in);
  Tensor objective = tl.total;
  if (cfg.strategy == Strategy::kEwc && state.fisher)
    objective = add(objective, ewc_penalty(g, state.encoder, *state.fisher, cfg.ewc_lambda));

  if (!std::isfinite(objective.scalar())) throw numeric_error("non-finite loss");

  GradientMap grads = g.backward(objective);
  auto params = state.trainable_params(distills && strategy_flags(cfg.strategy).use_predictor);
  optimizer_step(params, grads, cfg.optimizer, state.opt_state, lr_now);
  if (state.ema) ema_update(*state.ema, state.encoder);

  return {tl.ssl_value(), tl.distill_value(), objective.scalar()};
}

}  // namespace

TaskLog train_task(TrainerState& state, const LabeledDataset& task, int task_index,
                   const TrainConfig& cfg) {
  cfg.optimizer.validate();
  cfg.method.loss.validate();
  cfg.augment.validate();

  TaskLog log;
  const bool distills = strategy_distills(cfg.strategy) && task_index >= 2;
  if (distills && !state.frozen)
    throw contract_error("train_task: distilling strategy without a frozen snapshot");
  if (distills && strategy_flags(cfg.strategy).use_predictor && !state.predictor)
    throw contract_error("train_task: predictor missing");
  if (state.frozen) log.frozen_digest = state.frozen->digest;
  if (cfg.steps_per_task <= 0) return log;  // zero budget: state untouched

  AugmentPolicy policy = cfg.augment;
  policy.seed = Rng::mix(policy.seed, Rng::mix(state.run_seed, 0xA0632, static_cast<uint64_t>(task_index)));
  BatchSampler sampler(task.size(), cfg.batch_size,
                       Rng(Rng::mix(state.run_seed, 0xBA7C4, static_cast<uint64_t>(task_index))));

  try {
    for (int step = 0; step < cfg.steps_per_task; ++step) {
      const Scalar lr_now = cfg.optimizer.cosine_schedule
                                ? cosine_lr(cfg.optimizer.lr, step, cfg.steps_per_task)
                                : cfg.optimizer.lr;
      const std::vector<Index> idx = sampler.next();
      const MatrixRM raw = task.gather(idx);
      const ViewPair views = augment_pair(raw, idx, policy, static_cast<uint64_t>(step));
      const StepLoss losses = run_one_step(state, cfg, views.a, views.b, distills, lr_now);
      if (step % cfg.log_every == 0 || step + 1 == cfg.steps_per_task)
        log.entries.push_back({step, losses.ssl, losses.distill, losses.total});
    }
  } catch (const Error& e) {
    log.completed = false;
    log.error = e.what();
  }
  return log;
}

FisherDiagonal estimate_fisher(TrainerState& state, const LabeledDataset& task,
                               const TrainConfig& cfg, int n_batches) {
  if (n_batches < 1) throw config_error("fisher estimation needs n_batches >= 1");
  FisherDiagonal fd;
  auto params = state.encoder.params();
  for (Param* p : params) {
    fd.importance[p] = Array::Zero(p->value.size());
    fd.anchor[p] = p->value;
  }

  AugmentPolicy policy = cfg.augment;
  policy.seed = Rng::mix(policy.seed, Rng::mix(state.run_seed, 0xF15E6, 1));
  BatchSampler sampler(task.size(), cfg.batch_size,
                       Rng(Rng::mix(state.run_seed, 0xF15E6, 2)));

  for (int b = 0; b < n_batches; ++b) {
    const std::vector<Index> idx = sampler.next();
    const MatrixRM raw = task.gather(idx);
    const ViewPair views = augment_pair(raw, idx, policy, static_cast<uint64_t>(b));

    Graph g;
    StepInputs in;
    in.method = cfg.method.method;
    in.cfg = cfg.method.loss;
    Tensor xA = g.constant_matrix(views.a);
    Tensor xB = g.constant_matrix(views.b);
    in.zA = encode(g, state.encoder, xA).projection;
    in.zB = encode(g, state.encoder, xB).projection;
    if (cfg.method.method == Method::kByol) {
      in.qA = head_forward(g, state.encoder, in.zA);
      in.qB = head_forward(g, state.encoder, in.zB);
      in.emaA = encode(g, state.ema->shadow, xA).projection;
      in.emaB = encode(g, state.ema->shadow, xB).projection;
    }
    if (cfg.method.method == Method::kSwav) {
      in.live_bank = &*state.encoder.prototype_bank;
      in.assignA = swav_targets(in.zA, *in.live_bank, in.cfg);
      in.assignB = swav_targets(in.zB, *in.live_bank, in.cfg);
    }
    GradientMap grads = g.backward(ssl_loss_term(g, in));
    for (Param* p : params) {
      const Array* gp = grads.find_key(p);
      if (gp != nullptr) fd.importance[p] += gp->square();
    }
  }
  for (auto& [p, imp] : fd.importance) imp /= static_cast<Scalar>(n_batches);
  return fd;
}

}  // namespace cassle
