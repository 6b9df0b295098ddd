#include "cassle/gradcheck_suite.hpp"

#include <memory>

#include "cassle/distill.hpp"
#include "cassle/losses.hpp"
#include "cassle/rng.hpp"
#include "cassle/scenarios.hpp"

namespace cassle {

namespace {

Array random_array(Rng& rng, Index n, Scalar lo, Scalar hi) {
  Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// Values bounded away from zero (for relu kinks and divisions).
Array random_signed(Rng& rng, Index n, Scalar min_mag = 0.05, Scalar max_mag = 1.5) {
  Array a(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mag = rng.uniform(min_mag, max_mag);
    a[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return a;
}

// Reduce any tensor to a scalar with a fixed random weighting so the checked
// op sees a non-uniform incoming gradient.
Tensor weighted_scalar(Graph& g, const Tensor& t, uint64_t seed) {
  Rng rng(seed);
  Tensor w = g.constant(t.shape(), random_signed(rng, t.size(), 0.2, 1.0));
  return sum(mul(t, w));
}

struct OpCase {
  std::string name;
  // Builds the loss; receives per-instance rng for shapes handled outside.
  std::function<BuiltLoss(Graph&, const std::vector<Array>&)> build;
  std::vector<Array> inputs;
};

using CaseFactory = std::function<OpCase(Rng&)>;

GradCheckResult run_repeated(const std::string& name, const CaseFactory& factory,
                             int seeds, uint64_t master_seed) {
  GradCheckResult agg;
  agg.name = name;
  agg.passed = true;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(Rng::mix(master_seed, static_cast<uint64_t>(s)));
    OpCase c = factory(rng);
    GradCheckResult r = check_gradients(name, c.build, c.inputs);
    agg.passed = agg.passed && r.passed;
    agg.worst_abs_diff = std::max(agg.worst_abs_diff, r.worst_abs_diff);
    agg.inputs_checked += r.inputs_checked;
  }
  return agg;
}

Shape random_mat_shape(Rng& rng) {
  return Shape{2 + rng.uniform_int(7), 2 + rng.uniform_int(7)};  // 2..8 x 2..8
}

}  // namespace

std::vector<GradCheckResult> run_primitive_gradchecks(int seeds_per_op, uint64_t master_seed) {
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, const CaseFactory& f) {
    out.push_back(run_repeated(name, f, seeds_per_op, Rng::mix(master_seed, out.size())));
  };

  auto binary_case = [](OpKind op) {
    return [op](Rng& rng) {
      OpCase c;
      const Shape s = random_mat_shape(rng);
      const Index n = numel(s);
      const uint64_t wseed = rng.next_u64();
      c.inputs = {random_signed(rng, n), op == OpKind::kDiv ? random_signed(rng, n, 0.5, 2.0)
                                                            : random_signed(rng, n)};
      c.build = [op, s, wseed](Graph& g, const std::vector<Array>& v) {
        Tensor a = g.leaf(s, v[0], true);
        Tensor b = g.leaf(s, v[1], true);
        Tensor r;
        switch (op) {
          case OpKind::kAdd: r = add(a, b); break;
          case OpKind::kSub: r = sub(a, b); break;
          case OpKind::kMul: r = mul(a, b); break;
          case OpKind::kDiv: r = div(a, b); break;
          default: throw contract_error("bad op");
        }
        return BuiltLoss{weighted_scalar(g, r, wseed), {a, b}};
      };
      return c;
    };
  };
  run("add", binary_case(OpKind::kAdd));
  run("sub", binary_case(OpKind::kSub));
  run("mul", binary_case(OpKind::kMul));
  run("div", binary_case(OpKind::kDiv));

  run("matmul", [](Rng& rng) {
    OpCase c;
    const Index m = 2 + rng.uniform_int(5), k = 2 + rng.uniform_int(5), n = 2 + rng.uniform_int(5);
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, m * k), random_signed(rng, k * n)};
    c.build = [m, k, n, wseed](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(Shape{m, k}, v[0], true);
      Tensor b = g.leaf(Shape{k, n}, v[1], true);
      return BuiltLoss{weighted_scalar(g, matmul(a, b), wseed), {a, b}};
    };
    return c;
  });

  run("transpose", [](Rng& rng) {
    OpCase c;
    const Shape s = random_mat_shape(rng);
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, numel(s))};
    c.build = [s, wseed](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(s, v[0], true);
      return BuiltLoss{weighted_scalar(g, transpose(a), wseed), {a}};
    };
    return c;
  });

  struct UnaryDomain {
    OpKind op;
    Scalar lo, hi;
    bool signed_vals;
  };
  const std::vector<std::pair<std::string, UnaryDomain>> unaries = {
      {"exp", {OpKind::kExp, -1.5, 1.5, false}},
      {"log", {OpKind::kLog, 0.5, 2.5, false}},
      {"pow2", {OpKind::kPow2, -2.0, 2.0, false}},
      {"sqrt", {OpKind::kSqrt, 0.25, 4.0, false}},
      {"negate", {OpKind::kNegate, -2.0, 2.0, false}},
      {"relu", {OpKind::kRelu, 0.0, 0.0, true}},
  };
  for (const auto& [uname, dom] : unaries) {
    const UnaryDomain d = dom;
    run(uname, [d](Rng& rng) {
      OpCase c;
      const Shape s = random_mat_shape(rng);
      const uint64_t wseed = rng.next_u64();
      c.inputs = {d.signed_vals ? random_signed(rng, numel(s))
                                : random_array(rng, numel(s), d.lo, d.hi)};
      const OpKind op = d.op;
      c.build = [s, op, wseed](Graph& g, const std::vector<Array>& v) {
        Tensor a = g.leaf(s, v[0], true);
        Tensor r;
        switch (op) {
          case OpKind::kExp: r = exp(a); break;
          case OpKind::kLog: r = log(a); break;
          case OpKind::kPow2: r = pow2(a); break;
          case OpKind::kSqrt: r = sqrt(a); break;
          case OpKind::kNegate: r = negate(a); break;
          case OpKind::kRelu: r = relu(a); break;
          default: throw contract_error("bad op");
        }
        return BuiltLoss{weighted_scalar(g, r, wseed), {a}};
      };
      return c;
    });
  }

  for (int axis : {-1, 0, 1}) {
    for (bool is_mean : {false, true}) {
      const std::string name =
          std::string(is_mean ? "mean" : "sum") + "(axis=" + std::to_string(axis) + ")";
      run(name, [axis, is_mean](Rng& rng) {
        OpCase c;
        const Shape s = random_mat_shape(rng);
        const uint64_t wseed = rng.next_u64();
        c.inputs = {random_signed(rng, numel(s))};
        c.build = [s, axis, is_mean, wseed](Graph& g, const std::vector<Array>& v) {
          Tensor a = g.leaf(s, v[0], true);
          Tensor r = is_mean ? mean(a, axis, axis >= 0) : sum(a, axis, axis >= 0);
          return BuiltLoss{weighted_scalar(g, r, wseed), {a}};
        };
        return c;
      });
    }
  }

  for (int axis : {0, 1}) {
    run("concat(axis=" + std::to_string(axis) + ")", [axis](Rng& rng) {
      OpCase c;
      const Shape s = random_mat_shape(rng);
      Shape s2 = s;
      s2[static_cast<size_t>(axis)] = 1 + rng.uniform_int(4);
      const uint64_t wseed = rng.next_u64();
      c.inputs = {random_signed(rng, numel(s)), random_signed(rng, numel(s2))};
      c.build = [s, s2, axis, wseed](Graph& g, const std::vector<Array>& v) {
        Tensor a = g.leaf(s, v[0], true);
        Tensor b = g.leaf(s2, v[1], true);
        return BuiltLoss{weighted_scalar(g, concat({a, b}, axis), wseed), {a, b}};
      };
      return c;
    });
  }

  run("slice", [](Rng& rng) {
    OpCase c;
    const Shape s{4 + rng.uniform_int(5), 4 + rng.uniform_int(5)};
    const Index r0 = rng.uniform_int(2), c0 = rng.uniform_int(2);
    const Index nr = 2 + rng.uniform_int(s[0] - r0 - 1), nc = 2 + rng.uniform_int(s[1] - c0 - 1);
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, numel(s))};
    c.build = [=](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(s, v[0], true);
      return BuiltLoss{weighted_scalar(g, slice(a, r0, nr, c0, nc), wseed), {a}};
    };
    return c;
  });

  const std::vector<std::pair<std::string, int>> bcast_modes = {
      {"broadcast(row)", 0}, {"broadcast(col)", 1}, {"broadcast(scalar)", 2}};
  for (const auto& [bname, mode_val] : bcast_modes) {
    const int mode = mode_val;
    run(bname, [mode](Rng& rng) {
      OpCase c;
      const Shape target = random_mat_shape(rng);
      Shape src;
      if (mode == 0) src = Shape{1, target[1]};
      if (mode == 1) src = Shape{target[0], 1};
      if (mode == 2) src = Shape{};
      const uint64_t wseed = rng.next_u64();
      c.inputs = {random_signed(rng, numel(src))};
      c.build = [src, target, wseed](Graph& g, const std::vector<Array>& v) {
        Tensor a = g.leaf(src, v[0], true);
        return BuiltLoss{weighted_scalar(g, broadcast_to(a, target), wseed), {a}};
      };
      return c;
    });
  }

  run("l2_normalize", [](Rng& rng) {
    OpCase c;
    const Shape s = random_mat_shape(rng);
    const int axis = rng.uniform_int(2) == 0 ? 0 : 1;
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, numel(s), 0.3, 1.5)};
    c.build = [s, axis, wseed](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(s, v[0], true);
      return BuiltLoss{weighted_scalar(g, l2_normalize(a, axis), wseed), {a}};
    };
    return c;
  });

  run("standardize", [](Rng& rng) {
    OpCase c;
    const Shape s{3 + rng.uniform_int(6), 2 + rng.uniform_int(7)};
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, numel(s), 0.1, 2.0)};
    c.build = [s, wseed](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(s, v[0], true);
      return BuiltLoss{weighted_scalar(g, standardize(a), wseed), {a}};
    };
    return c;
  });

  run("logsumexp", [](Rng& rng) {
    OpCase c;
    const Shape s = random_mat_shape(rng);
    const int axis = rng.uniform_int(2) == 0 ? 0 : 1;
    const uint64_t wseed = rng.next_u64();
    c.inputs = {random_signed(rng, numel(s), 0.05, 3.0)};
    c.build = [s, axis, wseed](Graph& g, const std::vector<Array>& v) {
      Tensor a = g.leaf(s, v[0], true);
      return BuiltLoss{weighted_scalar(g, logsumexp(a, axis), wseed), {a}};
    };
    return c;
  });

  return out;
}

namespace {

// A small random predictor whose parameters take part in the check.
struct PredictorValues {
  Index dim, hidden;
  Array hw, hb, ow, ob;
};

PredictorValues random_predictor_values(Rng& rng, Index dim) {
  PredictorValues v;
  v.dim = dim;
  v.hidden = 2 * dim;
  auto fill = [&](Index n) {
    Array a(n);
    for (Index i = 0; i < n; ++i) a[i] = rng.uniform(-0.8, 0.8);
    return a;
  };
  v.hw = fill(dim * v.hidden);
  v.hb = fill(v.hidden);
  v.ow = fill(v.hidden * dim);
  v.ob = fill(dim);
  return v;
}

PredictorState predictor_from_values(const PredictorValues& shape, const Array& hw,
                                     const Array& hb, const Array& ow, const Array& ob) {
  PredictorState p = init_predictor(shape.dim, shape.hidden, 0);
  p.hidden.weight.value = hw;
  p.hidden.bias.value = hb;
  p.output.weight.value = ow;
  p.output.bias.value = ob;
  return p;
}

Array random_batch_values(Rng& rng, Index n) {
  Array a(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mag = rng.uniform(0.2, 1.5);
    a[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return a;
}

}  // namespace

std::vector<GradCheckResult> run_loss_gradchecks(int seeds_per_loss, uint64_t master_seed) {
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, const CaseFactory& f) {
    out.push_back(run_repeated(name, f, seeds_per_loss, Rng::mix(master_seed, out.size())));
  };

  auto batch_dims = [](Rng& rng) {
    return std::pair<Index, Index>{4 + rng.uniform_int(5), 3 + rng.uniform_int(6)};  // n<=8, d<=8
  };

  run("loss/infonce", [batch_dims](Rng& rng) {
    OpCase c;
    auto [n, d] = batch_dims(rng);
    LossConfig cfg;
    cfg.include_positive_in_denominator = rng.uniform() < 0.5;
    c.inputs = {random_batch_values(rng, n * d), random_batch_values(rng, n * d)};
    c.build = [n, d, cfg](Graph& g, const std::vector<Array>& v) {
      Tensor zA = g.leaf(Shape{n, d}, v[0], true);
      Tensor zB = g.leaf(Shape{n, d}, v[1], true);
      return BuiltLoss{infonce_loss(g, zA, zB, cfg), {zA, zB}};
    };
    return c;
  });

  run("loss/negative_cosine", [batch_dims](Rng& rng) {
    OpCase c;
    auto [n, d] = batch_dims(rng);
    c.inputs = {random_batch_values(rng, n * d)};
    const Array target = random_batch_values(rng, n * d);
    c.build = [n, d, target](Graph& g, const std::vector<Array>& v) {
      Tensor q = g.leaf(Shape{n, d}, v[0], true);
      Tensor z = g.constant(Shape{n, d}, target);
      return BuiltLoss{negative_cosine_loss(g, q, z), {q}};
    };
    return c;
  });

  run("loss/prototype_ce", [batch_dims](Rng& rng) {
    OpCase c;
    auto [n, d] = batch_dims(rng);
    const Index k = 3 + rng.uniform_int(4);
    LossConfig cfg;
    AssignmentMatrix targets = sinkhorn_assignments(
        unflatten(random_batch_values(rng, n * k), n, k), cfg);
    c.inputs = {random_batch_values(rng, n * d), random_batch_values(rng, k * d)};
    c.build = [n, d, k, cfg, targets](Graph& g, const std::vector<Array>& v) {
      Tensor z = g.leaf(Shape{n, d}, v[0], true);
      // the prototype bank is trainable: its gradient is checked too
      auto bank = std::make_shared<PrototypeBank>();
      bank->name = "bank";
      bank->shape = {k, d};
      bank->value = v[1];
      bank->trainable = true;
      Tensor loss = prototype_ce_loss(g, z, targets, *bank, cfg);
      Tensor bank_leaf = g.bound_tensor(bank.get());
      return BuiltLoss{loss, {z, bank_leaf}};
    };
    return c;
  });

  run("loss/barlow_twins", [batch_dims](Rng& rng) {
    OpCase c;
    auto [n, d] = batch_dims(rng);
    LossConfig cfg;
    c.inputs = {random_batch_values(rng, n * d), random_batch_values(rng, n * d)};
    c.build = [n, d, cfg](Graph& g, const std::vector<Array>& v) {
      Tensor zA = g.leaf(Shape{n, d}, v[0], true);
      Tensor zB = g.leaf(Shape{n, d}, v[1], true);
      return BuiltLoss{barlow_twins_loss(g, zA, zB, cfg), {zA, zB}};
    };
    return c;
  });

  auto distill_case = [batch_dims](DistillFamily family) {
    return [batch_dims, family](Rng& rng) {
      OpCase c;
      auto [n, d] = batch_dims(rng);
      const PredictorValues pv = random_predictor_values(rng, d);
      const Array zbar = random_batch_values(rng, n * d);
      const Index k = 4;
      Array bank_values = random_batch_values(rng, k * d);
      LossConfig cfg;
      c.inputs = {random_batch_values(rng, n * d), pv.hw, pv.hb, pv.ow, pv.ob};
      c.build = [=](Graph& g, const std::vector<Array>& v) {
        auto pred = std::make_shared<PredictorState>(
            predictor_from_values(pv, v[1], v[2], v[3], v[4]));
        Tensor z = g.leaf(Shape{n, d}, v[0], true);
        Tensor zb = g.constant(Shape{n, d}, zbar);
        Tensor loss;
        std::shared_ptr<PrototypeBank> bank;
        switch (family) {
          case DistillFamily::kContrastive:
            loss = distill_contrastive(g, z, zb, pred.get(), cfg);
            break;
          case DistillFamily::kMse:
            loss = distill_mse(g, z, zb, pred.get());
            break;
          case DistillFamily::kPrototypeCe:
            bank = std::make_shared<PrototypeBank>();
            bank->name = "frozen bank";
            bank->shape = {k, d};
            bank->value = bank_values;
            bank->trainable = false;
            loss = distill_prototype_ce(g, z, zb, pred.get(), *bank, cfg);
            break;
          case DistillFamily::kCrossCorrelation:
            loss = distill_cross_correlation(g, z, zb, pred.get(), cfg);
            break;
        }
        BuiltLoss built;
        built.loss = loss;
        built.wrt = {z, g.bound_tensor(&pred->hidden.weight), g.bound_tensor(&pred->hidden.bias),
                     g.bound_tensor(&pred->output.weight), g.bound_tensor(&pred->output.bias)};
        return built;
      };
      return c;
    };
  };
  run("loss/distill_contrastive", distill_case(DistillFamily::kContrastive));
  run("loss/distill_mse", distill_case(DistillFamily::kMse));
  run("loss/distill_prototype_ce", distill_case(DistillFamily::kPrototypeCe));
  run("loss/distill_cross_correlation", distill_case(DistillFamily::kCrossCorrelation));

  run("loss/ewc_penalty", [](Rng& rng) {
    OpCase c;
    ArchSpec arch;
    arch.input_dim = 3;
    arch.backbone = {4};
    arch.projector = {3};
    const uint64_t enc_seed = rng.next_u64();
    EncoderState proto = init_encoder(arch, enc_seed);
    Array anchor0 = proto.backbone[0].weight.value;
    for (Index i = 0; i < anchor0.size(); ++i) anchor0[i] += 0.3 * rng.normal();
    Array fisher0(anchor0.size());
    for (Index i = 0; i < fisher0.size(); ++i) fisher0[i] = rng.uniform(0.0, 2.0);
    c.inputs = {proto.backbone[0].weight.value};
    c.build = [arch, enc_seed, anchor0, fisher0](Graph& g, const std::vector<Array>& v) {
      auto enc = std::make_shared<EncoderState>(init_encoder(arch, enc_seed));
      enc->backbone[0].weight.value = v[0];
      FisherDiagonal fisher;
      for (Param* p : enc->params()) {
        fisher.anchor[p] = p->value;
        fisher.importance[p] = Array::Zero(p->value.size());
      }
      fisher.anchor[&enc->backbone[0].weight] = anchor0;
      fisher.importance[&enc->backbone[0].weight] = fisher0;
      Tensor loss = ewc_penalty(g, *enc, fisher, 1.7);
      Tensor w = g.bound_tensor(&enc->backbone[0].weight);
      return BuiltLoss{loss, {w}};
    };
    return c;
  });

  run("loss/probe_softmax_ce", [batch_dims](Rng& rng) {
    OpCase c;
    auto [n, d] = batch_dims(rng);
    const Index classes = 3 + rng.uniform_int(4);
    std::vector<int> labels(static_cast<size_t>(n));
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(classes));
    const Array features = random_batch_values(rng, n * d);
    c.inputs = {random_batch_values(rng, d * classes), random_batch_values(rng, classes)};
    c.build = [n, d, classes, labels, features](Graph& g, const std::vector<Array>& v) {
      Tensor x = g.constant(Shape{n, d}, features);
      Tensor w = g.leaf(Shape{d, classes}, v[0], true);
      Tensor b = g.leaf(Shape{classes}, v[1], true);
      Tensor logits = add(matmul(x, w), broadcast_to(b, Shape{n, classes}));
      return BuiltLoss{softmax_cross_entropy(g, logits, labels), {w, b}};
    };
    return c;
  });

  return out;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

}  // namespace cassle
