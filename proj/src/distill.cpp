#include "cassle/distill.hpp"

#include <cmath>

#include "cassle/checkpoint.hpp"

namespace cassle {

DistillFamily family_of(Method m) {
  switch (m) {
    case Method::kSimclr: return DistillFamily::kContrastive;
    case Method::kBarlow: return DistillFamily::kCrossCorrelation;
    case Method::kByol: return DistillFamily::kMse;
    case Method::kSwav: return DistillFamily::kPrototypeCe;
  }
  throw config_error("unknown method");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kSimclr: return "simclr";
    case Method::kBarlow: return "barlow";
    case Method::kByol: return "byol";
    case Method::kSwav: return "swav";
  }
  return "?";
}

const char* family_name(DistillFamily f) {
  switch (f) {
    case DistillFamily::kContrastive: return "contrastive";
    case DistillFamily::kMse: return "mse";
    case DistillFamily::kPrototypeCe: return "prototype_ce";
    case DistillFamily::kCrossCorrelation: return "cross_correlation";
  }
  return "?";
}

FrozenEncoder snapshot_frozen(const EncoderState& enc) {
  FrozenEncoder frozen;
  frozen.encoder = enc;  // deep copy
  frozen.encoder.set_trainable(false);
  frozen.digest = encoder_digest(enc);
  return frozen;
}

namespace {

Tensor maybe_predict(Graph& g, const Tensor& z, PredictorState* predictor) {
  return predictor ? predict_past(g, *predictor, z) : z;
}

void require_detached(const Tensor& zbar, const char* what) {
  if (zbar.requires_grad())
    throw contract_error(std::string(what) + ": frozen features must be detached");
}

}  // namespace

Tensor distill_contrastive(Graph& g, const Tensor& z, const Tensor& zbar,
                           PredictorState* predictor, const LossConfig& cfg) {
  require_detached(zbar, "distill_contrastive");
  return infonce_loss(g, maybe_predict(g, z, predictor), zbar, cfg);
}

Tensor distill_mse(Graph& g, const Tensor& z, const Tensor& zbar, PredictorState* predictor) {
  require_detached(zbar, "distill_mse");
  return negative_cosine_loss(g, maybe_predict(g, z, predictor), zbar);
}

AssignmentMatrix frozen_prototype_targets(const MatrixRM& zbar, const PrototypeBank& frozen_bank,
                                          Scalar temperature) {
  if (temperature <= 0.0) throw config_error("prototype temperature must be positive");
  if (frozen_bank.shape.size() != 2 || zbar.cols() != frozen_bank.shape[1])
    throw shape_error("frozen_prototype_targets dim mismatch");
  MatrixRM zn = zbar;
  for (Index i = 0; i < zn.rows(); ++i) {
    const Scalar norm = zn.row(i).norm();
    if (norm < 1e-12) throw degenerate_input("frozen feature with near-zero norm");
    zn.row(i) /= norm;
  }
  MatrixRM cn = unflatten(frozen_bank.value, frozen_bank.shape[0], frozen_bank.shape[1]);
  for (Index i = 0; i < cn.rows(); ++i) {
    const Scalar norm = cn.row(i).norm();
    if (norm < 1e-12) throw degenerate_input("frozen prototype with near-zero norm");
    cn.row(i) /= norm;
  }
  MatrixRM logits = (zn * cn.transpose()) / temperature;
  MatrixRM probs(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    Eigen::ArrayXd row = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    probs.row(i) = (row / row.sum()).matrix();
  }
  return AssignmentMatrix{std::move(probs)};
}

Tensor distill_prototype_ce(Graph& g, const Tensor& z, const Tensor& zbar,
                            PredictorState* predictor, PrototypeBank& frozen_bank,
                            const LossConfig& cfg) {
  require_detached(zbar, "distill_prototype_ce");
  if (frozen_bank.value.size() == 0) throw config_error("distill_prototype_ce: empty bank");
  if (frozen_bank.trainable)
    throw contract_error("distill_prototype_ce: frozen bank must be constant");
  AssignmentMatrix targets = frozen_prototype_targets(
      unflatten(zbar.value(), zbar.rows(), zbar.cols()), frozen_bank,
      cfg.prototype_temperature);
  return prototype_ce_loss(g, maybe_predict(g, z, predictor), targets, frozen_bank, cfg);
}

Tensor distill_cross_correlation(Graph& g, const Tensor& z, const Tensor& zbar,
                                 PredictorState* predictor, const LossConfig& cfg) {
  require_detached(zbar, "distill_cross_correlation");
  return barlow_twins_loss(g, maybe_predict(g, z, predictor), zbar, cfg);
}

Tensor ssl_loss_term(Graph& g, StepInputs& in) {
  switch (in.method) {
    case Method::kSimclr:
      return add(infonce_loss(g, in.zA, in.zB, in.cfg), infonce_loss(g, in.zB, in.zA, in.cfg));
    case Method::kBarlow:
      // the cross-correlation objective is already symmetric in the views
      return barlow_twins_loss(g, in.zA, in.zB, in.cfg);
    case Method::kByol: {
      if (!in.qA || !in.qB || !in.emaA || !in.emaB)
        throw contract_error("byol step needs prediction-head outputs and EMA targets");
      return add(negative_cosine_loss(g, *in.qA, *in.emaB),
                 negative_cosine_loss(g, *in.qB, *in.emaA));
    }
    case Method::kSwav: {
      if (in.live_bank == nullptr || !in.assignA || !in.assignB)
        throw contract_error("swav step needs a prototype bank and assignments");
      // swapped prediction: view A predicts B's assignments and vice versa
      return add(prototype_ce_loss(g, in.zA, *in.assignB, *in.live_bank, in.cfg),
                 prototype_ce_loss(g, in.zB, *in.assignA, *in.live_bank, in.cfg));
    }
  }
  throw config_error("unknown method");
}

namespace {

Tensor distill_one(Graph& g, StepInputs& in, const Tensor& z, const Tensor& zbar) {
  PredictorState* predictor = nullptr;
  if (in.flags.use_predictor) {
    if (in.predictor == nullptr)
      throw contract_error("cassle_total_loss: predictor required but missing");
    predictor = in.predictor;
  }
  switch (in.distill_family) {
    case DistillFamily::kContrastive:
      return distill_contrastive(g, z, zbar, predictor, in.cfg);
    case DistillFamily::kMse:
      return distill_mse(g, z, zbar, predictor);
    case DistillFamily::kPrototypeCe: {
      if (in.frozen_bank == nullptr)
        throw config_error("prototype_ce distillation needs a frozen prototype bank");
      return distill_prototype_ce(g, z, zbar, predictor, *in.frozen_bank, in.cfg);
    }
    case DistillFamily::kCrossCorrelation:
      return distill_cross_correlation(g, z, zbar, predictor, in.cfg);
  }
  throw config_error("unknown distillation family");
}

}  // namespace

TotalLoss cassle_total_loss(Graph& g, StepInputs& in) {
  TotalLoss out;
  out.ssl_term = ssl_loss_term(g, in);
  if (in.zbarA.has_value() != in.zbarB.has_value())
    throw contract_error("cassle_total_loss: frozen features must come in view pairs");
  if (!in.zbarA) {
    out.total = out.ssl_term;  // first task: no distillation term at all
    return out;
  }
  const Tensor& targetA = in.flags.swap_views ? *in.zbarB : *in.zbarA;
  const Tensor& targetB = in.flags.swap_views ? *in.zbarA : *in.zbarB;
  Tensor dA = distill_one(g, in, in.zA, targetA);
  Tensor dB = distill_one(g, in, in.zB, targetB);
  out.distill_term = add(dA, dB);
  out.total = add(out.ssl_term, *out.distill_term);
  return out;
}

}  // namespace cassle
