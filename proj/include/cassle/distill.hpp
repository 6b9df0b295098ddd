#pragma once

#include <optional>
#include <string>

#include "cassle/losses.hpp"
#include "cassle/nn.hpp"

namespace cassle {

enum class Method { kSimclr, kBarlow, kByol, kSwav };
enum class DistillFamily { kContrastive, kMse, kPrototypeCe, kCrossCorrelation };

// Each SSL family reuses its own loss for distillation.
DistillFamily family_of(Method m);
const char* method_name(Method m);
const char* family_name(DistillFamily f);

struct AblationFlags {
  bool swap_views = false;   // pair g(zA) with frozen zB instead of zA
  bool use_predictor = true; // false: distill on z directly
};

// Immutable copy of the encoder taken at a task boundary. Every parameter is
// constant-flagged, so no gradient can reach it.
struct FrozenEncoder {
  EncoderState encoder;
  std::string digest;  // checkpoint digest at snapshot time

  PrototypeBank* bank() {
    return encoder.prototype_bank ? &*encoder.prototype_bank : nullptr;
  }
};

FrozenEncoder snapshot_frozen(const EncoderState& enc);

// Distillation losses L_D(z, zbar) = L_SSL(g(z), zbar). `predictor` may be
// null (the no-predictor ablation); zbar must be detached.
Tensor distill_contrastive(Graph& g, const Tensor& z, const Tensor& zbar,
                           PredictorState* predictor, const LossConfig& cfg);
Tensor distill_mse(Graph& g, const Tensor& z, const Tensor& zbar, PredictorState* predictor);
Tensor distill_prototype_ce(Graph& g, const Tensor& z, const Tensor& zbar,
                            PredictorState* predictor, PrototypeBank& frozen_bank,
                            const LossConfig& cfg);
Tensor distill_cross_correlation(Graph& g, const Tensor& z, const Tensor& zbar,
                                 PredictorState* predictor, const LossConfig& cfg);

// Soft targets for the prototype-CE distillation: softmax over similarities
// of the frozen features against the frozen bank. Computed outside the graph.
AssignmentMatrix frozen_prototype_targets(const MatrixRM& zbar, const PrototypeBank& frozen_bank,
                                          Scalar temperature);

// Everything one training step needs to assemble the combined loss. Members
// that a method does not use stay empty.
struct StepInputs {
  Method method = Method::kSimclr;
  DistillFamily distill_family = DistillFamily::kContrastive;
  LossConfig cfg;
  AblationFlags flags;

  Tensor zA, zB;  // current projections

  // BYOL
  std::optional<Tensor> qA, qB;      // prediction-head outputs
  std::optional<Tensor> emaA, emaB;  // EMA targets, detached

  // SwAV
  PrototypeBank* live_bank = nullptr;
  std::optional<AssignmentMatrix> assignA, assignB;  // targets for each view

  // Distillation (absent on the first task)
  std::optional<Tensor> zbarA, zbarB;  // frozen projections, detached
  PrototypeBank* frozen_bank = nullptr;
  PredictorState* predictor = nullptr;
};

struct TotalLoss {
  Tensor total;
  Tensor ssl_term;
  std::optional<Tensor> distill_term;

  Scalar ssl_value() const { return ssl_term.scalar(); }
  Scalar distill_value() const { return distill_term ? distill_term->scalar() : 0.0; }
  Scalar total_value() const { return total.scalar(); }
};

// L = L_SSL(zA, zB) symmetrized per the method, plus, when a frozen encoder
// exists, L_D(zA, zbarA) + L_D(zB, zbarB) (swapped pairing under the
// ablation). The two terms are summed with weight exactly 1 each.
TotalLoss cassle_total_loss(Graph& g, StepInputs& in);

// The symmetrized SSL term alone (also used by the EWC Fisher estimate).
Tensor ssl_loss_term(Graph& g, StepInputs& in);

}  // namespace cassle
