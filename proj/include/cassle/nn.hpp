#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cassle/tensor.hpp"

namespace cassle {

// Named parameter buffer. Graphs bind these by address, so a Param must stay
// put while it is being trained (EncoderState owns its params in vectors that
// are never resized after construction).
struct Param {
  std::string name;
  Shape shape;
  Array value;
  bool trainable = true;

  Index size() const { return value.size(); }
  bool is_bias_like() const { return shape.size() == 1; }
};

struct DenseLayer {
  Param weight;  // [in, out]
  Param bias;    // [out]
};

struct ArchSpec {
  Index input_dim = 32;
  std::vector<Index> backbone = {256, 256};   // hidden widths, ReLU after each
  std::vector<Index> projector = {128, 64};   // hidden..., output (linear last)
  Index predictor_hidden = 0;  // 0 = 4x projector output
  Index head_hidden = 0;       // BYOL prediction head h; 0 = 4x projector output
  Index prototypes = 0;        // K; 0 = no prototype bank

  Index feature_dim() const { return backbone.empty() ? input_dim : backbone.back(); }
  Index proj_dim() const { return projector.empty() ? feature_dim() : projector.back(); }
  void validate() const;
};

// Cluster prototypes c_1..c_K as rows of a [K, d] parameter; l2-normalized
// whenever they enter a loss.
using PrototypeBank = Param;

struct EncoderState {
  ArchSpec arch;
  std::vector<DenseLayer> backbone;
  std::vector<DenseLayer> projector;
  std::vector<DenseLayer> head;  // empty unless the method uses h
  std::optional<PrototypeBank> prototype_bank;
  uint64_t rng_seed = 0;

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  void set_trainable(bool trainable);
  bool all_frozen() const;
};

struct PredictorState {
  DenseLayer hidden;  // d -> hidden, ReLU
  DenseLayer output;  // hidden -> d
  std::vector<Param*> params();
  void set_trainable(bool trainable);
};

struct EmaState {
  EncoderState shadow;  // all params constant-flagged
  Scalar momentum = 0.99;
};

EncoderState init_encoder(const ArchSpec& arch, uint64_t seed, bool with_head = false);
PredictorState init_predictor(Index dim, Index hidden, uint64_t seed);
EmaState init_ema(const EncoderState& online, Scalar momentum);

struct Encoded {
  Tensor features;  // backbone output
  Tensor projection;  // projector output z
};

// Forward pass f_p(f_b(x)); binds the encoder's params on `g` (frozen params
// bind as constants).
Encoded encode(Graph& g, EncoderState& enc, const Tensor& x);

// BYOL's prediction head q = h(z).
Tensor head_forward(Graph& g, EncoderState& enc, const Tensor& z);

// CaSSLe predictor g(z): maps current projections into the frozen space.
Tensor predict_past(Graph& g, PredictorState& predictor, const Tensor& z);

// shadow <- m * shadow + (1 - m) * online, elementwise.
void ema_update(EmaState& ema, const EncoderState& online, Scalar m);
void ema_update(EmaState& ema, const EncoderState& online);  // uses ema.momentum

// Cosine similarities against the (normalized) prototype bank, divided by
// temperature: [batch, K].
Tensor prototype_scores(Graph& g, const Tensor& z, PrototypeBank& bank, Scalar temperature);

}  // namespace cassle
