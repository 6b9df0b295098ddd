#include "cassle/nn.hpp"

#include <cmath>

#include "cassle/rng.hpp"

namespace cassle {

void ArchSpec::validate() const {
  if (input_dim <= 0) throw config_error("arch.input_dim must be positive");
  for (Index w : backbone)
    if (w <= 0) throw config_error("arch.backbone widths must be positive");
  for (Index w : projector)
    if (w <= 0) throw config_error("arch.projector widths must be positive");
  if (predictor_hidden < 0 || head_hidden < 0 || prototypes < 0)
    throw config_error("arch auxiliary widths must be non-negative");
}

namespace {

DenseLayer init_dense(const std::string& name, Index in, Index out, Rng& rng) {
  DenseLayer layer;
  layer.weight.name = name + ".W";
  layer.weight.shape = {in, out};
  layer.weight.value.resize(in * out);
  const Scalar limit = std::sqrt(6.0 / static_cast<Scalar>(in));
  for (Index i = 0; i < layer.weight.value.size(); ++i)
    layer.weight.value[i] = rng.uniform(-limit, limit);
  layer.bias.name = name + ".b";
  layer.bias.shape = {out};
  layer.bias.value = Array::Zero(out);
  return layer;
}

std::vector<DenseLayer> init_stack(const std::string& prefix, Index in,
                                   const std::vector<Index>& widths, Rng& rng) {
  std::vector<DenseLayer> layers;
  Index cur = in;
  for (size_t i = 0; i < widths.size(); ++i) {
    layers.push_back(init_dense(prefix + "." + std::to_string(i), cur, widths[i], rng));
    cur = widths[i];
  }
  return layers;
}

Tensor dense(Graph& g, DenseLayer& layer, const Tensor& x) {
  if (x.shape().size() != 2 || x.cols() != layer.weight.shape[0])
    throw shape_error("dense layer " + layer.weight.name + " expects input dim " +
                      std::to_string(layer.weight.shape[0]));
  Tensor w = g.bind(&layer.weight, layer.weight.shape, layer.weight.value, layer.weight.trainable);
  Tensor b = g.bind(&layer.bias, layer.bias.shape, layer.bias.value, layer.bias.trainable);
  return add(matmul(x, w), broadcast_to(b, Shape{x.rows(), layer.weight.shape[1]}));
}

Tensor mlp(Graph& g, std::vector<DenseLayer>& layers, const Tensor& x, bool relu_last) {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = dense(g, layers[i], h);
    if (relu_last || i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

}  // namespace

std::vector<Param*> EncoderState::params() {
  std::vector<Param*> out;
  for (auto& l : backbone) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  for (auto& l : projector) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  for (auto& l : head) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  if (prototype_bank) out.push_back(&*prototype_bank);
  return out;
}

std::vector<const Param*> EncoderState::params() const {
  auto mutable_params = const_cast<EncoderState*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

void EncoderState::set_trainable(bool trainable) {
  for (Param* p : params()) p->trainable = trainable;
}

bool EncoderState::all_frozen() const {
  for (const Param* p : params())
    if (p->trainable) return false;
  return true;
}

std::vector<Param*> PredictorState::params() {
  return {&hidden.weight, &hidden.bias, &output.weight, &output.bias};
}

void PredictorState::set_trainable(bool trainable) {
  for (Param* p : params()) p->trainable = trainable;
}

EncoderState init_encoder(const ArchSpec& arch, uint64_t seed, bool with_head) {
  arch.validate();
  EncoderState enc;
  enc.arch = arch;
  enc.rng_seed = seed;
  Rng rng(Rng::mix(seed, 0xE2C0DE));
  enc.backbone = init_stack("backbone", arch.input_dim, arch.backbone, rng);
  enc.projector = init_stack("projector", arch.feature_dim(), arch.projector, rng);
  if (with_head) {
    const Index hidden = arch.head_hidden > 0 ? arch.head_hidden : 4 * arch.proj_dim();
    enc.head = init_stack("head", arch.proj_dim(), {hidden, arch.proj_dim()}, rng);
  }
  if (arch.prototypes > 0) {
    PrototypeBank bank;
    bank.name = "prototypes";
    bank.shape = {arch.prototypes, arch.proj_dim()};
    bank.value.resize(arch.prototypes * arch.proj_dim());
    const Scalar limit = std::sqrt(6.0 / static_cast<Scalar>(arch.proj_dim()));
    for (Index i = 0; i < bank.value.size(); ++i) bank.value[i] = rng.uniform(-limit, limit);
    enc.prototype_bank = std::move(bank);
  }
  return enc;
}

PredictorState init_predictor(Index dim, Index hidden, uint64_t seed) {
  if (dim <= 0) throw config_error("predictor dim must be positive");
  if (hidden <= 0) hidden = 4 * dim;
  Rng rng(Rng::mix(seed, 0x9D1C70));
  PredictorState p;
  p.hidden = init_dense("predictor.0", dim, hidden, rng);
  p.output = init_dense("predictor.1", hidden, dim, rng);
  return p;
}

EmaState init_ema(const EncoderState& online, Scalar momentum) {
  if (momentum < 0.0 || momentum > 1.0) throw config_error("ema momentum must be in [0,1]");
  EmaState ema;
  ema.shadow = online;  // deep copy: Params hold values, not references
  ema.shadow.set_trainable(false);
  for (Param* p : ema.shadow.params()) p->name = "ema." + p->name;
  ema.momentum = momentum;
  return ema;
}

Encoded encode(Graph& g, EncoderState& enc, const Tensor& x) {
  if (x.shape().size() != 2 || x.cols() != enc.arch.input_dim)
    throw shape_error("encode expects [batch, " + std::to_string(enc.arch.input_dim) + "] input");
  Tensor features = mlp(g, enc.backbone, x, /*relu_last=*/true);
  Tensor z = mlp(g, enc.projector, features, /*relu_last=*/false);
  return {features, z};
}

Tensor head_forward(Graph& g, EncoderState& enc, const Tensor& z) {
  if (enc.head.empty()) throw contract_error("encoder has no prediction head");
  return mlp(g, enc.head, z, /*relu_last=*/false);
}

Tensor predict_past(Graph& g, PredictorState& predictor, const Tensor& z) {
  if (z.shape().size() != 2 || z.cols() != predictor.hidden.weight.shape[0])
    throw shape_error("predictor expects input dim " +
                      std::to_string(predictor.hidden.weight.shape[0]));
  Tensor h = relu(dense(g, predictor.hidden, z));
  return dense(g, predictor.output, h);
}

void ema_update(EmaState& ema, const EncoderState& online, Scalar m) {
  if (m < 0.0 || m > 1.0) throw config_error("ema momentum must be in [0,1]");
  auto shadow_params = ema.shadow.params();
  auto online_params = online.params();
  if (shadow_params.size() != online_params.size())
    throw shape_error("ema shadow/online parameter count mismatch");
  for (size_t i = 0; i < shadow_params.size(); ++i) {
    if (shadow_params[i]->shape != online_params[i]->shape)
      throw shape_error("ema shadow/online shape mismatch at " + online_params[i]->name);
    shadow_params[i]->value =
        m * shadow_params[i]->value + (1.0 - m) * online_params[i]->value;
  }
}

void ema_update(EmaState& ema, const EncoderState& online) {
  ema_update(ema, online, ema.momentum);
}

Tensor prototype_scores(Graph& g, const Tensor& z, PrototypeBank& bank, Scalar temperature) {
  if (temperature <= 0.0) throw config_error("prototype temperature must be positive");
  if (bank.shape.size() != 2) throw shape_error("prototype bank must be [K, d]");
  if (z.shape().size() != 2 || z.cols() != bank.shape[1])
    throw shape_error("prototype_scores dim mismatch");
  Tensor c = g.bind(&bank, bank.shape, bank.value, bank.trainable);
  Tensor sims = matmul(l2_normalize(z, 1), transpose(l2_normalize(c, 1)));
  return scale(sims, 1.0 / temperature);
}

}  // namespace cassle
