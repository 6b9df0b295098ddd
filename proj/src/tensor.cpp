#include "cassle/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cassle {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kPow2: return "pow2";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kNegate: return "negate";
    case OpKind::kRelu: return "relu";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kBroadcast: return "broadcast";
  }
  return "?";
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "SHAPE_ERROR";
    case ErrorCode::kDomain: return "DOMAIN_ERROR";
    case ErrorCode::kContract: return "CONTRACT_ERROR";
    case ErrorCode::kDegenerateInput: return "DEGENERATE_INPUT";
    case ErrorCode::kConfig: return "CONFIG_ERROR";
    case ErrorCode::kNumeric: return "NUMERIC_ERROR";
    case ErrorCode::kFormat: return "FORMAT_ERROR";
    case ErrorCode::kParse: return "PARSE_ERROR";
    case ErrorCode::kStratification: return "STRATIFICATION_ERROR";
    case ErrorCode::kUndefinedMetric: return "UNDEFINED_METRIC";
    case ErrorCode::kIo: return "IO_ERROR";
  }
  return "ERROR";
}

// ---------------------------------------------------------------------------
// Tensor accessors
// ---------------------------------------------------------------------------

const Shape& Tensor::shape() const { return graph_->node(id_).shape; }
Index Tensor::size() const { return numel(shape()); }

Index Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) throw shape_error("rows() on non-matrix " + shape_str(s));
  return s[0];
}

Index Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) throw shape_error("cols() on non-matrix " + shape_str(s));
  return s[1];
}

const Array& Tensor::value() const { return graph_->node(id_).value; }

Array Tensor::grad() const {
  const auto& n = graph_->node(id_);
  if (n.grad.size() == 0) return Array::Zero(numel(n.shape));
  return n.grad;
}

bool Tensor::requires_grad() const { return graph_->node(id_).requires_grad; }

Scalar Tensor::scalar() const {
  if (!shape().empty() || value().size() != 1)
    throw contract_error("scalar() on tensor of shape " + shape_str(shape()));
  return value()[0];
}

// ---------------------------------------------------------------------------
// GradientMap
// ---------------------------------------------------------------------------

const Array* GradientMap::find(const Tensor& t) const {
  auto it = by_node_.find(t.id());
  return it == by_node_.end() ? nullptr : &it->second;
}

const Array* GradientMap::find_key(const void* key) const {
  auto it = key_to_node_.find(key);
  if (it == key_to_node_.end()) return nullptr;
  return &by_node_.at(it->second);
}

Array GradientMap::get(const Tensor& t) const {
  const Array* g = find(t);
  if (g) return *g;
  return Array::Zero(t.size());
}

// ---------------------------------------------------------------------------
// Graph: leaves
// ---------------------------------------------------------------------------

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::leaf(Shape shape, Array values, bool requires_grad) {
  if (values.size() != numel(shape))
    throw shape_error("leaf values size " + std::to_string(values.size()) +
                      " != numel" + shape_str(shape));
  Node n;
  n.op = OpKind::kLeaf;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = requires_grad;
  return {this, push(std::move(n))};
}

Tensor Graph::constant(Shape shape, Array values) {
  return leaf(std::move(shape), std::move(values), false);
}

Tensor Graph::constant(Scalar v) {
  Array a(1);
  a[0] = v;
  return leaf(Shape{}, std::move(a), false);
}

Tensor Graph::constant_matrix(const MatrixRM& m) {
  return leaf(Shape{m.rows(), m.cols()}, flatten(m), false);
}

Tensor Graph::matrix(const MatrixRM& m, bool requires_grad) {
  return leaf(Shape{m.rows(), m.cols()}, flatten(m), requires_grad);
}

Tensor Graph::bind(const void* key, const Shape& shape, const Array& values, bool trainable) {
  auto it = bindings_.find(key);
  if (it != bindings_.end()) return {this, it->second};
  Tensor t = leaf(shape, values, trainable);
  node(t.id()).binding = key;
  bindings_[key] = t.id();
  return t;
}

Tensor Graph::bound_tensor(const void* key) const {
  auto it = bindings_.find(key);
  if (it == bindings_.end()) throw contract_error("parameter not bound in this graph");
  return {const_cast<Graph*>(this), it->second};
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

namespace {

ConstMatMap map2(const Array& a, const Shape& s) {
  if (s.size() == 2) return {a.data(), s[0], s[1]};
  if (s.size() == 1) return {a.data(), 1, s[0]};
  return {a.data(), 1, 1};
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const Index ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea == eb) {
      out[i] = ea;
    } else if (ea == 1) {
      out[i] = eb;
    } else if (eb == 1) {
      out[i] = ea;
    } else {
      throw shape_error("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

bool broadcastable_to(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) return false;
  for (size_t i = 0; i < from.size(); ++i) {
    const Index ef = from[from.size() - 1 - i];
    const Index et = to[to.size() - 1 - i];
    if (ef != et && ef != 1) return false;
  }
  return true;
}

// Expands `src` of shape `from` into shape `to` (right-aligned extents).
Array broadcast_values(const Array& src, const Shape& from, const Shape& to) {
  Array out(numel(to));
  if (from.empty() || numel(from) == 1) {
    out.setConstant(src[0]);
    return out;
  }
  const Index to_rows = to.size() == 2 ? to[0] : 1;
  const Index to_cols = to.size() == 2 ? to[1] : to[0];
  // Treat rank-1 sources as a [1, n] row.
  Index fr = 1, fc = 1;
  if (from.size() == 1) {
    fc = from[0];
  } else {
    fr = from[0];
    fc = from[1];
  }
  ConstMatMap s(src.data(), fr, fc);
  MatMap d(out.data(), to_rows, to_cols);
  if (fr == to_rows && fc == to_cols) {
    d = s;
  } else if (fr == 1 && fc == to_cols) {
    d = s.replicate(to_rows, 1);
  } else if (fc == 1 && fr == to_rows) {
    d = s.replicate(1, to_cols);
  } else if (fr == 1 && fc == 1) {
    d.setConstant(src[0]);
  } else {
    throw shape_error("broadcast " + shape_str(from) + " -> " + shape_str(to));
  }
  return out;
}

// Reduces a gradient of shape `to` back to shape `from` by summing the
// broadcast axes.
Array reduce_broadcast_grad(const Array& g, const Shape& from, const Shape& to) {
  if (from == to) return g;
  if (from.empty() || numel(from) == 1) {
    Array out(numel(from));
    out.setConstant(g.sum());
    return out;
  }
  const Index to_rows = to.size() == 2 ? to[0] : 1;
  const Index to_cols = to.size() == 2 ? to[1] : to[0];
  Index fr = 1, fc = 1;
  if (from.size() == 1) {
    fc = from[0];
  } else {
    fr = from[0];
    fc = from[1];
  }
  ConstMatMap gm(g.data(), to_rows, to_cols);
  Array out(numel(from));
  MatMap om(out.data(), fr, fc);
  if (fr == 1 && fc == to_cols) {
    om = gm.colwise().sum();
  } else if (fc == 1 && fr == to_rows) {
    om = gm.rowwise().sum();
  } else {
    throw shape_error("reduce broadcast grad " + shape_str(to) + " -> " + shape_str(from));
  }
  return out;
}

}  // namespace

Tensor Graph::apply(OpKind op, const std::vector<Tensor>& inputs, Shape out_shape) {
  Node n;
  n.op = op;
  n.shape = std::move(out_shape);
  n.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    if (t.graph() != this) throw contract_error("tensors belong to different graphs");
    n.inputs.push_back(t.id());
    n.requires_grad = n.requires_grad || t.requires_grad();
  }
  return {this, push(std::move(n))};
}

namespace {

void check_finite(const Graph::Node& n) {
  if (!n.value.allFinite())
    throw domain_error(std::string(op_name(n.op)) + " produced non-finite values");
}

}  // namespace

// Forward kernels. Each free function below records a node, fills its value,
// and verifies finiteness per the engine contract.

namespace {

void require_same_graph(const Tensor& a, const Tensor& b) {
  if (a.graph() != b.graph()) throw contract_error("tensors belong to different graphs");
}

Tensor binary_elementwise(OpKind op, const Tensor& a0, const Tensor& b0) {
  require_same_graph(a0, b0);
  Tensor a = a0, b = b0;
  if (!same_shape(a.shape(), b.shape())) {
    const Shape target = broadcast_shape(a.shape(), b.shape());
    a = broadcast_to(a, target);
    b = broadcast_to(b, target);
  }
  Graph* g = a.graph();
  Tensor out = g->apply(op, {a, b}, a.shape());
  auto& n = g->node(out.id());
  const Array& va = a.value();
  const Array& vb = b.value();
  switch (op) {
    case OpKind::kAdd: n.value = va + vb; break;
    case OpKind::kSub: n.value = va - vb; break;
    case OpKind::kMul: n.value = va * vb; break;
    case OpKind::kDiv: n.value = va / vb; break;
    default: throw contract_error("not an elementwise op");
  }
  check_finite(n);
  return out;
}

Tensor unary_elementwise(OpKind op, const Tensor& a) {
  Graph* g = a.graph();
  Tensor out = g->apply(op, {a}, a.shape());
  auto& n = g->node(out.id());
  const Array& v = a.value();
  switch (op) {
    case OpKind::kExp:
      n.value = v.exp();
      break;
    case OpKind::kLog:
      if ((v <= 0.0).any()) throw domain_error("log of non-positive value");
      n.value = v.log();
      break;
    case OpKind::kPow2:
      n.value = v.square();
      break;
    case OpKind::kSqrt:
      if ((v < 0.0).any()) throw domain_error("sqrt of negative value");
      n.value = v.sqrt();
      break;
    case OpKind::kNegate:
      n.value = -v;
      break;
    case OpKind::kRelu:
      n.value = v.max(0.0);
      break;
    default:
      throw contract_error("not a unary op");
  }
  check_finite(n);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::kDiv, a, b); }

Tensor exp(const Tensor& a) { return unary_elementwise(OpKind::kExp, a); }
Tensor log(const Tensor& a) { return unary_elementwise(OpKind::kLog, a); }
Tensor pow2(const Tensor& a) { return unary_elementwise(OpKind::kPow2, a); }
Tensor sqrt(const Tensor& a) { return unary_elementwise(OpKind::kSqrt, a); }
Tensor negate(const Tensor& a) { return unary_elementwise(OpKind::kNegate, a); }
Tensor relu(const Tensor& a) { return unary_elementwise(OpKind::kRelu, a); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_graph(a, b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw shape_error("matmul requires matrices, got " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  if (a.cols() != b.rows())
    throw shape_error("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  Graph* g = a.graph();
  Tensor out = g->apply(OpKind::kMatMul, {a, b}, Shape{a.rows(), b.cols()});
  auto& n = g->node(out.id());
  n.value.resize(a.rows() * b.cols());
  MatMap(n.value.data(), a.rows(), b.cols()) =
      map2(a.value(), a.shape()) * map2(b.value(), b.shape());
  check_finite(n);
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw shape_error("transpose requires a matrix, got " + shape_str(a.shape()));
  Graph* g = a.graph();
  Tensor out = g->apply(OpKind::kTranspose, {a}, Shape{a.cols(), a.rows()});
  auto& n = g->node(out.id());
  n.value.resize(a.size());
  MatMap(n.value.data(), a.cols(), a.rows()) = map2(a.value(), a.shape()).transpose();
  check_finite(n);
  return out;
}

namespace {

Shape reduced_shape(const Shape& in, int axis, bool keepdim) {
  if (axis < 0) {
    if (!keepdim) return Shape{};
    Shape s(in.size(), 1);
    return s;
  }
  if (static_cast<size_t>(axis) >= in.size())
    throw shape_error("reduce axis " + std::to_string(axis) + " out of range for " + shape_str(in));
  Shape s = in;
  if (keepdim) {
    s[static_cast<size_t>(axis)] = 1;
  } else {
    s.erase(s.begin() + axis);
  }
  return s;
}

Tensor reduce(OpKind op, const Tensor& a, int axis, bool keepdim) {
  Graph* g = a.graph();
  const Shape& in = a.shape();
  Tensor out = g->apply(op, {a}, reduced_shape(in, axis, keepdim));
  auto& n = g->node(out.id());
  n.axis = axis;
  n.keepdim = keepdim;
  const Array& v = a.value();
  if (axis < 0 || in.size() <= 1) {
    n.value.resize(1);
    n.value[0] = v.sum();
    if (op == OpKind::kMean) n.value[0] /= static_cast<Scalar>(std::max<Index>(v.size(), 1));
  } else {
    ConstMatMap m = map2(v, in);
    if (axis == 0) {
      n.value.resize(in[1]);
      Eigen::Map<Eigen::RowVectorXd>(n.value.data(), in[1]) = m.colwise().sum();
      if (op == OpKind::kMean) n.value /= static_cast<Scalar>(in[0]);
    } else {
      n.value.resize(in[0]);
      Eigen::Map<Eigen::VectorXd>(n.value.data(), in[0]) = m.rowwise().sum();
      if (op == OpKind::kMean) n.value /= static_cast<Scalar>(in[1]);
    }
  }
  check_finite(n);
  return out;
}

}  // namespace

Tensor sum(const Tensor& a, int axis, bool keepdim) { return reduce(OpKind::kSum, a, axis, keepdim); }
Tensor mean(const Tensor& a, int axis, bool keepdim) { return reduce(OpKind::kMean, a, axis, keepdim); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw contract_error("concat of zero tensors");
  Graph* g = parts[0].graph();
  const size_t rank = parts[0].shape().size();
  if (rank == 0) throw shape_error("concat of scalars");
  if (axis < 0 || static_cast<size_t>(axis) >= rank)
    throw shape_error("concat axis out of range");
  Shape out_shape = parts[0].shape();
  for (size_t i = 1; i < parts.size(); ++i) {
    require_same_graph(parts[0], parts[i]);
    const Shape& s = parts[i].shape();
    if (s.size() != rank) throw shape_error("concat rank mismatch");
    for (size_t d = 0; d < rank; ++d) {
      if (static_cast<int>(d) == axis) continue;
      if (s[d] != out_shape[d]) throw shape_error("concat extent mismatch on axis " + std::to_string(d));
    }
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  Tensor out = g->apply(OpKind::kConcat, parts, out_shape);
  auto& n = g->node(out.id());
  n.axis = axis;
  n.value.resize(numel(out_shape));
  if (rank == 1 || axis == 0) {
    Index at = 0;
    for (const Tensor& p : parts) {
      n.value.segment(at, p.size()) = p.value();
      at += p.size();
    }
  } else {
    MatMap dst(n.value.data(), out_shape[0], out_shape[1]);
    Index col = 0;
    for (const Tensor& p : parts) {
      dst.middleCols(col, p.cols()) = map2(p.value(), p.shape());
      col += p.cols();
    }
  }
  check_finite(n);
  return out;
}

Tensor slice(const Tensor& a, Index row0, Index nrows, Index col0, Index ncols) {
  if (a.shape().size() != 2) throw shape_error("2-range slice requires a matrix");
  if (row0 < 0 || nrows <= 0 || row0 + nrows > a.rows() || col0 < 0 || ncols <= 0 ||
      col0 + ncols > a.cols())
    throw shape_error("slice out of bounds");
  Graph* g = a.graph();
  Tensor out = g->apply(OpKind::kSlice, {a}, Shape{nrows, ncols});
  auto& n = g->node(out.id());
  n.offset = {row0, col0};
  n.extent = {nrows, ncols};
  n.value.resize(nrows * ncols);
  MatMap(n.value.data(), nrows, ncols) = map2(a.value(), a.shape()).block(row0, col0, nrows, ncols);
  check_finite(n);
  return out;
}

Tensor slice(const Tensor& a, Index begin, Index extent) {
  if (a.shape().size() != 1) throw shape_error("1-range slice requires a vector");
  if (begin < 0 || extent <= 0 || begin + extent > a.size())
    throw shape_error("slice out of bounds");
  Graph* g = a.graph();
  Tensor out = g->apply(OpKind::kSlice, {a}, Shape{extent});
  auto& n = g->node(out.id());
  n.offset = {begin, 0};
  n.extent = {extent, 1};
  n.value = a.value().segment(begin, extent);
  check_finite(n);
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  if (same_shape(a.shape(), target)) return a;
  if (!broadcastable_to(a.shape(), target))
    throw shape_error("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(target));
  Graph* g = a.graph();
  Tensor out = g->apply(OpKind::kBroadcast, {a}, target);
  auto& n = g->node(out.id());
  n.value = broadcast_values(a.value(), a.shape(), target);
  check_finite(n);
  return out;
}

Tensor detach(const Tensor& a) { return a.graph()->constant(a.shape(), a.value()); }

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Graph::accumulate(int id, const Array& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = Array::Zero(numel(n.shape));
  n.grad += g;
}

void Graph::backprop_node(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0) return;  // no gradient reached this node
  const Array& g = n.grad;
  switch (n.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd:
      accumulate(n.inputs[0], g);
      accumulate(n.inputs[1], g);
      break;
    case OpKind::kSub:
      accumulate(n.inputs[0], g);
      accumulate(n.inputs[1], -g);
      break;
    case OpKind::kMul:
      accumulate(n.inputs[0], g * node(n.inputs[1]).value);
      accumulate(n.inputs[1], g * node(n.inputs[0]).value);
      break;
    case OpKind::kDiv: {
      const Array& b = node(n.inputs[1]).value;
      accumulate(n.inputs[0], g / b);
      accumulate(n.inputs[1], -(g * n.value / b));
      break;
    }
    case OpKind::kMatMul: {
      const Node& a = node(n.inputs[0]);
      const Node& b = node(n.inputs[1]);
      ConstMatMap gm(g.data(), a.shape[0], b.shape[1]);
      ConstMatMap am(a.value.data(), a.shape[0], a.shape[1]);
      ConstMatMap bm(b.value.data(), b.shape[0], b.shape[1]);
      if (node(n.inputs[0]).requires_grad) {
        Array da(a.value.size());
        MatMap(da.data(), a.shape[0], a.shape[1]) = gm * bm.transpose();
        accumulate(n.inputs[0], da);
      }
      if (node(n.inputs[1]).requires_grad) {
        Array db(b.value.size());
        MatMap(db.data(), b.shape[0], b.shape[1]) = am.transpose() * gm;
        accumulate(n.inputs[1], db);
      }
      break;
    }
    case OpKind::kTranspose: {
      const Node& a = node(n.inputs[0]);
      Array da(a.value.size());
      MatMap(da.data(), a.shape[0], a.shape[1]) =
          ConstMatMap(g.data(), n.shape[0], n.shape[1]).transpose();
      accumulate(n.inputs[0], da);
      break;
    }
    case OpKind::kExp:
      accumulate(n.inputs[0], g * n.value);
      break;
    case OpKind::kLog:
      accumulate(n.inputs[0], g / node(n.inputs[0]).value);
      break;
    case OpKind::kPow2:
      accumulate(n.inputs[0], 2.0 * g * node(n.inputs[0]).value);
      break;
    case OpKind::kSqrt:
      accumulate(n.inputs[0], g / (2.0 * n.value));
      break;
    case OpKind::kNegate:
      accumulate(n.inputs[0], -g);
      break;
    case OpKind::kRelu: {
      const Array& x = node(n.inputs[0]).value;
      accumulate(n.inputs[0], (x > 0.0).select(g, Array::Zero(g.size())));
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      const Node& a = node(n.inputs[0]);
      const Shape& in = a.shape;
      Array da(a.value.size());
      Scalar denom = 1.0;
      if (n.op == OpKind::kMean) {
        if (n.axis < 0 || in.size() <= 1) {
          denom = static_cast<Scalar>(std::max<Index>(a.value.size(), 1));
        } else {
          denom = static_cast<Scalar>(in[static_cast<size_t>(n.axis)]);
        }
      }
      if (n.axis < 0 || in.size() <= 1) {
        da.setConstant(g[0] / denom);
      } else {
        MatMap dm(da.data(), in[0], in[1]);
        if (n.axis == 0) {
          dm = ConstMatMap(g.data(), 1, in[1]).replicate(in[0], 1) / denom;
        } else {
          dm = ConstMatMap(g.data(), in[0], 1).replicate(1, in[1]) / denom;
        }
      }
      accumulate(n.inputs[0], da);
      break;
    }
    case OpKind::kConcat: {
      const size_t rank = n.shape.size();
      if (rank == 1 || n.axis == 0) {
        Index at = 0;
        for (int in_id : n.inputs) {
          const Index sz = node(in_id).value.size();
          accumulate(in_id, g.segment(at, sz));
          at += sz;
        }
      } else {
        ConstMatMap gm(g.data(), n.shape[0], n.shape[1]);
        Index col = 0;
        for (int in_id : n.inputs) {
          const Node& p = node(in_id);
          Array dp(p.value.size());
          MatMap(dp.data(), p.shape[0], p.shape[1]) = gm.middleCols(col, p.shape[1]);
          accumulate(in_id, dp);
          col += p.shape[1];
        }
      }
      break;
    }
    case OpKind::kSlice: {
      const Node& a = node(n.inputs[0]);
      Array da = Array::Zero(a.value.size());
      if (a.shape.size() == 1) {
        da.segment(n.offset[0], n.extent[0]) = g;
      } else {
        MatMap dm(da.data(), a.shape[0], a.shape[1]);
        dm.block(n.offset[0], n.offset[1], n.extent[0], n.extent[1]) =
            ConstMatMap(g.data(), n.extent[0], n.extent[1]);
      }
      accumulate(n.inputs[0], da);
      break;
    }
    case OpKind::kBroadcast: {
      const Node& a = node(n.inputs[0]);
      accumulate(n.inputs[0], reduce_broadcast_grad(g, a.shape, n.shape));
      break;
    }
  }
}

GradientMap Graph::backward(const Tensor& loss) {
  if (loss.graph() != this) throw contract_error("loss belongs to another graph");
  if (!loss.shape().empty())
    throw contract_error("backward requires a scalar loss, got " + shape_str(loss.shape()));

  // Leaf gradients accumulate across backward calls; interior gradients are
  // per-call scratch.
  for (Node& n : nodes_) {
    if (n.op != OpKind::kLeaf) n.grad.resize(0);
  }

  // Mark ancestors of the loss; a single reverse scan suffices because node
  // ids are topologically ordered.
  std::vector<char> reachable(nodes_.size(), 0);
  reachable[static_cast<size_t>(loss.id())] = 1;
  for (int id = loss.id(); id >= 0; --id) {
    if (!reachable[static_cast<size_t>(id)]) continue;
    for (int in_id : node(id).inputs) reachable[static_cast<size_t>(in_id)] = 1;
  }

  if (node(loss.id()).requires_grad) {
    Array one(1);
    one[0] = 1.0;
    accumulate(loss.id(), one);
    for (int id = loss.id(); id >= 0; --id) {
      if (!reachable[static_cast<size_t>(id)]) continue;
      if (!node(id).requires_grad) continue;
      backprop_node(id);
    }
  }

  GradientMap out;
  for (int id = 0; id <= loss.id(); ++id) {
    const Node& n = node(id);
    if (n.op != OpKind::kLeaf || !n.requires_grad || !reachable[static_cast<size_t>(id)])
      continue;
    out.by_node_[id] = n.grad.size() == 0 ? Array::Zero(numel(n.shape)) : n.grad;
    if (n.binding != nullptr) out.key_to_node_[n.binding] = id;
  }
  return out;
}

void Graph::zero_grad() {
  for (Node& n : nodes_) {
    if (n.grad.size() != 0) n.grad.setZero();
  }
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Tensor l2_normalize(const Tensor& z, int axis) {
  const Shape& s = z.shape();
  constexpr Scalar kEpsNorm = 1e-12;
  if (s.size() == 1) {
    if (axis != 0) throw shape_error("l2_normalize axis out of range for vector");
    if (z.value().matrix().norm() < kEpsNorm) throw degenerate_input("l2_normalize: near-zero vector");
    Tensor n = sqrt(sum(pow2(z)));
    return div(z, broadcast_to(n, s));
  }
  if (s.size() != 2) throw shape_error("l2_normalize requires vector or matrix");
  if (axis != 0 && axis != 1) throw shape_error("l2_normalize axis out of range");
  ConstMatMap m = map2(z.value(), s);
  const Eigen::VectorXd norms =
      axis == 1 ? m.rowwise().norm().eval() : m.colwise().norm().transpose().eval();
  if (norms.minCoeff() < kEpsNorm)
    throw degenerate_input("l2_normalize: slice with near-zero norm");
  Tensor n2 = sum(pow2(z), axis, /*keepdim=*/true);
  return div(z, broadcast_to(sqrt(n2), s));
}

Tensor standardize(const Tensor& z, int batch_axis) {
  const Shape& s = z.shape();
  if (s.size() != 2) throw shape_error("standardize requires a matrix");
  if (batch_axis != 0) throw shape_error("standardize supports batch_axis 0");
  if (s[0] < 2) throw degenerate_input("standardize: batch extent < 2");
  Tensor mu = mean(z, 0, /*keepdim=*/true);
  Tensor centered = sub(z, broadcast_to(mu, s));
  Tensor var = mean(pow2(centered), 0, /*keepdim=*/true);
  if (var.value().minCoeff() < 1e-24)
    throw degenerate_input("standardize: constant feature dimension");
  constexpr Scalar kEpsVar = 1e-8;  // inside the sqrt
  Tensor stddev = sqrt(add_scalar(var, kEpsVar));
  return div(centered, broadcast_to(stddev, s));
}

Tensor logsumexp(const Tensor& x, int axis, bool keepdim) {
  Graph* g = x.graph();
  const Shape& s = x.shape();
  if (axis < 0) {
    Tensor m = g->constant(x.value().maxCoeff());
    Tensor lse = add(log(sum(exp(sub(x, broadcast_to(m, s))))), m);
    return lse;
  }
  if (s.size() != 2) throw shape_error("logsumexp axis reduction requires a matrix");
  ConstMatMap mv = map2(x.value(), s);
  Shape kshape = s;
  kshape[static_cast<size_t>(axis)] = 1;
  Array maxes(numel(kshape));
  if (axis == 0) {
    Eigen::Map<Eigen::RowVectorXd>(maxes.data(), s[1]) = mv.colwise().maxCoeff();
  } else {
    Eigen::Map<Eigen::VectorXd>(maxes.data(), s[0]) = mv.rowwise().maxCoeff();
  }
  Tensor m = g->constant(kshape, maxes);
  Tensor shifted = sub(x, broadcast_to(m, s));
  Tensor lse = add(log(sum(exp(shifted), axis, /*keepdim=*/true)), m);
  if (keepdim) return lse;
  // Summing over the singleton axis drops it without changing values.
  return sum(lse, axis, /*keepdim=*/false);
}

Tensor scale(const Tensor& a, Scalar s) { return mul(a, a.graph()->constant(s)); }
Tensor add_scalar(const Tensor& a, Scalar s) { return add(a, a.graph()->constant(s)); }

// ---------------------------------------------------------------------------
// Eigen bridging
// ---------------------------------------------------------------------------

Array flatten(const MatrixRM& m) {
  Array a(m.size());
  MatMap(a.data(), m.rows(), m.cols()) = m;
  return a;
}

MatrixRM unflatten(const Array& a, Index rows, Index cols) {
  if (a.size() != rows * cols) throw shape_error("unflatten size mismatch");
  return ConstMatMap(a.data(), rows, cols);
}

ConstMatMap as_matrix(const Array& a, const Shape& shape) { return map2(a, shape); }

}  // namespace cassle
