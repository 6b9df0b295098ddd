#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "cassle/errors.hpp"

namespace cassle {

using Scalar = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;  // flat row-major storage
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

enum class OpKind : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kPow2,
  kSqrt,
  kNegate,
  kRelu,
  kSum,
  kMean,
  kConcat,
  kSlice,
  kBroadcast,
};

const char* op_name(OpKind op);

class Graph;

// Lightweight handle to a node in a Graph. Copying a Tensor copies the
// handle, not the values.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }

  const Shape& shape() const;
  Index size() const;
  Index rows() const;  // rank-2 only
  Index cols() const;  // rank-2 only
  const Array& value() const;
  Array grad() const;  // zeros if gradient never reached this node
  bool requires_grad() const;
  Scalar scalar() const;  // value of a shape-[] tensor

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Gradients of a scalar loss w.r.t. the requires_grad leaves reachable from
// it. Frozen (constant) leaves always read back as exactly zero.
class GradientMap {
 public:
  bool contains(const Tensor& t) const { return by_node_.count(t.id()) > 0; }
  const Array* find(const Tensor& t) const;
  const Array* find_key(const void* key) const;
  Array get(const Tensor& t) const;  // zeros when absent
  size_t size() const { return by_node_.size(); }

 private:
  friend class Graph;
  std::unordered_map<int, Array> by_node_;
  std::unordered_map<const void*, int> key_to_node_;
};

// Reverse-mode tape over dense float64 tensors of rank 0..2. Nodes are
// recorded in construction order, which is also a valid topological order;
// backward() runs one reverse sweep over the nodes reachable from the loss.
// Single-owner: a Graph and its Tensors must not be mutated concurrently.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  Tensor leaf(Shape shape, Array values, bool requires_grad);
  Tensor constant(Shape shape, Array values);
  Tensor constant(Scalar v);
  Tensor constant_matrix(const MatrixRM& m);
  Tensor matrix(const MatrixRM& m, bool requires_grad);
  // Binds an external parameter buffer; repeated binds of the same key return
  // the same leaf so each parameter appears exactly once per graph.
  Tensor bind(const void* key, const Shape& shape, const Array& values, bool trainable);
  bool bound(const void* key) const { return bindings_.count(key) > 0; }
  Tensor bound_tensor(const void* key) const;

  Tensor apply(OpKind op, const std::vector<Tensor>& inputs, Shape out_shape);

  GradientMap backward(const Tensor& loss);
  void zero_grad();

  size_t node_count() const { return nodes_.size(); }

  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<int> inputs;
    Shape shape;
    Array value;
    Array grad;  // empty until backward touches the node
    bool requires_grad = false;
    // op attributes
    int axis = -1;  // kSum/kMean (-1 = all), kConcat
    bool keepdim = false;
    std::array<Index, 2> offset{0, 0};  // kSlice
    std::array<Index, 2> extent{0, 0};  // kSlice
    const void* binding = nullptr;      // kLeaf bound to external param
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

 private:
  int push(Node n);
  void accumulate(int id, const Array& g);
  void backprop_node(int id);

  // deque: node references stay valid while new nodes are recorded
  std::deque<Node> nodes_;
  std::unordered_map<const void*, int> bindings_;
};

// Primitive free functions. Binary elementwise ops broadcast their arguments
// (numpy-style, right-aligned) when shapes differ.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow2(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a, int axis = -1, bool keepdim = false);
Tensor mean(const Tensor& a, int axis = -1, bool keepdim = false);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, Index row0, Index nrows, Index col0, Index ncols);
Tensor slice(const Tensor& a, Index begin, Index extent);
Tensor broadcast_to(const Tensor& a, const Shape& target);

// Constant copy of a tensor's current values; gradients never flow past it.
Tensor detach(const Tensor& a);

// Composites (differentiable; built from the primitives above).
Tensor l2_normalize(const Tensor& z, int axis);
Tensor standardize(const Tensor& z, int batch_axis = 0);
// log(sum(exp(x), axis)) with a detached max shift; exact for any shift.
Tensor logsumexp(const Tensor& x, int axis, bool keepdim = false);
Tensor scale(const Tensor& a, Scalar s);
Tensor add_scalar(const Tensor& a, Scalar s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

// Eigen bridging helpers.
Array flatten(const MatrixRM& m);
MatrixRM unflatten(const Array& a, Index rows, Index cols);
ConstMatMap as_matrix(const Array& a, const Shape& shape);

}  // namespace cassle
