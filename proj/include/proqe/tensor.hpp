#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace proqe::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major float64 buffer. Rank 0 is a scalar with one element.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> v);
  static Tensor row(std::initializer_list<double> v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  // Rank-2 helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  void fill(double v);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A named, persistent trainable tensor. Gradients live on the tape that used it.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Records operations in creation order; backward() walks that order in
// reverse, which is a reverse topological order of the recorded graph.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // With record_gradients = false every op produces a constant (inference).
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v);
  Var variable(Tensor v);
  // One leaf per parameter per tape; the parameter's value is referenced,
  // not copied.
  Var parameter(const Parameter& p);

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws for non-scalar losses.
  void backward(Var loss);

  const Tensor& value(std::size_t i) const {
    const auto& n = nodes_[i];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }
  // Zero tensor of the right shape when nothing flowed into `v`.
  Tensor grad(Var v) const;
  const Tensor* grad_of(const Parameter& p) const;
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  // Plumbing for op implementations.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  bool wants_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  Tensor& grad_buffer(std::size_t i);
  const Tensor& grad_at(std::size_t i) const { return nodes_[i].grad; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  Var push(Node n);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool record_;
};

// ---- primitives ------------------------------------------------------------
// Elementwise binary ops require identical shapes. Shape mismatches throw
// InvalidArgument naming both shapes.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var softplus(Var a);
Var abs(Var a);

// Broadcast a [cols] or [1 x cols] row over every row of a rank-2 matrix.
Var add_row(Var m, Var row);
Var mul_row(Var m, Var row);

Var matmul(Var a, Var b);  // [n x k] * [k x m]
Var transpose(Var a);      // rank 2
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);  // rank 2
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::span<const std::uint32_t> ids);

Var reduce_sum(Var a);  // scalar
Var reduce_mean(Var a);
Var reduce_sum(Var a, std::size_t axis);  // rank 2 -> [1 x c] or [r x 1]
Var reduce_mean(Var a, std::size_t axis);
Var reduce_min(Var a, std::size_t axis);

Var dot(Var a, Var b);          // same shape -> scalar
Var l1_distance(Var a, Var b);  // same shape -> scalar sum |a - b|
Var softmax(Var a, std::size_t axis);
// Per-row standardization without affine terms, eps = 1e-5.
Var layer_norm(Var a);

inline constexpr double kLayerNormEps = 1e-5;

// ---- optimizer ---------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// Standard Adam with bias correction. `grads[i]` pairs with `params[i]`; an
// empty gradient tensor counts as zero.
void adam_step(std::span<Parameter> params, std::span<const Tensor> grads, AdamState& state,
               double lr);

// ---- checkpoint container ----------------------------------------------------
// Little-endian: magic "PROQECK", version byte, u64 metadata length, metadata
// bytes, u64 record count, then per record `name\0shape\0f64[numel]` where shape
// is comma-separated decimal extents (empty for scalars).

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;
  const Tensor* find(std::string_view name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace proqe::ad
