#include "proqe/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "proqe/error.hpp"

namespace proqe::ad {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw InvalidArgument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                        shape_str(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2)
    throw InvalidArgument(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// C[n x m] += A[n x k] * B[k x m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[n x k] += A[n x m] * B[k x m]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
             std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * m;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// C[k x m] += A[n x k]^T * B[n x m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class F>
Var unary(const char*, Var a, F f, std::function<double(double x, double y)> dfdx) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  const std::size_t ai = a.index;
  return t.record(std::move(y), {a}, [ai, dfdx](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& x = tp.value(ai);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * dfdx(x[i], y[i]);
  });
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t row_len(const Tensor& row) {
  if (row.rank() == 1) return row.shape()[0];
  if (row.rank() == 2 && row.shape()[0] == 1) return row.shape()[1];
  throw InvalidArgument("expected a row vector, got " + shape_str(row.shape()));
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_))
    throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> v) {
  return Tensor({rows, cols}, std::vector<double>(v));
}

Tensor Tensor::row(std::initializer_list<double> v) { return Tensor({1, v.size()}, std::vector<double>(v)); }

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape_[0];
  if (rank() == 1) return 1;
  throw InvalidArgument("rows(): tensor of shape " + shape_str(shape_) + " is not a matrix");
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  throw InvalidArgument("cols(): tensor of shape " + shape_str(shape_) + " is not a matrix");
}

double Tensor::item() const {
  if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---- Tape -------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(index); }

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor v) {
  Node n;
  n.value = std::move(v);
  return push(std::move(n));
}

Var Tape::variable(Tensor v) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.external = &p.value;
  n.requires_grad = record_;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.index);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      if (in.tape != this) throw InvalidArgument("operands belong to different tapes");
      if (nodes_[in.index].requires_grad) n.requires_grad = true;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(std::size_t i) {
  auto& n = nodes_[i];
  if (n.grad.numel() == 0 && value(i).numel() != 0) n.grad = Tensor(value(i).shape(), 0.0);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_[v.index];
  if (n.grad.numel() == value(v.index).numel() && n.grad.shape() == value(v.index).shape())
    return n.grad;
  return Tensor(value(v.index).shape(), 0.0);
}

const Tensor* Tape::grad_of(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const auto& n = nodes_[it->second];
  if (n.grad.numel() == 0) return nullptr;
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidArgument("backward: loss belongs to another tape");
  if (value(loss.index).numel() != 1)
    throw InvalidArgument("backward: loss must be a scalar, got shape " +
                          shape_str(value(loss.index).shape()));
  if (!nodes_[loss.index].requires_grad) return;
  grad_buffer(loss.index)[0] += 1.0;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.numel() == 0) continue;
    n.backward(*this, i);
  }
}

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  require_same("add", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
  const auto ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    for (auto k : {ai, bi}) {
      if (!t.wants_grad(k)) continue;
      Tensor& gk = t.grad_buffer(k);
      for (std::size_t i = 0; i < g.numel(); ++i) gk[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= bv[i];
  const auto ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    if (t.wants_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a.value(), b.value());
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= bv[i];
  const auto ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    if (t.wants_grad(ai)) {
      const Tensor& bv = t.value(bi);
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants_grad(bi)) {
      const Tensor& av = t.value(ai);
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

namespace {
Var select(const char* op, Var a, Var b, bool take_min) {
  require_same(op, a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  std::vector<std::uint8_t> from_a(av.numel());
  for (std::size_t i = 0; i < av.numel(); ++i) {
    from_a[i] = take_min ? (av[i] <= bv[i]) : (av[i] >= bv[i]);
    y[i] = from_a[i] ? av[i] : bv[i];
  }
  const auto ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), {a, b},
                        [ai, bi, from_a = std::move(from_a)](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad_at(self);
                          if (t.wants_grad(ai)) {
                            Tensor& ga = t.grad_buffer(ai);
                            for (std::size_t i = 0; i < g.numel(); ++i)
                              if (from_a[i]) ga[i] += g[i];
                          }
                          if (t.wants_grad(bi)) {
                            Tensor& gb = t.grad_buffer(bi);
                            for (std::size_t i = 0; i < g.numel(); ++i)
                              if (!from_a[i]) gb[i] += g[i];
                          }
                        });
}
}  // namespace

Var minimum(Var a, Var b) { return select("minimum", a, b, true); }
Var maximum(Var a, Var b) { return select("maximum", a, b, false); }

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var log_sigmoid(Var a) {
  return unary("log_sigmoid", a, [](double x) { return -stable_softplus(-x); },
               [](double x, double) { return stable_sigmoid(-x); });
}

Var softplus(Var a) {
  return unary("softplus", a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var abs(Var a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// ---- broadcasting -----------------------------------------------------------

Var add_row(Var m, Var row) {
  const Tensor& mv = m.value();
  require_rank2("add_row", mv);
  if (row_len(row.value()) != mv.cols()) shape_error("add_row", mv.shape(), row.shape());
  Tensor y = mv;
  const std::size_t r = mv.rows(), c = mv.cols();
  const double* rv = row.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += rv[j];
  const auto mi = m.index, ri = row.index;
  return m.tape->record(std::move(y), {m, row}, [mi, ri, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    if (t.wants_grad(mi)) {
      Tensor& gm = t.grad_buffer(mi);
      for (std::size_t i = 0; i < g.numel(); ++i) gm[i] += g[i];
    }
    if (t.wants_grad(ri)) {
      Tensor& gr = t.grad_buffer(ri);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
    }
  });
}

Var mul_row(Var m, Var row) {
  const Tensor& mv = m.value();
  require_rank2("mul_row", mv);
  if (row_len(row.value()) != mv.cols()) shape_error("mul_row", mv.shape(), row.shape());
  Tensor y = mv;
  const std::size_t r = mv.rows(), c = mv.cols();
  const double* rv = row.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] *= rv[j];
  const auto mi = m.index, ri = row.index;
  return m.tape->record(std::move(y), {m, row}, [mi, ri, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& mv = t.value(mi);
    const Tensor& rv = t.value(ri);
    if (t.wants_grad(mi)) {
      Tensor& gm = t.grad_buffer(mi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * rv[j];
    }
    if (t.wants_grad(ri)) {
      Tensor& gr = t.grad_buffer(ri);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j] * mv[i * c + j];
    }
  });
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2("matmul", av);
  require_rank2("matmul", bv);
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) shape_error("matmul", av.shape(), bv.shape());
  Tensor y({n, m}, 0.0);
  gemm_nn(av.data(), bv.data(), y.data(), n, k, m);
  const auto ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), {a, b}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    if (t.wants_grad(ai)) gemm_nt(g.data(), t.value(bi).data(), t.grad_buffer(ai).data(), n, m, k);
    if (t.wants_grad(bi)) gemm_tn(t.value(ai).data(), g.data(), t.grad_buffer(bi).data(), n, k, m);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank2("transpose", av);
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = av[i * c + j];
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var reshape(Var a, Shape shape) {
  if (product(shape) != a.value().numel()) shape_error("reshape", a.shape(), shape);
  Tensor y(std::move(shape), a.value().values());
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  if (axis > 1) throw InvalidArgument("concat: axis must be 0 or 1");
  Tape& t = *parts[0].tape;
  const Tensor& first = parts[0].value();
  require_rank2("concat", first);
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_rank2("concat", v);
    if (axis == 0) {
      if (v.cols() != first.cols()) shape_error("concat", first.shape(), v.shape());
      rows += v.rows();
      cols = v.cols();
    } else {
      if (v.rows() != first.rows()) shape_error("concat", first.shape(), v.shape());
      cols += v.cols();
      rows = v.rows();
    }
  }
  Tensor y({rows, cols});
  std::vector<std::size_t> idx, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    idx.push_back(p.index);
    offsets.push_back(off);
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) {
        if (axis == 0) y[(off + i) * cols + j] = v[i * v.cols() + j];
        else y[i * cols + off + j] = v[i * v.cols() + j];
      }
    off += axis == 0 ? v.rows() : v.cols();
  }
  return t.record(std::move(y), parts,
                  [idx = std::move(idx), offsets = std::move(offsets), axis, cols](Tape& tp,
                                                                                   std::size_t self) {
                    const Tensor& g = tp.grad_at(self);
                    for (std::size_t p = 0; p < idx.size(); ++p) {
                      if (!tp.wants_grad(idx[p])) continue;
                      const Tensor& v = tp.value(idx[p]);
                      Tensor& gp = tp.grad_buffer(idx[p]);
                      const std::size_t off = offsets[p];
                      for (std::size_t i = 0; i < v.rows(); ++i)
                        for (std::size_t j = 0; j < v.cols(); ++j) {
                          gp[i * v.cols() + j] +=
                              axis == 0 ? g[(off + i) * cols + j] : g[i * cols + off + j];
                        }
                    }
                  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (av.rank() == 1 && axis == 0) {
    if (begin > end || end > av.numel())
      throw InvalidArgument("slice: range out of bounds for " + shape_str(av.shape()));
    Tensor y({end - begin}, std::vector<double>(av.data() + begin, av.data() + end));
    const auto ai = a.index;
    return a.tape->record(std::move(y), {a}, [ai, begin](Tape& t, std::size_t self) {
      const Tensor& g = t.grad_at(self);
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[begin + i] += g[i];
    });
  }
  require_rank2("slice", av);
  if (axis > 1) throw InvalidArgument("slice: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  const std::size_t lim = axis == 0 ? r : c;
  if (begin > end || end > lim)
    throw InvalidArgument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") out of bounds for " + shape_str(av.shape()));
  const std::size_t nr = axis == 0 ? end - begin : r;
  const std::size_t nc = axis == 0 ? c : end - begin;
  Tensor y({nr, nc});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t j = 0; j < nc; ++j)
      y[i * nc + j] = axis == 0 ? av[(begin + i) * c + j] : av[i * c + begin + j];
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai, axis, begin, nr, nc, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nc; ++j) {
        if (axis == 0) ga[(begin + i) * c + j] += g[i * nc + j];
        else ga[i * c + begin + j] += g[i * nc + j];
      }
  });
}

Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
  const Tensor& tv = table.value();
  require_rank2("gather_rows", tv);
  const std::size_t c = tv.cols();
  Tensor y({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows())
      throw InvalidArgument("gather_rows: row " + std::to_string(ids[i]) + " out of range for " +
                            shape_str(tv.shape()));
    std::memcpy(y.data() + i * c, tv.data() + ids[i] * c, c * sizeof(double));
  }
  const auto ti = table.index;
  std::vector<std::uint32_t> rows(ids.begin(), ids.end());
  return table.tape->record(std::move(y), {table},
                            [ti, c, rows = std::move(rows)](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad_at(self);
                              Tensor& gt = t.grad_buffer(ti);
                              for (std::size_t i = 0; i < rows.size(); ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  gt[rows[i] * c + j] += g[i * c + j];
                            });
}

// ---- reductions -------------------------------------------------------------

Var reduce_sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.values()) s += x;
  const auto ai = a.index;
  return a.tape->record(Tensor::scalar(s), {a}, [ai](Tape& t, std::size_t self) {
    const double g = t.grad_at(self)[0];
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

Var reduce_mean(Var a) {
  const auto n = a.value().numel();
  if (n == 0) throw InvalidArgument("reduce_mean of an empty tensor");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(n));
}

Var reduce_sum(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  require_rank2("reduce_sum", av);
  if (axis > 1) throw InvalidArgument("reduce_sum: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor y(axis == 0 ? Shape{1, c} : Shape{r, 1}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[axis == 0 ? j : i] += av[i * c + j];
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai, axis, r, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 0 ? j : i];
  });
}

Var reduce_mean(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  require_rank2("reduce_mean", av);
  const std::size_t n = axis == 0 ? av.rows() : av.cols();
  if (n == 0) throw InvalidArgument("reduce_mean over an empty axis");
  return scale(reduce_sum(a, axis), 1.0 / static_cast<double>(n));
}

Var reduce_min(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  require_rank2("reduce_min", av);
  if (axis > 1) throw InvalidArgument("reduce_min: axis must be 0 or 1");
  const std::size_t r = av.rows(), c = av.cols();
  if (r == 0 || c == 0) throw InvalidArgument("reduce_min of an empty matrix");
  const std::size_t outer = axis == 0 ? c : r, inner = axis == 0 ? r : c;
  Tensor y(axis == 0 ? Shape{1, c} : Shape{r, 1});
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = axis == 0 ? o : o * c;
    for (std::size_t k = 1; k < inner; ++k) {
      const std::size_t idx = axis == 0 ? k * c + o : o * c + k;
      if (av[idx] < av[best]) best = idx;
    }
    arg[o] = best;
    y[o] = av[best];
  }
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t o = 0; o < arg.size(); ++o) ga[arg[o]] += g[o];
  });
}

Var dot(Var a, Var b) {
  require_same("dot", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * bv[i];
  const auto ai = a.index, bi = b.index;
  return a.tape->record(Tensor::scalar(s), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const double g = t.grad_at(self)[0];
    if (t.wants_grad(ai)) {
      const Tensor& bv = t.value(bi);
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g * bv[i];
    }
    if (t.wants_grad(bi)) {
      const Tensor& av = t.value(ai);
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g * av[i];
    }
  });
}

Var l1_distance(Var a, Var b) {
  require_same("l1_distance", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += std::abs(av[i] - bv[i]);
  const auto ai = a.index, bi = b.index;
  return a.tape->record(Tensor::scalar(s), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const double g = t.grad_at(self)[0];
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    auto sign = [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); };
    if (t.wants_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g * sign(av[i] - bv[i]);
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= g * sign(av[i] - bv[i]);
    }
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  std::size_t r, c;
  if (av.rank() == 1) {
    if (axis != 0) throw InvalidArgument("softmax: axis out of range for a vector");
    r = 1;
    c = av.numel();
    axis = 1;
  } else {
    require_rank2("softmax", av);
    if (axis > 1) throw InvalidArgument("softmax: axis must be 0 or 1");
    r = av.rows();
    c = av.cols();
  }
  const std::size_t outer = axis == 1 ? r : c, inner = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  auto at = [&](std::size_t o, std::size_t k) { return axis == 1 ? o * c + k : k * c + o; };
  Tensor y(av.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inner; ++k) mx = std::max(mx, av[at(o, k)]);
    double s = 0.0;
    for (std::size_t k = 0; k < inner; ++k) {
      const double e = std::exp(av[at(o, k)] - mx);
      y[at(o, k)] = e;
      s += e;
    }
    for (std::size_t k = 0; k < inner; ++k) y[at(o, k)] /= s;
  }
  (void)stride;
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a}, [ai, axis, outer, inner, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ai);
    auto at = [&](std::size_t o, std::size_t k) { return axis == 1 ? o * c + k : k * c + o; };
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += g[at(o, k)] * y[at(o, k)];
      for (std::size_t k = 0; k < inner; ++k) ga[at(o, k)] += y[at(o, k)] * (g[at(o, k)] - s);
    }
  });
}

Var layer_norm(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rank() == 1 ? 1 : av.rows();
  const std::size_t c = av.rank() == 1 ? av.numel() : av.cols();
  if (av.rank() > 2) throw InvalidArgument("layer_norm: expected rank <= 2");
  Tensor y(av.shape());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (x[j] - mean) * inv_std[i];
  }
  const auto ai = a.index;
  return a.tape->record(std::move(y), {a},
                        [ai, r, c, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                          const Tensor& g = t.grad_at(self);
                          const Tensor& y = t.value(self);
                          Tensor& ga = t.grad_buffer(ai);
                          const double n = static_cast<double>(c);
                          for (std::size_t i = 0; i < r; ++i) {
                            double mg = 0.0, mgy = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                              mg += g[i * c + j];
                              mgy += g[i * c + j] * y[i * c + j];
                            }
                            mg /= n;
                            mgy /= n;
                            for (std::size_t j = 0; j < c; ++j)
                              ga[i * c + j] +=
                                  inv_std[i] * (g[i * c + j] - mg - y[i * c + j] * mgy);
                          }
                        });
}

// ---- Adam -------------------------------------------------------------------

void adam_step(std::span<Parameter> params, std::span<const Tensor> grads, AdamState& s, double lr) {
  if (grads.size() != params.size())
    throw InvalidArgument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                          std::to_string(params.size()) + " parameters");
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.value.shape(), 0.0);
      s.v.emplace_back(p.value.shape(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw InvalidArgument("adam_step: optimizer state size mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k].value;
    Tensor& m = s.m[k];
    Tensor& v = s.v[k];
    if (m.shape() != p.shape()) throw InvalidArgument("adam_step: moment shape mismatch for " + params[k].name);
    const Tensor& g = grads[k];
    const bool zero = g.numel() == 0;
    if (!zero && g.shape() != p.shape())
      shape_error("adam_step", p.shape(), g.shape());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = zero ? 0.0 : g[i];
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p[i] -= lr * mh / (std::sqrt(vh) + s.eps);
    }
  }
}

// ---- checkpoint -------------------------------------------------------------

namespace {
constexpr char kMagic[7] = {'P', 'R', 'O', 'Q', 'E', 'C', 'K'};

void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_cstr(std::istream& in) {
  std::string s;
  if (!std::getline(in, s, '\0')) throw ParseError("checkpoint truncated");
  return s;
}
}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  out.put(static_cast<char>(kCheckpointVersion));
  put_u64(out, ckpt.metadata.size());
  out.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  put_u64(out, ckpt.tensors.size());
  for (const auto& nt : ckpt.tensors) {
    if (nt.name.find('\0') != std::string::npos) throw InvalidArgument("tensor name contains NUL");
    out.write(nt.name.c_str(), static_cast<std::streamsize>(nt.name.size() + 1));
    std::string shape;
    for (std::size_t i = 0; i < nt.tensor.rank(); ++i) {
      if (i) shape += ',';
      shape += std::to_string(nt.tensor.shape()[i]);
    }
    out.write(shape.c_str(), static_cast<std::streamsize>(shape.size() + 1));
    for (double x : nt.tensor.values()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError(path.string() + ": not a checkpoint file");
  const int version = in.get();
  if (version != kCheckpointVersion)
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto meta_len = get_u64(in);
  ck.metadata.resize(meta_len);
  if (!in.read(ck.metadata.data(), static_cast<std::streamsize>(meta_len)))
    throw ParseError(path.string() + ": checkpoint truncated");
  const auto count = get_u64(in);
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.name = get_cstr(in);
    const auto shape_text = get_cstr(in);
    Shape shape;
    std::stringstream ss(shape_text);
    std::string part;
    while (std::getline(ss, part, ',')) shape.push_back(std::stoull(part));
    Tensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std::bit_cast<double>(get_u64(in));
    nt.tensor = std::move(t);
    ck.tensors.push_back(std::move(nt));
  }
  return ck;
}

}  // namespace proqe::ad
