#include "klnorm/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <utility>

namespace klnorm {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "}";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& msg) {
  throw std::invalid_argument(op + ": " + msg);
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape,
                                              std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    shape_error("Tensor", "shape " + shape_str(shape) + " does not match " +
                              std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) {
  return Tensor(make_impl(Shape{}, {value}));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::row(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(make_impl(std::move(s), std::move(values)));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> data) {
  return Tensor(make_impl(Shape{rows, cols}, std::move(data)));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::invalid_argument("Tensor: undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.size() < 2 ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  if (s.empty()) return 1;
  return s.back();
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw std::invalid_argument("Tensor: undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::data_mut() {
  if (!impl_) throw std::invalid_argument("Tensor: undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item: tensor has " +
                                std::to_string(numel()) + " elements");
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw std::invalid_argument("Tensor::at: index out of range");
  return impl_->data[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw std::invalid_argument("Tensor::at(i,j): rank != 2");
  if (i >= impl_->shape[0] || j >= impl_->shape[1]) {
    throw std::invalid_argument("Tensor::at: index out of range");
  }
  return impl_->data[i * impl_->shape[1] + j];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::invalid_argument("Tensor: undefined tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw std::invalid_argument("Tensor::grad: no gradient accumulated");
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  return Tensor(make_impl(shape(), {impl_->data.begin(), impl_->data.end()}));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    shape_error("reshape", "cannot view " + shape_str(this->shape()) + " as " +
                               shape_str(shape));
  }
  Tensor out =
      Tensor::from_data(std::move(shape), {impl_->data.begin(), impl_->data.end()});
  Tape* tp = Tape::active();
  if (tp && (tp->tracked(*this) || requires_grad())) {
    int pa = tp->node_of(*this);
    std::size_t n = numel();
    tp->record(out, [pa, n](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_ids{1};
}  // namespace

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
  gen_ = g_tape_ids.fetch_add(1, std::memory_order_relaxed);
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracked(const Tensor& t) const {
  const auto* impl = t.impl();
  return impl && impl->tape == this && impl->node >= 0 &&
         impl->tape_gen == gen_;
}

int Tape::node_of(const Tensor& t) {
  auto* impl = t.impl();
  if (!impl) return -1;
  if (tracked(t)) return impl->node;
  if (!impl->requires_grad) return -1;
  auto it = leaves_.find(impl);
  if (it != leaves_.end()) return it->second;
  Node node;
  node.out = t.impl_ptr();
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace(impl, id);
  impl->tape = this;
  impl->node = id;
  impl->tape_gen = gen_;
  return id;
}

int Tape::record(
    const Tensor& out,
    std::function<void(Tape&, const std::vector<double>&)> backprop) {
  Node node;
  node.out = out.impl_ptr();
  node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  int id = static_cast<int>(nodes_.size()) - 1;
  auto* impl = out.impl();
  impl->tape = this;
  impl->node = id;
  impl->tape_gen = gen_;
  return id;
}

std::vector<double>& Tape::grad_buf(int node_id) {
  auto& buf = grads_[static_cast<std::size_t>(node_id)];
  if (buf.empty()) {
    buf.assign(shape_numel(nodes_[static_cast<std::size_t>(node_id)].out->shape),
               0.0);
  }
  return buf;
}

void Tape::backward(const Tensor& loss) {
  if (!tracked(loss)) {
    throw std::invalid_argument(
        "backward: loss is not recorded on the active tape");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  }
  const int start = loss.impl()->node;
  grads_.assign(nodes_.size(), {});
  grad_buf(start)[0] = 1.0;
  for (int i = start; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (grads_[static_cast<std::size_t>(i)].empty() || !node.backprop) continue;
    node.backprop(*this, grads_[static_cast<std::size_t>(i)]);
  }
  for (const auto& [impl, id] : leaves_) {
    const auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) impl->grad[i] += g[i];
  }
  grads_.clear();
}

void backward(const Tensor& loss) {
  Tape* tp = Tape::active();
  if (!tp) throw std::invalid_argument("backward: no active tape");
  tp->backward(loss);
}

void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

namespace {

struct BcastPlan {
  Shape out_shape;
  std::vector<std::size_t> out_dims;  // padded
  std::vector<std::size_t> a_strides;  // 0 on broadcast axes
  std::vector<std::size_t> b_strides;
  std::size_t n = 0;

  std::size_t map(std::size_t flat, const std::vector<std::size_t>& strides,
                  const std::vector<std::size_t>& out_strides) const {
    std::size_t idx = 0;
    for (std::size_t d = 0; d < out_dims.size(); ++d) {
      const std::size_t coord = flat / out_strides[d];
      flat -= coord * out_strides[d];
      idx += coord * strides[d];
    }
    return idx;
  }

  std::vector<std::size_t> out_strides;
};

Shape pad_shape(const Shape& s, std::size_t rank) {
  Shape out(rank, 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[rank - s.size() + i] = s[i];
  }
  return out;
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * s[i];
  }
  return strides;
}

BcastPlan make_plan(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  const Shape pa = pad_shape(a, rank);
  const Shape pb = pad_shape(b, rank);
  BcastPlan plan;
  plan.out_dims.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d]) {
      plan.out_dims[d] = pa[d];
    } else if (pa[d] == 1) {
      plan.out_dims[d] = pb[d];
    } else if (pb[d] == 1) {
      plan.out_dims[d] = pa[d];
    } else {
      shape_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) +
                          " are not broadcast-compatible");
    }
  }
  plan.out_shape = plan.out_dims;
  const auto sa = row_major_strides(pa);
  const auto sb = row_major_strides(pb);
  plan.a_strides.resize(rank);
  plan.b_strides.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    plan.a_strides[d] = pa[d] == 1 ? 0 : sa[d];
    plan.b_strides[d] = pb[d] == 1 ? 0 : sb[d];
  }
  plan.out_strides = row_major_strides(plan.out_dims);
  plan.n = shape_numel(plan.out_dims);
  return plan;
}

bool any_tracked(std::initializer_list<const Tensor*> ins) {
  Tape* tp = Tape::active();
  if (!tp) return false;
  for (const Tensor* t : ins) {
    if (t->defined() && (tp->tracked(*t) || t->requires_grad())) return true;
  }
  return false;
}

// Generic broadcasting binary op. FOut(a,b) -> out value; DA/DB give the
// local partials as functions of (a, b, out).
template <class FOut, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FOut f,
                 DA dfa, DB dfb) {
  const BcastPlan plan = make_plan(name, a.shape(), b.shape());
  std::vector<double> out(plan.n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < plan.n; ++i) {
    out[i] = f(ad[plan.map(i, plan.a_strides, plan.out_strides)],
               bd[plan.map(i, plan.b_strides, plan.out_strides)]);
  }
  Tensor result = Tensor::from_data(plan.out_shape, std::move(out));
  if (any_tracked({&a, &b})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    const int pb = tp.node_of(b);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto oi = result.impl_ptr();
    tp.record(result, [plan, pa, pb, ai, bi, oi, dfa,
                       dfb](Tape& t, const std::vector<double>& g) {
      for (std::size_t i = 0; i < plan.n; ++i) {
        const std::size_t ia = plan.map(i, plan.a_strides, plan.out_strides);
        const std::size_t ib = plan.map(i, plan.b_strides, plan.out_strides);
        const double av = ai->data[ia];
        const double bv = bi->data[ib];
        const double ov = oi->data[i];
        if (pa >= 0) t.grad_buf(pa)[ia] += g[i] * dfa(av, bv, ov);
        if (pb >= 0) t.grad_buf(pb)[ib] += g[i] * dfb(av, bv, ov);
      }
    });
  }
  return result;
}

template <class FOut, class DA>
Tensor unary_op(const char* name, const Tensor& a, FOut f, DA dfa) {
  (void)name;
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i]);
  Tensor result = Tensor::from_data(a.shape(), std::move(out));
  if (any_tracked({&a})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    auto ai = a.impl_ptr();
    auto oi = result.impl_ptr();
    tp.record(result, [n, pa, ai, oi, dfa](Tape& t,
                                           const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += g[i] * dfa(ai->data[i], oi->data[i]);
      }
    });
  }
  return result;
}

void check_domain(const char* op, const Tensor& t, bool strict_positive) {
  for (double v : t.data()) {
    if (strict_positive ? !(v > 0.0) : v == 0.0) {
      throw NumericalError(std::string(op) + ": domain violation (" +
                           (strict_positive ? "input must be > 0, got "
                                            : "division by zero, got ") +
                           std::to_string(v) + ")");
    }
  }
}

}  // namespace

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericalError(what + ": non-finite value " + std::to_string(v));
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_domain("div", b, /*strict_positive=*/false);
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor sqrt(const Tensor& a) {
  check_domain("sqrt", a, /*strict_positive=*/true);
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double o) { return 0.5 / o; });
}

Tensor exp(const Tensor& a) {
  Tensor out = unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double o) { return o; });
  check_finite(out, "exp");
  return out;
}

Tensor log(const Tensor& a) {
  check_domain("log", a, /*strict_positive=*/true);
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      "clamp", a,
      [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    shape_error("matmul", "expected rank-2 operands, got " +
                              shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] += av * bd[p * n + j];
      }
    }
  }
  Tensor result = Tensor::matrix(m, n, std::move(out));
  if (any_tracked({&a, &b})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    const int pb = tp.node_of(b);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    tp.record(result, [m, k, n, pa, pb, ai,
                       bi](Tape& t, const std::vector<double>& g) {
      if (pa >= 0) {
        auto& ga = t.grad_buf(pa);  // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              acc += g[i * n + j] * bi->data[p * n + j];
            }
            ga[i * k + p] += acc;
          }
        }
      }
      if (pb >= 0) {
        auto& gb = t.grad_buf(pb);  // dB = A^T * G
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              acc += ai->data[i * k + p] * g[i * n + j];
            }
            gb[p * n + j] += acc;
          }
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_error("transpose", "expected rank-2 operand");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  }
  Tensor result = Tensor::matrix(n, m, std::move(out));
  if (any_tracked({&a})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    tp.record(result, [m, n, pa](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_all(const char* name, const Tensor& a, bool take_mean) {
  const std::size_t n = a.numel();
  if (n == 0) shape_error(name, "empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
  Tensor result = Tensor::scalar(acc * scale);
  if (any_tracked({&a})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    tp.record(result, [n, pa, scale](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] * scale;
    });
  }
  return result;
}

Tensor reduce_cols(const char* name, const Tensor& a, bool take_mean,
                   bool keepdims) {
  if (a.rank() != 2) shape_error(name, "expected rank-2 operand");
  const std::size_t m = a.shape()[0], d = a.shape()[1];
  if (d == 0) shape_error(name, "empty rows");
  std::vector<double> out(m, 0.0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += ad[i * d + j];
    out[i] = acc;
  }
  const double scale = take_mean ? 1.0 / static_cast<double>(d) : 1.0;
  if (take_mean) {
    for (double& v : out) v *= scale;
  }
  Shape shape = keepdims ? Shape{m, 1} : Shape{m};
  Tensor result = Tensor::from_data(std::move(shape), std::move(out));
  if (any_tracked({&a})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    tp.record(result, [m, d, pa, scale](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[i] * scale;
      }
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_all("sum", a, false); }
Tensor mean(const Tensor& a) { return reduce_all("mean", a, true); }

Tensor sum_cols(const Tensor& a, bool keepdims) {
  return reduce_cols("sum_cols", a, false, keepdims);
}

Tensor mean_cols(const Tensor& a, bool keepdims) {
  return reduce_cols("mean_cols", a, true, keepdims);
}

Tensor mean_batch(const Tensor& a) {
  if (a.rank() != 2) shape_error("mean_batch", "expected rank-2 operand");
  const std::size_t m = a.shape()[0], d = a.shape()[1];
  if (m == 0) shape_error("mean_batch", "empty batch");
  std::vector<double> out(d, 0.0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[j] += ad[i * d + j];
  }
  const double scale = 1.0 / static_cast<double>(m);
  for (double& v : out) v *= scale;
  Tensor result = Tensor::row(std::move(out));
  if (any_tracked({&a})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(a);
    tp.record(result, [m, d, pa, scale](Tape& t, const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[j] * scale;
      }
    });
  }
  return result;
}

Stats reduce_stats(const Tensor& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument("reduce_stats: expected rank-2 input, got " +
                                shape_str(x.shape()));
  }
  if (x.shape()[0] == 0) {
    throw std::invalid_argument("reduce_stats: empty batch");
  }
  Stats s;
  s.mean = mean_batch(x);
  Tensor centered = sub(x, s.mean);
  s.var = mean_batch(mul(centered, centered));
  return s;
}

Stats row_stats(const Tensor& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument("row_stats: expected rank-2 input, got " +
                                shape_str(x.shape()));
  }
  Stats s;
  s.mean = mean_cols(x, /*keepdims=*/true);
  Tensor centered = sub(x, s.mean);
  s.var = mean_cols(mul(centered, centered), /*keepdims=*/true);
  return s;
}

// ---------------------------------------------------------------------------
// Fused softmax cross-entropy
// ---------------------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be rank-2, got " +
                                shape_str(logits.shape()));
  }
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != m) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(m) +
                                " rows but " + std::to_string(labels.size()) +
                                " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(c) +
                                  ")");
    }
  }
  const auto ld = logits.data();
  std::vector<double> probs(m * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double mx = ld[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, ld[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(ld[i * c + j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    const double logp =
        ld[i * c + static_cast<std::size_t>(labels[i])] - mx - std::log(z);
    loss -= logp;
  }
  loss /= static_cast<double>(m);
  Tensor result = Tensor::scalar(loss);
  if (any_tracked({&logits})) {
    Tape& tp = *Tape::active();
    const int pa = tp.node_of(logits);
    std::vector<int> ys(labels.begin(), labels.end());
    tp.record(result, [m, c, pa, probs = std::move(probs),
                       ys = std::move(ys)](Tape& t,
                                           const std::vector<double>& g) {
      auto& ga = t.grad_buf(pa);
      const double scale = g[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot =
              (static_cast<std::size_t>(ys[i]) == j) ? 1.0 : 0.0;
          ga[i * c + j] += scale * (probs[i * c + j] - onehot);
        }
      }
    });
  }
  return result;
}

}  // namespace klnorm
