#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace klnorm {

// Raised when a computation leaves the finite domain (divergence, domain
// violations, failed numerical checks). Distinct from std::invalid_argument,
// which covers shape/config validation.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this leaf
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape that recorded this tensor, if any
  int node = -1;         // node id on that tape
  // Tapes live on the stack and addresses get reused; the generation stamp
  // tells a stale (tape, node) pair from a live one.
  std::uint64_t tape_gen = 0;
};
}  // namespace detail

// Dense row-major f64 tensor with shared storage. Value semantics: copies are
// cheap handles to the same buffer. Data is immutable after creation except
// through data_mut() (optimizer / moving-statistic updates) and the grad
// buffer, which backward() accumulates into.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);  // rank-0
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor row(std::vector<double> values);  // shape {n}
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // 2-d helpers; rank-0/1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> data_mut();
  double item() const;  // requires numel() == 1
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;

  bool has_grad() const;
  std::span<const double> grad() const;  // throws if no grad accumulated
  void zero_grad();

  Tensor clone() const;   // deep copy, untaped
  Tensor detach() const;  // shares storage, drops tape linkage
  Tensor reshape(Shape shape) const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Define-by-run: constructing a Tape makes it the active
// tape for the current thread; ops record nodes while one is active and any
// input is tracked. A tape and the tensors recorded on it are confined to one
// thread; parallelism happens across independent tapes.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Runs reverse accumulation from a taped scalar. Leaf tensors receive
  // d(loss)/d(leaf) in their grad buffers; repeated calls accumulate.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

  // --- recording interface (used by the ops) ---
  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    // Propagates the node's output gradient into its parents' buffers.
    std::function<void(Tape&, const std::vector<double>&)> backprop;
    bool is_leaf = false;
  };
  // Node id for a tensor, registering a leaf when needed. -1 if untracked.
  int node_of(const Tensor& t);
  bool tracked(const Tensor& t) const;
  int record(const Tensor& out,
             std::function<void(Tape&, const std::vector<double>&)> backprop);
  std::vector<double>& grad_buf(int node_id);

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<detail::TensorImpl*, int> leaves_;
  Tape* prev_ = nullptr;
  std::uint64_t gen_ = 0;
};

// Frees the gradient of every parameter in the span.
void zero_grad(std::span<Tensor> params);

// Convenience wrapper: loss.tape->backward(loss).
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. All of them validate shapes and numeric domains up front and raise
// errors naming the operation; none silently produces NaN/Inf from finite
// inputs. Elementwise ops broadcast numpy-style over leading axes (a {d}
// vector against {m,d} rows, a scalar against anything).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // b must be nonzero elementwise
Tensor neg(const Tensor& a);
Tensor sqrt(const Tensor& a);  // strictly positive input
Tensor exp(const Tensor& a);   // output checked finite
Tensor log(const Tensor& a);   // strictly positive input
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator/(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(double a, const Tensor& b);
Tensor operator-(const Tensor& a);

// [m,k] x [k,n] -> [m,n]. Gradients dA = G B^T, dB = A^T G.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);   // all elements -> rank-0
Tensor mean(const Tensor& a);  // all elements -> rank-0

// Axis reductions on 2-d tensors.
Tensor sum_cols(const Tensor& a, bool keepdims = false);   // {m,d} -> {m} / {m,1}
Tensor mean_cols(const Tensor& a, bool keepdims = false);  // per-row mean
Tensor mean_batch(const Tensor& a);                        // {m,d} -> {d}

struct Stats {
  Tensor mean;
  Tensor var;  // biased: divisor m
};

// Per-feature mean and biased variance over the batch axis: {m,d} -> ({d},{d}).
// Composed from primitives, so both statistics are differentiable in x.
Stats reduce_stats(const Tensor& x);

// Per-row mean/variance over features, keeping dims: {m,d} -> ({m,1},{m,1}).
Stats row_stats(const Tensor& x);

// Mean over the batch of -log softmax(logits)[label]; stabilized by row-max
// subtraction. Fused forward/backward node.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const int> labels);

// Throws NumericalError naming `what` if any element is NaN/Inf.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace klnorm
