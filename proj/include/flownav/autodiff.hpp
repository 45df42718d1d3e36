#pragma once

// Define-by-run reverse-mode autodiff over dense double tensors of rank <= 2.
//
// All numerics in the project are double precision. A Tensor is a shared
// handle: copies alias the same storage, clone() makes a deep copy.
// Operations record a backward closure on the thread's active Tape when any
// input requires a gradient; backward() replays the tape in reverse once and
// accumulates (adds) into .grad.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flownav::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // rank 2 only
  std::size_t cols() const;  // rank 2: shape[1]; rank 1: shape[0]

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;  // empty span when no gradient arrived
  void zero_grad();

  // Deep copy of data (and shape); the copy is a fresh leaf.
  Tensor clone() const;
  // Same storage semantics as clone() but never tracks gradients.
  Tensor detach() const { return clone(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of executed primitives. Inputs of every entry were produced
// before it, so a reverse sweep is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<Node> output, BackwardFn fn);
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

  // Runs, in reverse order, each recorded closure whose output received a
  // gradient, then clears. Returns the number of closures that executed.
  std::size_t replay();

 private:
  struct Entry {
    std::shared_ptr<Node> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// The tape new operations record onto (thread local).
Tape& active_tape();

// Installs `tape` as the active tape for the enclosing scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the enclosing scope; results never require grad.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Marks a non-leaf value so that backward() populates its .grad; downstream
// operations are then recorded as usual.
Tensor watch(const Tensor& t);

// Seeds d(loss)/d(loss) = 1 on a scalar and replays the active tape.
void backward(const Tensor& loss);

// Row-major boolean keep-mask for softmax_rows; keep[i*cols+j] != 0 means visible.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  static Mask causal(std::size_t n, std::size_t prefix = 0);
  bool visible(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
};

// --- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& x, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // [n×d] + [d]

Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);
Tensor concat_features(const Tensor& a, const Tensor& b);  // column concat
Tensor concat_rows(const Tensor& a, const Tensor& b);      // row concat
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);  // -> [m×d]
// Copy of `base` with rows[i] replaced by (or, when accumulate, increased by) values.row(i).
Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& values,
                    bool accumulate = false);
Tensor select_row(const Tensor& x, std::size_t row);  // -> [d]
Tensor mean_rows(const Tensor& x);                    // [k×d] -> [d]
Tensor sum(const Tensor& x);                          // -> scalar
Tensor reshape(const Tensor& x, Shape shape);

Tensor cross_entropy(const Tensor& logits, std::int64_t target);  // logits [V]
// Mean next-token loss over rows of [n×V] logits.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace flownav::ad
