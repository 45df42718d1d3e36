#include "flownav/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "flownav/errors.hpp"

namespace flownav::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

thread_local Tape default_tape;
thread_local Tape* current_tape = nullptr;
thread_local bool grad_on = true;

Node& node_of(const Tensor& t) {
  if (!t.defined()) throw PreconditionError("operation on an undefined tensor");
  return *t.node();
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_on) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

void accumulate(const std::shared_ptr<Node>& n, std::span<const double> g) {
  if (!n->requires_grad) return;
  auto& buf = n->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void record(const Tensor& out, Tape::BackwardFn fn) { active_tape().record(out.node(), std::move(fn)); }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return make(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  return make(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_of(*this).shape; }
std::size_t Tensor::numel() const { return node_of(*this).data.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() on tensor of shape " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() == 2) return s[1];
  if (s.size() == 1) return s[0];
  throw ShapeError("cols() on tensor of shape " + shape_str(s));
}

std::span<const double> Tensor::data() const { return node_of(*this).data; }
std::span<double> Tensor::mutable_data() { return node_of(*this).data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  node_of(*this).requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_of(*this).grad; }

void Tensor::zero_grad() {
  auto& n = node_of(*this);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& n = node_of(*this);
  return make(n.shape, n.data, false);
}

// --- Tape ----------------------------------------------------------------------

void Tape::record(std::shared_ptr<Node> output, BackwardFn fn) {
  entries_.push_back({std::move(output), std::move(fn)});
}

std::size_t Tape::replay() {
  std::size_t visited = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // nothing flowed into this op
    it->fn();
    ++visited;
  }
  entries_.clear();
  return visited;
}

Tape& active_tape() { return current_tape ? *current_tape : default_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(grad_on) { grad_on = false; }
NoGradGuard::~NoGradGuard() { grad_on = previous_; }

bool grad_enabled() { return grad_on; }

Tensor watch(const Tensor& t) {
  if (!grad_on) return t;
  node_of(t).requires_grad = true;
  return t;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw PreconditionError("backward: loss does not depend on any tracked tensor");
  loss.node()->grad_buffer()[0] += 1.0;
  active_tape().replay();
}

Mask Mask::causal(std::size_t n, std::size_t prefix) {
  Mask m{n, n + prefix, std::vector<std::uint8_t>(n * (n + prefix), 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < prefix + i + 1; ++j) m.keep[i * m.cols + j] = 1;
  }
  return m;
}

// --- primitives ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  auto res = make({m, n}, std::move(out), wants_grad({&a, &b}));
  if (res.requires_grad()) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), m, k, n] {
      MapC dc(on->grad.data(), m, n);
      if (an->requires_grad) Map(an->grad_buffer().data(), m, k).noalias() += dc * MapC(bn->data.data(), k, n).transpose();
      if (bn->requires_grad) Map(bn->grad_buffer().data(), k, n).noalias() += MapC(an->data.data(), m, k).transpose() * dc;
    });
  }
  return res;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_bt");
  require_rank(b, 2, "matmul_bt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                     shape_str(b.shape()) + "ᵀ");
  }
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
  auto res = make({m, n}, std::move(out), wants_grad({&a, &b}));
  if (res.requires_grad()) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), m, k, n] {
      MapC dc(on->grad.data(), m, n);
      if (an->requires_grad) Map(an->grad_buffer().data(), m, k).noalias() += dc * MapC(bn->data.data(), n, k);
      if (bn->requires_grad) Map(bn->grad_buffer().data(), n, k).noalias() += dc.transpose() * MapC(an->data.data(), m, k);
    });
  }
  return res;
}

namespace {

template <class Fwd, class Bwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  require_same(a, b, name);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  auto res = make(a.shape(), std::move(out), wants_grad({&a, &b}));
  if (res.requires_grad()) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), bwd] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(an->data[i], bn->data[i], true);
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * bwd(an->data[i], bn->data[i], false);
      }
    });
  }
  return res;
}

template <class Fwd, class Deriv>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  auto res = make(x.shape(), std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), deriv] {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * deriv(xn->data[i], on->data[i]);
    });
  }
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "add", [](double x, double y) { return x + y; },
                            [](double, double, bool) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "sub", [](double x, double y) { return x - y; },
                            [](double, double, bool lhs) { return lhs ? 1.0 : -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, "mul", [](double x, double y) { return x * y; },
                            [](double x, double y, bool lhs) { return lhs ? y : x; });
}

Tensor scale(const Tensor& x, double s) {
  return unary_elementwise(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  if (bias.cols() != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const auto n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bd[j];
  auto res = make(x.shape(), std::move(out), wants_grad({&x, &bias}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), bn = bias.node(), on = res.node(), n, d] {
      accumulate(xn, on->grad);
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += on->grad[i * d + j];
      }
    });
  }
  return res;
}

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
  require_rank(x, 2, "softmax_rows");
  const auto m = x.rows(), n = x.cols();
  if (mask && (mask->rows != m || mask->cols != n)) {
    throw ShapeError("softmax_rows: mask [" + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                     "] does not match " + shape_str(x.shape()));
  }
  const auto xd = x.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->visible(i, j)) continue;
      mx = std::max(mx, xd[i * n + j]);
      any = true;
    }
    if (!any) throw DegenerateError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask->visible(i, j)) continue;
      out[i * n + j] = std::exp(xd[i * n + j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  auto res = make(x.shape(), std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), m, n] {
      auto& gx = xn->grad_buffer();
      const auto& y = on->data;
      const auto& gy = on->grad;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (gy[i * n + j] - dot);
      }
    });
  }
  return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const auto n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries, got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(n * d);
  std::vector<double> xhat(n * d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xd[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xd[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xd[i * d + j] - mean) * inv_std[i];
      out[i * d + j] = gd[j] * xhat[i * d + j] + bd[j];
    }
  }
  auto res = make(x.shape(), std::move(out), wants_grad({&x, &gamma, &beta}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = res.node(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), n, d] {
      const auto& gy = on->grad;
      if (gn->requires_grad) {
        auto& gg = gn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xhat[i * d + j];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += gy[i * d + j];
      }
      if (xn->requires_grad) {
        auto& gx = xn->grad_buffer();
        const auto dd = static_cast<double>(d);
        for (std::size_t i = 0; i < n; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gy[i * d + j] * gn->data[j];
            s1 += dxh;
            s2 += dxh * xhat[i * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gy[i * d + j] * gn->data[j];
            gx[i * d + j] += inv_std[i] / dd * (dd * dxh - s1 - xhat[i * d + j] * s2);
          }
        }
      }
    });
  }
  return res;
}

Tensor gelu(const Tensor& x) {
  return unary_elementwise(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v))); },
      [](double v, double) {
        const double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
        const double t = std::tanh(u);
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(x, [](double v) { return v > 0.0 ? v : 0.0; },
                           [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary_elementwise(x, [](double v) { return std::tanh(v); },
                           [](double, double y) { return 1.0 - y * y; });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding_lookup");
  const auto vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto res = make({ids.size(), d}, std::move(out), wants_grad({&table}));
  if (res.requires_grad()) {
    record(res, [tn = table.node(), on = res.node(), ids = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
      auto& gt = tn->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[i]) * d + j] += on->grad[i * d + j];
    });
  }
  return res;
}

Tensor concat_features(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(parts);
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto n = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.rows() != n) {
      throw ShapeError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.cols();
  }
  std::vector<double> out(n * total);
  bool track = false;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    const auto pd = p.data();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(i * w), w, out.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
    offset += w;
    track = track || p.requires_grad();
  }
  auto res = make({n, total}, std::move(out), track && grad_on);
  if (res.requires_grad()) {
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    record(res, [nodes = std::move(nodes), on = res.node(), n, total] {
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        const auto w = pn->shape[1];
        if (pn->requires_grad) {
          auto& g = pn->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += on->grad[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return res;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: column counts differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto res = make({a.rows() + b.rows(), a.cols()}, std::move(out), wants_grad({&a, &b}));
  if (res.requires_grad()) {
    record(res, [an = a.node(), bn = b.node(), on = res.node()] {
      const auto na = an->data.size();
      accumulate(an, std::span<const double>(on->grad).subspan(0, na));
      accumulate(bn, std::span<const double>(on->grad).subspan(na));
    });
  }
  return res;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width) {
  require_rank(x, 2, "slice_cols");
  const auto n = x.rows(), d = x.cols();
  if (start + width > d) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + width) +
                     ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(n * width);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(i * d + start), width, out.begin() + static_cast<std::ptrdiff_t>(i * width));
  auto res = make({n, width}, std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), n, d, start, width] {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < width; ++j) g[i * d + start + j] += on->grad[i * width + j];
    });
  }
  return res;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const auto n = x.rows(), d = x.cols();
  std::vector<double> out(rows.size() * d);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_str(x.shape()));
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto res = make({rows.size(), d}, std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), rows = std::vector<std::size_t>(rows.begin(), rows.end()), d] {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += on->grad[i * d + j];
    });
  }
  return res;
}

Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& values, bool accumulate_rows) {
  require_rank(base, 2, "scatter_rows");
  require_rank(values, 2, "scatter_rows");
  const auto n = base.rows(), d = base.cols();
  if (values.rows() != rows.size() || values.cols() != d) {
    throw ShapeError("scatter_rows: values " + shape_str(values.shape()) + " do not match " +
                     std::to_string(rows.size()) + " rows of width " + std::to_string(d));
  }
  std::vector<std::uint8_t> replaced(n, 0);
  std::vector<double> out(base.data().begin(), base.data().end());
  const auto vd = values.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("scatter_rows: row " + std::to_string(rows[i]) + " outside " + shape_str(base.shape()));
    if (replaced[rows[i]]) throw IndexError("scatter_rows: duplicate row " + std::to_string(rows[i]));
    replaced[rows[i]] = 1;
    for (std::size_t j = 0; j < d; ++j) {
      auto& dst = out[rows[i] * d + j];
      dst = accumulate_rows ? dst + vd[i * d + j] : vd[i * d + j];
    }
  }
  auto res = make(base.shape(), std::move(out), wants_grad({&base, &values}));
  if (res.requires_grad()) {
    record(res, [bn = base.node(), vn = values.node(), on = res.node(), rows = std::vector<std::size_t>(rows.begin(), rows.end()),
                 replaced = std::move(replaced), accumulate_rows, n, d] {
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          if (replaced[i] && !accumulate_rows) continue;
          for (std::size_t j = 0; j < d; ++j) g[i * d + j] += on->grad[i * d + j];
        }
      }
      if (vn->requires_grad) {
        auto& g = vn->grad_buffer();
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) g[i * d + j] += on->grad[rows[i] * d + j];
      }
    });
  }
  return res;
}

Tensor select_row(const Tensor& x, std::size_t row) {
  require_rank(x, 2, "select_row");
  if (row >= x.rows()) throw IndexError("select_row: row " + std::to_string(row) + " outside " + shape_str(x.shape()));
  const auto d = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(row * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
  auto res = make({d}, std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), row, d] {
      auto& g = xn->grad_buffer();
      for (std::size_t j = 0; j < d; ++j) g[row * d + j] += on->grad[j];
    });
  }
  return res;
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const auto k = x.rows(), d = x.cols();
  if (k == 0) throw DegenerateError("mean_rows: empty aggregation (0 rows)");
  std::vector<double> out(d, 0.0);
  const auto xd = x.data();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += xd[i * d + j];
  for (auto& v : out) v /= static_cast<double>(k);
  auto res = make({d}, std::move(out), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node(), k, d] {
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += on->grad[j] / static_cast<double>(k);
    });
  }
  return res;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  auto res = make({}, {total}, wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node()] {
      auto& g = xn->grad_buffer();
      for (auto& v : g) v += on->grad[0];
    });
  }
  return res;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  auto res = make(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), wants_grad({&x}));
  if (res.requires_grad()) {
    record(res, [xn = x.node(), on = res.node()] { accumulate(xn, on->grad); });
  }
  return res;
}

namespace {

// log-softmax probabilities of one row, written into `probs`; returns -log p[target].
double row_nll(std::span<const double> logits, std::size_t target, std::span<double> probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    probs[j] = std::exp(logits[j] - mx);
    total += probs[j];
  }
  for (auto& p : probs) p /= total;
  return -(logits[target] - mx - std::log(total));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::int64_t target) {
  require_rank(logits, 1, "cross_entropy");
  const auto v = logits.numel();
  if (target < 0 || static_cast<std::size_t>(target) >= v) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside vocabulary of " + std::to_string(v));
  }
  std::vector<double> probs(v);
  const double loss = row_nll(logits.data(), static_cast<std::size_t>(target), probs);
  auto res = make({}, {loss}, wants_grad({&logits}));
  if (res.requires_grad()) {
    record(res, [ln = logits.node(), on = res.node(), probs = std::move(probs), t = static_cast<std::size_t>(target)] {
      auto& g = ln->grad_buffer();
      const double up = on->grad[0];
      for (std::size_t j = 0; j < probs.size(); ++j) g[j] += up * (probs[j] - (j == t ? 1.0 : 0.0));
    });
  }
  return res;
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy_rows");
  const auto n = logits.rows(), v = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  }
  if (n == 0) throw DegenerateError("cross_entropy_rows: no rows");
  std::vector<double> probs(n * v);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("cross_entropy_rows: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    total += row_nll(logits.data().subspan(i * v, v), static_cast<std::size_t>(targets[i]),
                     std::span<double>(probs).subspan(i * v, v));
  }
  auto res = make({}, {total / static_cast<double>(n)}, wants_grad({&logits}));
  if (res.requires_grad()) {
    record(res, [ln = logits.node(), on = res.node(), probs = std::move(probs),
                 targets = std::vector<std::int32_t>(targets.begin(), targets.end()), n, v] {
      auto& g = ln->grad_buffer();
      const double up = on->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < v; ++j)
          g[i * v + j] += up * (probs[i * v + j] - (static_cast<std::int32_t>(j) == targets[i] ? 1.0 : 0.0));
    });
  }
  return res;
}

}  // namespace flownav::ad
