#pragma once

// Dense row-major tensors with reverse-mode gradient accumulation on a
// dynamic per-forward tape, plus the handful of network ops needed for the
// models in this project (matmul, valid conv, 2x2 maxpool, activations,
// cross-entropy, a fused LSTM cell) and an Adam optimizer.
//
// Scalar type is a template parameter: float is the training type, double is
// used by tests that compare against finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sstn/errors.hpp"
#include "sstn/gemm.hpp"

namespace sstn {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Tape recording is on by default; wrap inference in NoGradGuard.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct TensorImpl;

template <typename S>
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<S>>> inputs;
  std::function<void()> backward;
};

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode<S>> node;  // creator; null for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
  bool tracked() const { return requires_grad || node != nullptr; }
};

template <typename S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorImpl<S>> impl) : impl_(std::move(impl)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }
  static TensorT filled(Shape shape, S value, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl<S>>();
    impl->shape = std::move(shape);
    impl->data.assign(numel(impl->shape), value);
    impl->requires_grad = requires_grad;
    return TensorT(std::move(impl));
  }
  static TensorT from_data(Shape shape, std::vector<S> data,
                           bool requires_grad = false) {
    if (numel(shape) != static_cast<long>(data.size()))
      throw DimensionError("from_data: shape " + shape_str(shape) + " needs " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    auto impl = std::make_shared<TensorImpl<S>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return TensorT(std::move(impl));
  }
  static TensorT scalar(S value) { return filled({1}, value); }
  static TensorT uniform(Shape shape, S lo, S hi, std::mt19937_64& rng,
                         bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (S& v : t.impl_->data) v = static_cast<S>(dist(rng));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  long dim(int i) const { return impl_->shape[i]; }
  long size() const { return static_cast<long>(impl_->data.size()); }

  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }
  std::span<S> values() { return impl_->data; }
  std::span<const S> values() const { return impl_->data; }

  S item() const {
    if (size() != 1) throw StateError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }
  // Row-major multi-index access, for tests and small code paths.
  S at(std::initializer_list<long> idx) const {
    long flat = 0;
    size_t i = 0;
    for (long v : idx) flat = flat * impl_->shape[i++] + v;
    return impl_->data[flat];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    if (impl_->node) throw StateError("requires_grad can only be toggled on leaves");
    impl_->requires_grad = v;
  }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  std::span<const S> grad() const {
    if (impl_->grad.empty()) throw StateError("grad not populated");
    return impl_->grad;
  }
  std::span<S> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
  }

  TensorT clone() const {
    auto impl = std::make_shared<TensorImpl<S>>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return TensorT(std::move(impl));
  }

  // Reverse pass from a scalar. The tape is released afterwards; running
  // backward twice through the same graph is a state error.
  void backward() {
    if (!impl_) throw StateError("backward on undefined tensor");
    if (impl_->data.size() != 1) throw StateError("backward requires a scalar loss");
    if (!impl_->node) {
      impl_->ensure_grad();
      impl_->grad[0] = S(1);
      return;
    }
    std::vector<GradNode<S>*> order;
    topo_collect(impl_->node.get(), order);
    impl_->ensure_grad();
    impl_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      GradNode<S>* n = *it;
      if (!n->backward)
        throw StateError(std::string("graph already freed at op ") + n->op);
      n->backward();
    }
    for (GradNode<S>* n : order) {
      n->backward = nullptr;
      n->inputs.clear();
    }
  }

  std::shared_ptr<TensorImpl<S>>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

 private:
  static void topo_collect(GradNode<S>* root, std::vector<GradNode<S>*>& order) {
    // Iterative post-order DFS over creator nodes; reverse(order) is a valid
    // topological order with the loss's node first.
    std::unordered_set<GradNode<S>*> seen;
    std::vector<std::pair<GradNode<S>*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        GradNode<S>* child = node->inputs[next]->node.get();
        ++next;
        if (child && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorImpl<S>> impl_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename S>
bool any_tracked(std::initializer_list<const TensorT<S>*> ts) {
  if (!GradMode::enabled()) return false;
  for (const TensorT<S>* t : ts)
    if (t->impl()->tracked()) return true;
  return false;
}

template <typename S>
TensorT<S> make_out(Shape shape) {
  auto impl = std::make_shared<TensorImpl<S>>();
  impl->shape = std::move(shape);
  impl->data.resize(numel(impl->shape));
  return TensorT<S>(std::move(impl));
}

template <typename S>
void attach(TensorT<S>& out, const char* op,
            std::vector<std::shared_ptr<TensorImpl<S>>> inputs,
            std::function<void()> backward) {
  auto node = std::make_shared<GradNode<S>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
}

template <typename S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("add", a, b);
  auto out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  long n = a.size();
  for (long i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::any_tracked<S>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool ta = ia->tracked(), tb = ib->tracked();
    detail::attach(out, "add", {ia, ib}, [ia, ib, wo, ta, tb] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      long n = static_cast<long>(o->data.size());
      if (ta) {
        ia->ensure_grad();
        for (long i = 0; i < n; ++i) ia->grad[i] += o->grad[i];
      }
      if (tb) {
        ib->ensure_grad();
        for (long i = 0; i < n; ++i) ib->grad[i] += o->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("sub", a, b);
  auto out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  long n = a.size();
  for (long i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::any_tracked<S>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool ta = ia->tracked(), tb = ib->tracked();
    detail::attach(out, "sub", {ia, ib}, [ia, ib, wo, ta, tb] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      long n = static_cast<long>(o->data.size());
      if (ta) {
        ia->ensure_grad();
        for (long i = 0; i < n; ++i) ia->grad[i] += o->grad[i];
      }
      if (tb) {
        ib->ensure_grad();
        for (long i = 0; i < n; ++i) ib->grad[i] -= o->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mul", a, b);
  auto out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  long n = a.size();
  for (long i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::any_tracked<S>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool ta = ia->tracked(), tb = ib->tracked();
    detail::attach(out, "mul", {ia, ib}, [ia, ib, wo, ta, tb] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      long n = static_cast<long>(o->data.size());
      if (ta) {
        ia->ensure_grad();
        for (long i = 0; i < n; ++i) ia->grad[i] += o->grad[i] * ib->data[i];
      }
      if (tb) {
        ib->ensure_grad();
        for (long i = 0; i < n; ++i) ib->grad[i] += o->grad[i] * ia->data[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  auto out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  long n = a.size();
  for (long i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (detail::any_tracked<S>({&a})) {
    auto ia = a.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "scale", {ia}, [ia, wo, c] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ia->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i) ia->grad[i] += o->grad[i] * c;
    });
  }
  return out;
}

// Natural log; inputs are clamped away from zero so that probabilities
// produced by softmax are safe to pass through.
template <typename S>
TensorT<S> log_op(const TensorT<S>& a) {
  constexpr double kFloor = 1e-12;
  auto out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  long n = a.size();
  for (long i = 0; i < n; ++i)
    po[i] = static_cast<S>(std::log(std::max<double>(pa[i], kFloor)));
  if (detail::any_tracked<S>({&a})) {
    auto ia = a.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "log", {ia}, [ia, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ia->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i)
        ia->grad[i] += static_cast<S>(o->grad[i] / std::max<double>(ia->data[i], kFloor));
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  double acc = 0;
  const S* pa = a.data();
  long n = a.size();
  for (long i = 0; i < n; ++i) acc += pa[i];
  auto out = TensorT<S>::scalar(static_cast<S>(acc));
  if (detail::any_tracked<S>({&a})) {
    auto ia = a.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "sum", {ia}, [ia, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ia->ensure_grad();
      S g = o->grad[0];
      for (S& v : ia->grad) v += g;
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
  long n = a.size();
  double acc = 0;
  const S* pa = a.data();
  for (long i = 0; i < n; ++i) acc += pa[i];
  auto out = TensorT<S>::scalar(static_cast<S>(acc / n));
  if (detail::any_tracked<S>({&a})) {
    auto ia = a.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "mean", {ia}, [ia, wo, n] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ia->ensure_grad();
      S g = o->grad[0] / static_cast<S>(n);
      for (S& v : ia->grad) v += g;
    });
  }
  return out;
}

// Same data, new shape (copying; backward copies back).
template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  auto out = detail::make_out<S>(std::move(shape));
  std::memcpy(out.data(), a.data(), sizeof(S) * a.size());
  if (detail::any_tracked<S>({&a})) {
    auto ia = a.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "reshape", {ia}, [ia, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ia->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i) ia->grad[i] += o->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat_lastdim(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_lastdim: want [R,C1] and [R,C2], got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  long r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  auto out = detail::make_out<S>({r, ca + cb});
  for (long i = 0; i < r; ++i) {
    std::memcpy(out.data() + i * (ca + cb), a.data() + i * ca, sizeof(S) * ca);
    std::memcpy(out.data() + i * (ca + cb) + ca, b.data() + i * cb, sizeof(S) * cb);
  }
  if (detail::any_tracked<S>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool ta = ia->tracked(), tb = ib->tracked();
    detail::attach(out, "concat", {ia, ib}, [ia, ib, wo, ta, tb, r, ca, cb] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      if (ta) {
        ia->ensure_grad();
        for (long i = 0; i < r; ++i)
          for (long j = 0; j < ca; ++j)
            ia->grad[i * ca + j] += o->grad[i * (ca + cb) + j];
      }
      if (tb) {
        ib->ensure_grad();
        for (long i = 0; i < r; ++i)
          for (long j = 0; j < cb; ++j)
            ib->grad[i * cb + j] += o->grad[i * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  long m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_out<S>({m, n});
  detail::gemm<S>(false, false, m, n, k, S(1), a.data(), k, b.data(), n, S(0),
                  out.data(), n);
  if (detail::any_tracked<S>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool ta = ia->tracked(), tb = ib->tracked();
    detail::attach(out, "matmul", {ia, ib}, [ia, ib, wo, ta, tb, m, k, n] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      if (ta) {
        ia->ensure_grad();
        // dA += dC * B^T
        detail::gemm<S>(false, true, m, k, n, S(1), o->grad.data(), n,
                        ib->data.data(), n, S(1), ia->grad.data(), k);
      }
      if (tb) {
        ib->ensure_grad();
        // dB += A^T * dC
        detail::gemm<S>(true, false, k, n, m, S(1), ia->data.data(), k,
                        o->grad.data(), n, S(1), ib->grad.data(), n);
      }
    });
  }
  return out;
}

// x[R x C] + bias[C] broadcast over rows.
template <typename S>
TensorT<S> add_rowwise(const TensorT<S>& x, const TensorT<S>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " with bias " +
                         shape_str(bias.shape()));
  long r = x.dim(0), c = x.dim(1);
  auto out = detail::make_out<S>({r, c});
  const S* px = x.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pb[j];
  if (detail::any_tracked<S>({&x, &bias})) {
    auto ix = x.impl(), ib = bias.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    bool tx = ix->tracked(), tb = ib->tracked();
    detail::attach(out, "add_rowwise", {ix, ib}, [ix, ib, wo, tx, tb, r, c] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      if (tx) {
        ix->ensure_grad();
        long n = r * c;
        for (long i = 0; i < n; ++i) ix->grad[i] += o->grad[i];
      }
      if (tb) {
        ib->ensure_grad();
        for (long j = 0; j < c; ++j) {
          double acc = 0;
          for (long i = 0; i < r; ++i) acc += o->grad[i * c + j];
          ib->grad[j] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Relu, Sigmoid, Tanh, SoftmaxLastDim };

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  auto out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  S* po = out.data();
  long n = x.size();
  for (long i = 0; i < n; ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
  if (detail::any_tracked<S>({&x})) {
    auto ix = x.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "relu", {ix}, [ix, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ix->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i)
        if (ix->data[i] > S(0)) ix->grad[i] += o->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  auto out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  S* po = out.data();
  long n = x.size();
  for (long i = 0; i < n; ++i)
    po[i] = static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(px[i]))));
  if (detail::any_tracked<S>({&x})) {
    auto ix = x.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "sigmoid", {ix}, [ix, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ix->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i) {
        S y = o->data[i];
        ix->grad[i] += o->grad[i] * y * (S(1) - y);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> tanh_op(const TensorT<S>& x) {
  auto out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  S* po = out.data();
  long n = x.size();
  for (long i = 0; i < n; ++i) po[i] = static_cast<S>(std::tanh(static_cast<double>(px[i])));
  if (detail::any_tracked<S>({&x})) {
    auto ix = x.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "tanh", {ix}, [ix, wo] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ix->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i) {
        S y = o->data[i];
        ix->grad[i] += o->grad[i] * (S(1) - y * y);
      }
    });
  }
  return out;
}

// Softmax over the last dimension; rows sum to 1.
template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_lastdim: rank-0 input");
  long c = x.dim(x.rank() - 1);
  long rows = x.size() / c;
  auto out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (long r = 0; r < rows; ++r) {
    const S* in = px + r * c;
    S* o = po + r * c;
    double mx = in[0];
    for (long j = 1; j < c; ++j) mx = std::max<double>(mx, in[j]);
    double z = 0;
    for (long j = 0; j < c; ++j) {
      double e = std::exp(static_cast<double>(in[j]) - mx);
      o[j] = static_cast<S>(e);
      z += e;
    }
    for (long j = 0; j < c; ++j) o[j] = static_cast<S>(o[j] / z);
  }
  if (detail::any_tracked<S>({&x})) {
    auto ix = x.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "softmax", {ix}, [ix, wo, rows, c] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ix->ensure_grad();
      for (long r = 0; r < rows; ++r) {
        const S* y = o->data.data() + r * c;
        const S* gy = o->grad.data() + r * c;
        S* gx = ix->grad.data() + r * c;
        double dot = 0;
        for (long j = 0; j < c; ++j) dot += static_cast<double>(gy[j]) * y[j];
        for (long j = 0; j < c; ++j)
          gx[j] += static_cast<S>(y[j] * (gy[j] - dot));
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> activate(const TensorT<S>& x, Activation kind) {
  switch (kind) {
    case Activation::Relu: return relu(x);
    case Activation::Sigmoid: return sigmoid(x);
    case Activation::Tanh: return tanh_op(x);
    case Activation::SoftmaxLastDim: return softmax_lastdim(x);
  }
  throw StateError("unknown activation");
}

// ---------------------------------------------------------------------------
// Losses

// Mean over the batch of -log softmax(logits)[label].
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy: want [B,C] logits, got " + shape_str(logits.shape()));
  long b = logits.dim(0), c = logits.dim(1);
  if (static_cast<long>(labels.size()) != b)
    throw DimensionError("cross_entropy: batch " + std::to_string(b) + " vs " +
                         std::to_string(labels.size()) + " labels");
  for (long i = 0; i < b; ++i)
    if (labels[i] < 0 || labels[i] >= c)
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0," + std::to_string(c) + ") at row " +
                       std::to_string(i));
  std::vector<S> probs(b * c);
  const S* pl = logits.data();
  double loss = 0;
  for (long i = 0; i < b; ++i) {
    const S* in = pl + i * c;
    double mx = in[0];
    for (long j = 1; j < c; ++j) mx = std::max<double>(mx, in[j]);
    double z = 0;
    for (long j = 0; j < c; ++j) z += std::exp(static_cast<double>(in[j]) - mx);
    double logz = std::log(z) + mx;
    for (long j = 0; j < c; ++j)
      probs[i * c + j] = static_cast<S>(std::exp(static_cast<double>(in[j]) - logz));
    loss -= static_cast<double>(in[labels[i]]) - logz;
  }
  auto out = TensorT<S>::scalar(static_cast<S>(loss / b));
  if (detail::any_tracked<S>({&logits})) {
    auto il = logits.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "cross_entropy", {il},
                   [il, wo, probs = std::move(probs), labels, b, c] {
                     auto o = wo.lock();
                     if (!o || o->grad.empty()) return;
                     il->ensure_grad();
                     S g = o->grad[0] / static_cast<S>(b);
                     for (long i = 0; i < b; ++i)
                       for (long j = 0; j < c; ++j) {
                         S p = probs[i * c + j];
                         if (j == labels[i]) p -= S(1);
                         il->grad[i * c + j] += g * p;
                       }
                   });
  }
  return out;
}

// log(probs[i, idx[i]]) per row, differentiable into probs.
template <typename S>
TensorT<S> gather_log(const TensorT<S>& probs, const std::vector<int>& idx) {
  if (probs.rank() != 2)
    throw DimensionError("gather_log: want [B,C], got " + shape_str(probs.shape()));
  long b = probs.dim(0), c = probs.dim(1);
  if (static_cast<long>(idx.size()) != b)
    throw DimensionError("gather_log: batch mismatch");
  constexpr double kFloor = 1e-12;
  auto out = detail::make_out<S>({b});
  for (long i = 0; i < b; ++i) {
    if (idx[i] < 0 || idx[i] >= c)
      throw IndexError("gather_log: index " + std::to_string(idx[i]) + " out of range");
    out.data()[i] = static_cast<S>(
        std::log(std::max<double>(probs.data()[i * c + idx[i]], kFloor)));
  }
  if (detail::any_tracked<S>({&probs})) {
    auto ip = probs.impl();
    std::weak_ptr<TensorImpl<S>> wo = out.impl();
    detail::attach(out, "gather_log", {ip}, [ip, wo, idx, c] {
      auto o = wo.lock();
      if (!o || o->grad.empty()) return;
      ip->ensure_grad();
      long b = static_cast<long>(o->data.size());
      for (long i = 0; i < b; ++i) {
        double p = std::max<double>(ip->data[i * c + idx[i]], kFloor);
        ip->grad[i * c + idx[i]] += static_cast<S>(o->grad[i] / p);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (valid, stride 1) and 2x2 max pooling

namespace detail {

// col[(c*kh+di)*kw+dj][b*P + i*Wo + j] = input[b][c][i+di][j+dj]
template <typename S>
void im2col(const S* input, long bsz, long ch, long h, long w, long kh, long kw,
            S* col) {
  long ho = h - kh + 1, wo = w - kw + 1, p = ho * wo;
  long ncols = bsz * p;
  for (long c = 0; c < ch; ++c)
    for (long di = 0; di < kh; ++di)
      for (long dj = 0; dj < kw; ++dj) {
        S* row = col + ((c * kh + di) * kw + dj) * ncols;
        for (long b = 0; b < bsz; ++b) {
          const S* img = input + (b * ch + c) * h * w;
          for (long i = 0; i < ho; ++i)
            std::memcpy(row + b * p + i * wo, img + (i + di) * w + dj,
                        sizeof(S) * wo);
        }
      }
}

template <typename S>
void col2im_acc(const S* col, long bsz, long ch, long h, long w, long kh,
                long kw, S* input_grad) {
  long ho = h - kh + 1, wo = w - kw + 1, p = ho * wo;
  long ncols = bsz * p;
  for (long c = 0; c < ch; ++c)
    for (long di = 0; di < kh; ++di)
      for (long dj = 0; dj < kw; ++dj) {
        const S* row = col + ((c * kh + di) * kw + dj) * ncols;
        for (long b = 0; b < bsz; ++b) {
          S* img = input_grad + (b * ch + c) * h * w;
          for (long i = 0; i < ho; ++i) {
            S* dst = img + (i + di) * w + dj;
            const S* src = row + b * p + i * wo;
            for (long j = 0; j < wo; ++j) dst[j] += src[j];
          }
        }
      }
}

template <typename S>
std::vector<S>& conv_scratch(int slot) {
  static thread_local std::vector<S> bufs[3];
  return bufs[slot];
}

}  // namespace detail

template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& kernels,
                  const TensorT<S>& bias) {
  if (input.rank() != 4 || kernels.rank() != 4)
    throw DimensionError("conv2d: want [B,C,H,W] and [K,C,kh,kw], got " +
                         shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  long bsz = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  long k = kernels.dim(0), kc = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kc != ch)
    throw DimensionError("conv2d: channel mismatch: " + shape_str(input.shape()) +
                         " vs " + shape_str(kernels.shape()));
  if (kh > h || kw > w)
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than input " + shape_str(input.shape()));
  if (bias.rank() != 1 || bias.dim(0) != k)
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  long ho = h - kh + 1, wo = w - kw + 1, p = ho * wo, ck = ch * kh * kw;
  long ncols = bsz * p;

  auto& col = detail::conv_scratch<S>(0);
  col.resize(ck * ncols);
  detail::im2col(input.data(), bsz, ch, h, w, kh, kw, col.data());

  auto& prod = detail::conv_scratch<S>(1);
  prod.resize(k * ncols);
  detail::gemm<S>(false, false, k, ncols, ck, S(1), kernels.data(), ck,
                  col.data(), ncols, S(0), prod.data(), ncols);

  auto out = detail::make_out<S>({bsz, k, ho, wo});
  S* po = out.data();
  const S* pb = bias.data();
  for (long b = 0; b < bsz; ++b)
    for (long kk = 0; kk < k; ++kk) {
      const S* src = prod.data() + kk * ncols + b * p;
      S* dst = po + (b * k + kk) * p;
      S bv = pb[kk];
      for (long i = 0; i < p; ++i) dst[i] = src[i] + bv;
    }

  if (detail::any_tracked<S>({&input, &kernels, &bias})) {
    auto ii = input.impl(), ik = kernels.impl(), ib = bias.impl();
    std::weak_ptr<TensorImpl<S>> wo_ = out.impl();
    bool ti = ii->tracked(), tk = ik->tracked(), tb = ib->tracked();
    detail::attach(out, "conv2d", {ii, ik, ib},
                   [ii, ik, ib, wo_, ti, tk, tb, bsz, ch, h, w, k, kh, kw, ho,
                    wo, p, ck, ncols] {
                     auto o = wo_.lock();
                     if (!o || o->grad.empty()) return;
                     // regroup dOut to [K x B*P]
                     auto& gperm = detail::conv_scratch<S>(1);
                     gperm.resize(k * ncols);
                     for (long b = 0; b < bsz; ++b)
                       for (long kk = 0; kk < k; ++kk)
                         std::memcpy(gperm.data() + kk * ncols + b * p,
                                     o->grad.data() + (b * k + kk) * p,
                                     sizeof(S) * p);
                     if (tb) {
                       ib->ensure_grad();
                       for (long kk = 0; kk < k; ++kk) {
                         double acc = 0;
                         const S* row = gperm.data() + kk * ncols;
                         for (long i = 0; i < ncols; ++i) acc += row[i];
                         ib->grad[kk] += static_cast<S>(acc);
                       }
                     }
                     if (tk) {
                       ik->ensure_grad();
                       auto& col = detail::conv_scratch<S>(0);
                       col.resize(ck * ncols);
                       detail::im2col(ii->data.data(), bsz, ch, h, w, kh, kw,
                                      col.data());
                       // dK += dOut * col^T
                       detail::gemm<S>(false, true, k, ck, ncols, S(1),
                                       gperm.data(), ncols, col.data(), ncols,
                                       S(1), ik->grad.data(), ck);
                     }
                     if (ti) {
                       ii->ensure_grad();
                       auto& dcol = detail::conv_scratch<S>(2);
                       dcol.resize(ck * ncols);
                       // dcol = K^T * dOut
                       detail::gemm<S>(true, false, ck, ncols, k, S(1),
                                       ik->data.data(), ck, gperm.data(), ncols,
                                       S(0), dcol.data(), ncols);
                       detail::col2im_acc(dcol.data(), bsz, ch, h, w, kh, kw,
                                          ii->grad.data());
                     }
                   });
  }
  return out;
}

// 2x2 non-overlapping max; gradient routed to the first-scanned argmax cell.
template <typename S>
TensorT<S> maxpool2(const TensorT<S>& input) {
  if (input.rank() != 4)
    throw DimensionError("maxpool2: want [B,C,H,W], got " + shape_str(input.shape()));
  long bsz = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2)
    throw DimensionError("maxpool2: odd spatial dims in " + shape_str(input.shape()));
  long ho = h / 2, wo = w / 2;
  auto out = detail::make_out<S>({bsz, ch, ho, wo});
  std::vector<int64_t> arg(out.size());
  const S* pi = input.data();
  S* po = out.data();
  for (long bc = 0; bc < bsz * ch; ++bc) {
    const S* img = pi + bc * h * w;
    S* dst = po + bc * ho * wo;
    int64_t* am = arg.data() + bc * ho * wo;
    for (long i = 0; i < ho; ++i)
      for (long j = 0; j < wo; ++j) {
        long base = (2 * i) * w + 2 * j;
        S best = img[base];
        long bi = base;
        if (img[base + 1] > best) { best = img[base + 1]; bi = base + 1; }
        if (img[base + w] > best) { best = img[base + w]; bi = base + w; }
        if (img[base + w + 1] > best) { best = img[base + w + 1]; bi = base + w + 1; }
        dst[i * wo + j] = best;
        am[i * wo + j] = bc * h * w + bi;
      }
  }
  if (detail::any_tracked<S>({&input})) {
    auto ii = input.impl();
    std::weak_ptr<TensorImpl<S>> wo_ = out.impl();
    detail::attach(out, "maxpool2", {ii}, [ii, wo_, arg = std::move(arg)] {
      auto o = wo_.lock();
      if (!o || o->grad.empty()) return;
      ii->ensure_grad();
      long n = static_cast<long>(o->data.size());
      for (long i = 0; i < n; ++i) ii->grad[arg[i]] += o->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused LSTM cell

// Gate blocks along the 4H axis are ordered [input | forget | candidate | output].
template <typename S>
struct LstmWeights {
  TensorT<S> wx;  // [I x 4H]
  TensorT<S> wh;  // [H x 4H]
  TensorT<S> b;   // [4H]
};

template <typename S>
std::pair<TensorT<S>, TensorT<S>> lstm_step(const TensorT<S>& x,
                                            const TensorT<S>& h,
                                            const TensorT<S>& c,
                                            const LstmWeights<S>& wts) {
  long bsz = x.dim(0), in = x.dim(1);
  long hid = h.dim(1);
  if (h.rank() != 2 || c.rank() != 2 || c.dim(0) != bsz || h.dim(0) != bsz ||
      c.dim(1) != hid)
    throw DimensionError("lstm_step: carry shapes " + shape_str(h.shape()) +
                         ", " + shape_str(c.shape()));
  if (wts.wx.dim(0) != in || wts.wx.dim(1) != 4 * hid ||
      wts.wh.dim(0) != hid || wts.wh.dim(1) != 4 * hid ||
      wts.b.dim(0) != 4 * hid)
    throw DimensionError("lstm_step: weight shapes " + shape_str(wts.wx.shape()) +
                         ", " + shape_str(wts.wh.shape()) + ", " +
                         shape_str(wts.b.shape()) + " for input " +
                         shape_str(x.shape()) + " hidden " + std::to_string(hid));

  long g4 = 4 * hid;
  std::vector<S> pre(bsz * g4);
  const S* pb = wts.b.data();
  for (long i = 0; i < bsz; ++i)
    std::memcpy(pre.data() + i * g4, pb, sizeof(S) * g4);
  detail::gemm<S>(false, false, bsz, g4, in, S(1), x.data(), in, wts.wx.data(),
                  g4, S(1), pre.data(), g4);
  detail::gemm<S>(false, false, bsz, g4, hid, S(1), h.data(), hid,
                  wts.wh.data(), g4, S(1), pre.data(), g4);

  // gates[b] = [i f g o], activated
  auto gates = std::make_shared<std::vector<S>>(bsz * g4);
  auto hnew = detail::make_out<S>({bsz, hid});
  auto cnew = detail::make_out<S>({bsz, hid});
  auto tanhc = std::make_shared<std::vector<S>>(bsz * hid);
  for (long i = 0; i < bsz; ++i) {
    const S* pr = pre.data() + i * g4;
    S* gt = gates->data() + i * g4;
    for (long j = 0; j < hid; ++j) {
      double gi = 1.0 / (1.0 + std::exp(-static_cast<double>(pr[j])));
      double gf = 1.0 / (1.0 + std::exp(-static_cast<double>(pr[hid + j])));
      double gg = std::tanh(static_cast<double>(pr[2 * hid + j]));
      double go = 1.0 / (1.0 + std::exp(-static_cast<double>(pr[3 * hid + j])));
      gt[j] = static_cast<S>(gi);
      gt[hid + j] = static_cast<S>(gf);
      gt[2 * hid + j] = static_cast<S>(gg);
      gt[3 * hid + j] = static_cast<S>(go);
      double cv = gf * c.data()[i * hid + j] + gi * gg;
      double tc = std::tanh(cv);
      cnew.data()[i * hid + j] = static_cast<S>(cv);
      (*tanhc)[i * hid + j] = static_cast<S>(tc);
      hnew.data()[i * hid + j] = static_cast<S>(go * tc);
    }
  }

  if (detail::any_tracked<S>({&x, &h, &c, &wts.wx, &wts.wh, &wts.b})) {
    auto ix = x.impl(), ih = h.impl(), ic = c.impl();
    auto iwx = wts.wx.impl(), iwh = wts.wh.impl(), ib = wts.b.impl();
    std::weak_ptr<TensorImpl<S>> wh_ = hnew.impl();
    std::weak_ptr<TensorImpl<S>> wc_ = cnew.impl();
    bool tx = ix->tracked(), th = ih->tracked(), tc_ = ic->tracked();
    bool twx = iwx->tracked(), twh = iwh->tracked(), tb = ib->tracked();
    auto backward = [ix, ih, ic, iwx, iwh, ib, wh_, wc_, gates, tanhc, tx, th,
                     tc_, twx, twh, tb, bsz, in, hid, g4] {
      auto oh = wh_.lock();
      auto oc = wc_.lock();
      const S* gh = (oh && !oh->grad.empty()) ? oh->grad.data() : nullptr;
      const S* gc = (oc && !oc->grad.empty()) ? oc->grad.data() : nullptr;
      if (!gh && !gc) return;
      std::vector<S> dpre(bsz * g4);
      std::vector<S> dcprev(tc_ ? bsz * hid : 0);
      for (long i = 0; i < bsz; ++i) {
        const S* gt = gates->data() + i * g4;
        for (long j = 0; j < hid; ++j) {
          double dh = gh ? gh[i * hid + j] : 0.0;
          double dc = gc ? gc[i * hid + j] : 0.0;
          double gi = gt[j], gf = gt[hid + j], gg = gt[2 * hid + j], go = gt[3 * hid + j];
          double tc = (*tanhc)[i * hid + j];
          double dtc = dh * go;
          double dcv = dc + dtc * (1.0 - tc * tc);
          double dgo = dh * tc;
          double dgi = dcv * gg;
          double dgg = dcv * gi;
          double dgf = dcv * ic->data[i * hid + j];
          if (tc_) dcprev[i * hid + j] = static_cast<S>(dcv * gf);
          dpre[i * g4 + j] = static_cast<S>(dgi * gi * (1.0 - gi));
          dpre[i * g4 + hid + j] = static_cast<S>(dgf * gf * (1.0 - gf));
          dpre[i * g4 + 2 * hid + j] = static_cast<S>(dgg * (1.0 - gg * gg));
          dpre[i * g4 + 3 * hid + j] = static_cast<S>(dgo * go * (1.0 - go));
        }
      }
      if (tc_) {
        ic->ensure_grad();
        for (long i = 0; i < bsz * hid; ++i) ic->grad[i] += dcprev[i];
      }
      if (twx) {
        iwx->ensure_grad();
        detail::gemm<S>(true, false, in, g4, bsz, S(1), ix->data.data(), in,
                        dpre.data(), g4, S(1), iwx->grad.data(), g4);
      }
      if (twh) {
        iwh->ensure_grad();
        detail::gemm<S>(true, false, hid, g4, bsz, S(1), ih->data.data(), hid,
                        dpre.data(), g4, S(1), iwh->grad.data(), g4);
      }
      if (tb) {
        ib->ensure_grad();
        for (long j = 0; j < g4; ++j) {
          double acc = 0;
          for (long i = 0; i < bsz; ++i) acc += dpre[i * g4 + j];
          ib->grad[j] += static_cast<S>(acc);
        }
      }
      if (tx) {
        ix->ensure_grad();
        detail::gemm<S>(false, true, bsz, in, g4, S(1), dpre.data(), g4,
                        iwx->data.data(), g4, S(1), ix->grad.data(), in);
      }
      if (th) {
        ih->ensure_grad();
        detail::gemm<S>(false, true, bsz, hid, g4, S(1), dpre.data(), g4,
                        iwh->data.data(), g4, S(1), ih->grad.data(), hid);
      }
    };
    // One shared node behind both outputs so the cell is differentiated once.
    auto node = std::make_shared<GradNode<S>>();
    node->op = "lstm_step";
    node->inputs = {ix, ih, ic, iwx, iwh, ib};
    node->backward = backward;
    hnew.impl()->node = node;
    cnew.impl()->node = node;
  }
  return {hnew, cnew};
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
struct AdamState {
  std::vector<S> first_moment;
  std::vector<S> second_moment;
  long step_count = 0;
  S learning_rate = static_cast<S>(1e-4);
  S beta1 = static_cast<S>(0.9);
  S beta2 = static_cast<S>(0.999);
  S epsilon = static_cast<S>(1e-8);
};

// One bias-corrected Adam update; zeroes the grad buffer afterwards.
template <typename S>
void adam_step(TensorT<S>& param, AdamState<S>& st) {
  if (!param.has_grad())
    throw StateError("adam_step: gradient not populated for parameter of shape " +
                     shape_str(param.shape()));
  long n = param.size();
  if (st.first_moment.empty()) {
    st.first_moment.assign(n, S(0));
    st.second_moment.assign(n, S(0));
  }
  st.step_count += 1;
  double b1 = st.beta1, b2 = st.beta2;
  double corr1 = 1.0 - std::pow(b1, static_cast<double>(st.step_count));
  double corr2 = 1.0 - std::pow(b2, static_cast<double>(st.step_count));
  S* p = param.data();
  std::span<S> g = param.grad_mut();
  for (long i = 0; i < n; ++i) {
    double gi = g[i];
    double m = b1 * st.first_moment[i] + (1.0 - b1) * gi;
    double v = b2 * st.second_moment[i] + (1.0 - b2) * gi * gi;
    st.first_moment[i] = static_cast<S>(m);
    st.second_moment[i] = static_cast<S>(v);
    double mhat = m / corr1;
    double vhat = v / corr2;
    p[i] = static_cast<S>(p[i] - st.learning_rate * mhat /
                                     (std::sqrt(vhat) + st.epsilon));
  }
  param.zero_grad();
}

template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<TensorT<S>> params, S lr) : params_(std::move(params)) {
    states_.resize(params_.size());
    for (auto& st : states_) st.learning_rate = lr;
  }
  void step() {
    for (size_t i = 0; i < params_.size(); ++i) adam_step(params_[i], states_[i]);
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  long step_count() const { return states_.empty() ? 0 : states_[0].step_count; }

 private:
  std::vector<TensorT<S>> params_;
  std::vector<AdamState<S>> states_;
};

// ---------------------------------------------------------------------------
// Small non-differentiable helpers

template <typename S>
std::vector<int> argmax_rows(const TensorT<S>& x) {
  long c = x.dim(x.rank() - 1);
  long rows = x.size() / c;
  std::vector<int> out(rows);
  const S* px = x.data();
  for (long r = 0; r < rows; ++r) {
    const S* row = px + r * c;
    int best = 0;
    for (long j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    out[r] = best;
  }
  return out;
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 over (seed + stream) for decorrelated named streams
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace sstn
