// Dense n-d tensors with eager reverse-mode differentiation.
//
// Every op builds its piece of the graph on the fly; backward() walks the
// graph once in reverse topological order, freeing gradient buffers and
// graph edges as it goes. Reduction order inside every kernel is fixed, so
// results are bit-reproducible for a given scalar type and seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evl/random.hpp"

extern "C" {
// OpenBLAS; used single-threaded so reductions stay deterministic.
void cblas_sgemm(int order, int transa, int transb, int m, int n, int k,
                 float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc);
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k,
                 double alpha, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc);
}

namespace evl {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// ---------------------------------------------------------------------------
// Pooled storage
//
// Training builds and tears down ~10^5 tensors per step with a repeating size
// pattern; recycling their buffers through exact-size freelists keeps the
// process at its high-water mark instead of fragmenting the allocator arena.

namespace detail {

template <class S>
class BufferPool {
 public:
  static BufferPool& instance() {
    thread_local BufferPool pool;
    return pool;
  }

  S* acquire(std::size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      S* p = it->second.back();
      it->second.pop_back();
      return p;
    }
    return static_cast<S*>(::operator new(n * sizeof(S)));
  }

  void release(S* p, std::size_t n) {
    if (p == nullptr) return;
    free_[n].push_back(p);
  }

 private:
  BufferPool() = default;
  std::unordered_map<std::size_t, std::vector<S*>> free_;
};

}  // namespace detail

// Minimal contiguous value array backed by the pool. Always zero-initialized
// on sizing, like the vector it replaces.
template <class S>
class Buffer {
 public:
  using value_type = S;
  using iterator = S*;
  using const_iterator = const S*;

  Buffer() = default;
  explicit Buffer(std::size_t n, S fill = S(0)) { assign(n, fill); }
  Buffer(const Buffer& other) {
    if (!other.empty()) {
      data_ = detail::BufferPool<S>::instance().acquire(other.size_);
      size_ = other.size_;
      std::memcpy(data_, other.data_, size_ * sizeof(S));
    }
  }
  Buffer(Buffer&& other) noexcept : data_(other.data_), size_(other.size_) {
    other.data_ = nullptr;
    other.size_ = 0;
  }
  Buffer& operator=(const Buffer& other) {
    if (this == &other) return *this;
    if (size_ != other.size_) {
      reset();
      if (!other.empty()) {
        data_ = detail::BufferPool<S>::instance().acquire(other.size_);
        size_ = other.size_;
      }
    }
    if (!other.empty()) std::memcpy(data_, other.data_, size_ * sizeof(S));
    return *this;
  }
  Buffer& operator=(Buffer&& other) noexcept {
    if (this == &other) return *this;
    reset();
    data_ = other.data_;
    size_ = other.size_;
    other.data_ = nullptr;
    other.size_ = 0;
    return *this;
  }
  ~Buffer() { reset(); }

  void assign(std::size_t n, S fill) {
    resize_uninit(n);
    std::fill(data_, data_ + size_, fill);
  }

  // recycled contents are arbitrary; caller must overwrite every element
  void resize_uninit(std::size_t n) {
    if (size_ != n) {
      reset();
      if (n) data_ = detail::BufferPool<S>::instance().acquire(n);
      size_ = n;
    }
  }

  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  S* data() { return data_; }
  const S* data() const { return data_; }
  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  iterator begin() { return data_; }
  iterator end() { return data_ + size_; }
  const_iterator begin() const { return data_; }
  const_iterator end() const { return data_ + size_; }

  friend bool operator==(const Buffer& a, const Buffer& b) {
    return a.size_ == b.size_ &&
           (a.size_ == 0 || std::memcmp(a.data_, b.data_, a.size_ * sizeof(S)) == 0);
  }
  friend bool operator!=(const Buffer& a, const Buffer& b) { return !(a == b); }
  friend bool operator==(const Buffer& a, const std::vector<S>& b) {
    return a.size_ == b.size() &&
           (a.size_ == 0 || std::memcmp(a.data_, b.data(), a.size_ * sizeof(S)) == 0);
  }
  friend bool operator==(const std::vector<S>& a, const Buffer& b) { return b == a; }

 private:
  void reset() {
    if (data_) detail::BufferPool<S>::instance().release(data_, size_);
    data_ = nullptr;
    size_ = 0;
  }

  S* data_ = nullptr;
  std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  bool prev_;
};

// ---------------------------------------------------------------------------
// Node + Tensor handle

template <class S>
struct Node {
  Shape shape;
  Buffer<S> val;
  Buffer<S> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  bool retain_grad = false;  // keep the buffer after backward (interior nodes)
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::int64_t numel() const { return static_cast<std::int64_t>(val.size()); }
  Buffer<S>& ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
    return grad;
  }
};

template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->val.assign(static_cast<std::size_t>(numel_of(n->shape)), S(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from(Shape shape, const std::vector<S>& vals, bool requires_grad = false) {
    check(numel_of(shape) == static_cast<std::int64_t>(vals.size()),
          "tensor init: value count does not match shape " + shape_str(shape));
    Tensor t = zeros(std::move(shape), requires_grad);
    std::memcpy(t.values().data(), vals.data(), vals.size() * sizeof(S));
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  static Tensor gumbel(Shape shape, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<S>(rng.gumbel());
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return n_->numel(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  void retain_grad() { n_->retain_grad = true; }

  Buffer<S>& values() { return n_->val; }
  const Buffer<S>& values() const { return n_->val; }
  Buffer<S>& grad() { return n_->ensure_grad(); }
  const Buffer<S>& grad_view() const { return n_->grad; }
  void zero_grad() { n_->grad.assign(n_->val.size(), S(0)); }

  S item() const {
    check(numel() == 1, "item(): tensor is not scalar, shape " + shape_str(shape()));
    return n_->val[0];
  }

  S at(std::initializer_list<std::int64_t> idx) const {
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      flat = flat * n_->shape[k] + i;
      ++k;
    }
    return n_->val[static_cast<std::size_t>(flat)];
  }

  // Deep copy detached from the graph.
  Tensor clone_detached(bool requires_grad = false) const {
    Tensor t = zeros(shape(), requires_grad);
    t.values() = values();
    return t;
  }

  std::shared_ptr<Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, const char* op, std::initializer_list<Tensor<S>> inputs,
                  std::function<void(Node<S>&)> bwd) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->val.resize_uninit(static_cast<std::size_t>(numel_of(n->shape)));
  n->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(bwd);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
void accum(const Tensor<S>& t, const Buffer<S>& g) {
  if (!t.requires_grad()) return;
  auto& dst = t.node()->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                 float alpha, const float* a, std::int64_t lda, const float* b,
                 std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(101, ta ? 112 : 111, tb ? 112 : 111, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}
inline void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                 double alpha, const double* a, std::int64_t lda, const double* b,
                 std::int64_t ldb, double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(101, ta ? 112 : 111, tb ? 112 : 111, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

// C(m x n) = beta*C + alpha * op(A) op(B), row major, tight leading dims.
// Tiny products skip BLAS; its call overhead dominates below ~4k flops.
template <class S>
void matmul_raw(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                S alpha, const S* a, const S* b, S beta, S* c) {
  const std::int64_t lda = ta ? m : k;
  const std::int64_t ldb = tb ? k : n;
  if (m * n * k < 4096) {
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        S acc = 0;
        for (std::int64_t p = 0; p < k; ++p) {
          const S av = ta ? a[p * lda + i] : a[i * lda + p];
          const S bv = tb ? b[j * ldb + p] : b[p * ldb + j];
          acc += av * bv;
        }
        // beta == 0 must not read c (it may be uninitialized)
        c[i * n + j] = beta == S(0) ? alpha * acc : beta * c[i * n + j] + alpha * acc;
      }
    }
  } else {
    gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, n);
  }
}

// Iteration helper for ops that reduce/normalize along one axis.
struct AxisView {
  std::int64_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  check(axis >= 0 && axis < static_cast<int>(shape.size()),
        "axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.len = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    v.inner *= shape[i];
  return v;
}

inline Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i)
    if (i != axis) out.push_back(shape[static_cast<std::size_t>(i)]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward engine

// Seeds each (tensor, cotangent) pair and propagates to every reachable
// contributor. Interior nodes have their gradient buffers, edges and closures
// released as soon as they are processed; leaf gradients survive for the
// optimizer. Values stay alive only while some live handle still needs them.
template <class S>
void backward_seeded(const std::vector<std::pair<Tensor<S>, std::vector<S>>>& seeds) {
  std::vector<std::shared_ptr<Node<S>>> topo;
  std::unordered_set<const Node<S>*> seen;
  struct Frame {
    std::shared_ptr<Node<S>> n;
    std::size_t next;
  };
  std::vector<Frame> stack;

  for (const auto& [t, cot] : seeds) {
    check(t.defined(), "backward: undefined tensor");
    check(static_cast<std::int64_t>(cot.size()) == t.numel(),
          "backward: cotangent size mismatch");
    if (!t.requires_grad()) continue;
    auto& g = t.node()->ensure_grad();
    for (std::size_t i = 0; i < cot.size(); ++i) g[i] += cot[i];
    if (seen.count(t.node().get())) continue;
    seen.insert(t.node().get());
    stack.push_back({t.node(), 0});
    while (!stack.empty()) {
      Frame& fr = stack.back();
      if (fr.next < fr.n->parents.size()) {
        std::shared_ptr<Node<S>> p = fr.n->parents[fr.next++];
        if (p->requires_grad && !seen.count(p.get())) {
          seen.insert(p.get());
          stack.push_back({std::move(p), 0});
        }
      } else {
        topo.push_back(std::move(fr.n));
        stack.pop_back();
      }
    }
  }

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<S>& n = **it;
    if (n.backward) {
      if (!n.grad.empty()) n.backward(n);
      n.backward = nullptr;
      n.parents.clear();
      if (!n.retain_grad) n.grad = Buffer<S>();
    }
    it->reset();
  }
}

template <class S>
void backward(const Tensor<S>& root) {
  check(root.numel() == 1, "backward: root must be scalar");
  backward_seeded<S>({{root, {S(1)}}});
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor<S> out = detail::make_op<S>(a.shape(), "add", {a, b}, [a, b](Node<S>& n) {
    detail::accum(a, n.grad);
    detail::accum(b, n.grad);
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<S> out = detail::make_op<S>(a.shape(), "sub", {a, b}, [a, b](Node<S>& n) {
    detail::accum(a, n.grad);
    if (b.requires_grad()) {
      auto& dst = b.node()->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] -= n.grad[i];
    }
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<S> out = detail::make_op<S>(a.shape(), "mul", {a, b}, [a, b](Node<S>& n) {
    if (a.requires_grad()) {
      auto& dst = a.node()->ensure_grad();
      const auto& bv = b.values();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& dst = b.node()->ensure_grad();
      const auto& av = a.values();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i] * av[i];
    }
  });
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "scale", {a}, [a, c](Node<S>& n) {
    if (a.requires_grad()) {
      auto& dst = a.node()->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i] * c;
    }
  });
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "add_scalar", {a},
                                     [a](Node<S>& n) { detail::accum(a, n.grad); });
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  return out;
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& a) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "exp", {a}, nullptr);
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  if (out.requires_grad()) {
    out.node()->backward = [a](Node<S>& n) {
      auto& dst = a.node()->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i] * n.val[i];
    };
  }
  return out;
}

template <class S>
Tensor<S> log_t(const Tensor<S>& a) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "log", {a}, [a](Node<S>& n) {
    auto& dst = a.node()->ensure_grad();
    const auto& av = a.values();
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i] / av[i];
  });
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "relu", {a}, [a](Node<S>& n) {
    auto& dst = a.node()->ensure_grad();
    const auto& av = a.values();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (av[i] > S(0)) dst[i] += n.grad[i];
  });
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > S(0) ? av[i] : S(0);
  return out;
}

template <class S>
Tensor<S> recip(const Tensor<S>& a) {
  Tensor<S> out = detail::make_op<S>(a.shape(), "recip", {a}, nullptr);
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = S(1) / av[i];
  if (out.requires_grad()) {
    out.node()->backward = [a](Node<S>& n) {
      auto& dst = a.node()->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        dst[i] -= n.grad[i] * n.val[i] * n.val[i];
    };
  }
  return out;
}

// y identical to x; gradient does not pass.
template <class S>
Tensor<S> stop_gradient(const Tensor<S>& a) {
  return a.clone_detached(false);
}

// ---------------------------------------------------------------------------
// Broadcast helpers

// x: (..., D) plus row vector b: (D).
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  const std::int64_t d = x.dim(x.rank() - 1);
  check(b.numel() == d, "add_rowvec: width mismatch");
  const std::int64_t rows = x.numel() / d;
  Tensor<S> out = detail::make_op<S>(x.shape(), "add_rowvec", {x, b},
                                     [x, b, rows, d](Node<S>& n) {
    detail::accum(x, n.grad);
    if (b.requires_grad()) {
      auto& dst = b.node()->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
          dst[static_cast<std::size_t>(j)] += n.grad[static_cast<std::size_t>(r * d + j)];
    }
  });
  const auto& xv = x.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      ov[static_cast<std::size_t>(r * d + j)] =
          xv[static_cast<std::size_t>(r * d + j)] + bv[static_cast<std::size_t>(j)];
  return out;
}

// x: (..., D), s has one value per row of size D: y[r,:] = x[r,:] * s[r].
template <class S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& s) {
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  check(s.numel() == rows, "scale_rows: row count mismatch");
  Tensor<S> out = detail::make_op<S>(x.shape(), "scale_rows", {x, s},
                                     [x, s, rows, d](Node<S>& n) {
    if (x.requires_grad()) {
      auto& dst = x.node()->ensure_grad();
      const auto& sv = s.values();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
          dst[static_cast<std::size_t>(r * d + j)] +=
              n.grad[static_cast<std::size_t>(r * d + j)] * sv[static_cast<std::size_t>(r)];
    }
    if (s.requires_grad()) {
      auto& dst = s.node()->ensure_grad();
      const auto& xv = x.values();
      for (std::int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (std::int64_t j = 0; j < d; ++j)
          acc += n.grad[static_cast<std::size_t>(r * d + j)] *
                 xv[static_cast<std::size_t>(r * d + j)];
        dst[static_cast<std::size_t>(r)] += acc;
      }
    }
  });
  const auto& xv = x.values();
  const auto& sv = s.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      ov[static_cast<std::size_t>(r * d + j)] =
          xv[static_cast<std::size_t>(r * d + j)] * sv[static_cast<std::size_t>(r)];
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool ta = false, bool tb = false) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  const std::int64_t m = ta ? a.dim(1) : a.dim(0);
  const std::int64_t ka = ta ? a.dim(0) : a.dim(1);
  const std::int64_t kb = tb ? b.dim(1) : b.dim(0);
  const std::int64_t nn = tb ? b.dim(0) : b.dim(1);
  check(ka == kb, "matmul: inner extent mismatch " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  Tensor<S> out = detail::make_op<S>({m, nn}, "matmul", {a, b},
                                     [a, b, ta, tb, m, nn, ka](Node<S>& n) {
    const S* dc = n.grad.data();
    if (a.requires_grad()) {
      S* da = a.node()->ensure_grad().data();
      if (!ta)
        detail::matmul_raw<S>(false, !tb, m, ka, nn, S(1), dc, b.values().data(), S(1), da);
      else
        detail::matmul_raw<S>(tb, true, ka, m, nn, S(1), b.values().data(), dc, S(1), da);
    }
    if (b.requires_grad()) {
      S* db = b.node()->ensure_grad().data();
      if (!tb)
        detail::matmul_raw<S>(!ta, false, ka, nn, m, S(1), a.values().data(), dc, S(1), db);
      else
        detail::matmul_raw<S>(true, ta, nn, ka, m, S(1), dc, a.values().data(), S(1), db);
    }
  });
  detail::matmul_raw<S>(ta, tb, m, nn, ka, S(1), a.values().data(), b.values().data(),
                        S(0), out.values().data());
  return out;
}

// Batched matmul over the leading axis: (B,n,k) x (B,k,m) -> (B,n,m).
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool ta = false, bool tb = false) {
  check(a.rank() == 3 && b.rank() == 3, "bmm: rank-3 operands required");
  check(a.dim(0) == b.dim(0), "bmm: batch mismatch");
  const std::int64_t bs = a.dim(0);
  const std::int64_t m = ta ? a.dim(2) : a.dim(1);
  const std::int64_t ka = ta ? a.dim(1) : a.dim(2);
  const std::int64_t kb = tb ? b.dim(2) : b.dim(1);
  const std::int64_t nn = tb ? b.dim(1) : b.dim(2);
  check(ka == kb, "bmm: inner extent mismatch");
  const std::int64_t as = a.dim(1) * a.dim(2);
  const std::int64_t bst = b.dim(1) * b.dim(2);
  const std::int64_t os = m * nn;
  Tensor<S> out = detail::make_op<S>({bs, m, nn}, "bmm", {a, b},
                                     [=](Node<S>& n) {
    for (std::int64_t i = 0; i < bs; ++i) {
      const S* dc = n.grad.data() + i * os;
      const S* av = a.values().data() + i * as;
      const S* bv = b.values().data() + i * bst;
      if (a.requires_grad()) {
        S* da = a.node()->ensure_grad().data() + i * as;
        if (!ta)
          detail::matmul_raw<S>(false, !tb, m, ka, nn, S(1), dc, bv, S(1), da);
        else
          detail::matmul_raw<S>(tb, true, ka, m, nn, S(1), bv, dc, S(1), da);
      }
      if (b.requires_grad()) {
        S* db = b.node()->ensure_grad().data() + i * bst;
        if (!tb)
          detail::matmul_raw<S>(!ta, false, ka, nn, m, S(1), av, dc, S(1), db);
        else
          detail::matmul_raw<S>(true, ta, nn, ka, m, S(1), dc, av, S(1), db);
      }
    }
  });
  for (std::int64_t i = 0; i < bs; ++i)
    detail::matmul_raw<S>(ta, tb, m, nn, ka, S(1), a.values().data() + i * as,
                          b.values().data() + i * bst, S(0),
                          out.values().data() + i * os);
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  check(numel_of(shape) == x.numel(), "reshape: numel mismatch " +
                                          shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<S> out = detail::make_op<S>(std::move(shape), "reshape", {x},
                                     [x](Node<S>& n) { detail::accum(x, n.grad); });
  out.values() = x.values();
  return out;
}

namespace detail {
inline std::vector<std::int64_t> row_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  return st;
}
}  // namespace detail

template <class S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> axes) {
  const int r = x.rank();
  check(static_cast<int>(axes.size()) == r, "permute: axes rank mismatch");
  Shape oshape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) oshape[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
  const auto xstr = detail::row_strides(x.shape());
  std::vector<std::int64_t> ostr_in_x(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) ostr_in_x[static_cast<std::size_t>(i)] = xstr[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const std::int64_t total = x.numel();

  // when the innermost axis stays in place, move whole contiguous rows
  const bool tail_stable = axes[static_cast<std::size_t>(r) - 1] == r - 1;
  const std::int64_t chunk = tail_stable ? oshape[static_cast<std::size_t>(r) - 1] : 1;
  auto map_copy = [oshape, ostr_in_x, total, r, chunk](const S* src, S* dst, bool forward) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    for (std::int64_t o = 0; o < total; o += chunk) {
      std::int64_t xi = 0;
      for (int i = 0; i < r; ++i) xi += idx[static_cast<std::size_t>(i)] * ostr_in_x[static_cast<std::size_t>(i)];
      if (chunk > 1) {
        if (forward) {
          std::memcpy(dst + o, src + xi, static_cast<std::size_t>(chunk) * sizeof(S));
        } else {
          for (std::int64_t j = 0; j < chunk; ++j) dst[xi + j] += src[o + j];
        }
        idx[static_cast<std::size_t>(r) - 1] = chunk - 1;  // step the odometer past the row
      } else if (forward) {
        dst[o] = src[xi];
      } else {
        dst[xi] += src[o];
      }
      for (int i = r - 1; i >= 0; --i) {
        if (++idx[static_cast<std::size_t>(i)] < oshape[static_cast<std::size_t>(i)]) break;
        idx[static_cast<std::size_t>(i)] = 0;
      }
    }
  };

  Tensor<S> out = detail::make_op<S>(oshape, "permute", {x}, [x, map_copy](Node<S>& n) {
    if (!x.requires_grad()) return;
    map_copy(n.grad.data(), x.node()->ensure_grad().data(), false);
  });
  map_copy(x.values().data(), out.values().data(), true);
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  Shape oshape = xs[0].shape();
  std::int64_t total_len = 0;
  for (const auto& x : xs) {
    check(x.rank() == xs[0].rank(), "concat: rank mismatch");
    for (int i = 0; i < x.rank(); ++i)
      if (i != axis)
        check(x.dim(i) == xs[0].dim(i), "concat: extent mismatch off-axis");
    total_len += x.dim(axis);
  }
  oshape[static_cast<std::size_t>(axis)] = total_len;
  const auto ov = detail::axis_view(oshape, axis);

  auto n = std::make_shared<Node<S>>();
  n->shape = oshape;
  n->val.resize_uninit(static_cast<std::size_t>(numel_of(oshape)));
  n->op = "concat";
  bool needs = false;
  if (grad_enabled())
    for (const auto& x : xs) needs = needs || x.requires_grad();
  Tensor<S> out(std::move(n));

  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t len = x.dim(axis);
    const auto& src = x.values();
    for (std::int64_t o = 0; o < ov.outer; ++o)
      std::memcpy(out.values().data() + (o * ov.len + off) * ov.inner,
                  src.data() + o * len * ov.inner,
                  static_cast<std::size_t>(len * ov.inner) * sizeof(S));
    off += len;
  }
  if (needs) {
    out.node()->requires_grad = true;
    for (const auto& x : xs) out.node()->parents.push_back(x.node());
    auto inputs = xs;
    out.node()->backward = [inputs, ov, axis](Node<S>& n2) {
      std::int64_t off2 = 0;
      for (const auto& x : inputs) {
        const std::int64_t len = x.dim(axis);
        if (x.requires_grad()) {
          auto& dst = x.node()->ensure_grad();
          for (std::int64_t o = 0; o < ov.outer; ++o) {
            const S* g = n2.grad.data() + (o * ov.len + off2) * ov.inner;
            S* d = dst.data() + o * len * ov.inner;
            for (std::int64_t i = 0; i < len * ov.inner; ++i) d[i] += g[i];
          }
        }
        off2 += len;
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, std::int64_t start, std::int64_t len) {
  const auto v = detail::axis_view(x.shape(), axis);
  check(start >= 0 && start + len <= v.len, "slice: range out of bounds");
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(axis)] = len;
  Tensor<S> out = detail::make_op<S>(oshape, "slice", {x}, [x, v, start, len](Node<S>& n) {
    if (!x.requires_grad()) return;
    auto& dst = x.node()->ensure_grad();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      const S* g = n.grad.data() + o * len * v.inner;
      S* d = dst.data() + (o * v.len + start) * v.inner;
      for (std::int64_t i = 0; i < len * v.inner; ++i) d[i] += g[i];
    }
  });
  for (std::int64_t o = 0; o < v.outer; ++o)
    std::memcpy(out.values().data() + o * len * v.inner,
                x.values().data() + (o * v.len + start) * v.inner,
                static_cast<std::size_t>(len * v.inner) * sizeof(S));
  return out;
}

// Replicate x along a new leading axis: (..) -> (reps, ..).
template <class S>
Tensor<S> tile_leading(const Tensor<S>& x, std::int64_t reps) {
  Shape oshape;
  oshape.push_back(reps);
  for (auto e : x.shape()) oshape.push_back(e);
  const std::int64_t n = x.numel();
  Tensor<S> out = detail::make_op<S>(oshape, "tile", {x}, [x, reps, n](Node<S>& nd) {
    if (!x.requires_grad()) return;
    auto& dst = x.node()->ensure_grad();
    for (std::int64_t r = 0; r < reps; ++r) {
      const S* g = nd.grad.data() + r * n;
      for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += g[i];
    }
  });
  for (std::int64_t r = 0; r < reps; ++r)
    std::memcpy(out.values().data() + r * n, x.values().data(),
                static_cast<std::size_t>(n) * sizeof(S));
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out = detail::make_op<S>({1}, "sum", {x}, [x](Node<S>& n) {
    auto& dst = x.node()->ensure_grad();
    for (auto& d : dst) d += n.grad[0];
  });
  S acc = 0;
  for (auto v : x.values()) acc += v;
  out.values()[0] = acc;
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

template <class S>
Tensor<S> sum_axis(const Tensor<S>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<S> out = detail::make_op<S>(detail::drop_axis(x.shape(), axis), "sum_axis",
                                     {x}, [x, v](Node<S>& n) {
    if (!x.requires_grad()) return;
    auto& dst = x.node()->ensure_grad();
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t l = 0; l < v.len; ++l)
        for (std::int64_t i = 0; i < v.inner; ++i)
          dst[static_cast<std::size_t>((o * v.len + l) * v.inner + i)] +=
              n.grad[static_cast<std::size_t>(o * v.inner + i)];
  });
  const auto& xv = x.values();
  auto& ov = out.values();
  std::fill(ov.begin(), ov.end(), S(0));
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t l = 0; l < v.len; ++l)
      for (std::int64_t i = 0; i < v.inner; ++i)
        ov[static_cast<std::size_t>(o * v.inner + i)] +=
            xv[static_cast<std::size_t>((o * v.len + l) * v.inner + i)];
  return out;
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, int axis) {
  return scale(sum_axis(x, axis), S(1) / static_cast<S>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Normalizations and attention primitives

// Stable softmax along `axis` (max subtraction).
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<S> out = detail::make_op<S>(x.shape(), "softmax", {x}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.len * v.inner + i;
      S m = xv[static_cast<std::size_t>(base)];
      for (std::int64_t l = 1; l < v.len; ++l)
        m = std::max(m, xv[static_cast<std::size_t>(base + l * v.inner)]);
      S s = 0;
      for (std::int64_t l = 0; l < v.len; ++l) {
        const S e = std::exp(xv[static_cast<std::size_t>(base + l * v.inner)] - m);
        ov[static_cast<std::size_t>(base + l * v.inner)] = e;
        s += e;
      }
      const S inv = S(1) / s;
      for (std::int64_t l = 0; l < v.len; ++l)
        ov[static_cast<std::size_t>(base + l * v.inner)] *= inv;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [x, v](Node<S>& n) {
      auto& dst = x.node()->ensure_grad();
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const std::int64_t base = o * v.len * v.inner + i;
          S dot = 0;
          for (std::int64_t l = 0; l < v.len; ++l) {
            const auto k = static_cast<std::size_t>(base + l * v.inner);
            dot += n.grad[k] * n.val[k];
          }
          for (std::int64_t l = 0; l < v.len; ++l) {
            const auto k = static_cast<std::size_t>(base + l * v.inner);
            dst[k] += n.val[k] * (n.grad[k] - dot);
          }
        }
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> logsumexp(const Tensor<S>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<S> out = detail::make_op<S>(detail::drop_axis(x.shape(), axis), "logsumexp",
                                     {x}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.len * v.inner + i;
      S m = xv[static_cast<std::size_t>(base)];
      for (std::int64_t l = 1; l < v.len; ++l)
        m = std::max(m, xv[static_cast<std::size_t>(base + l * v.inner)]);
      S s = 0;
      for (std::int64_t l = 0; l < v.len; ++l)
        s += std::exp(xv[static_cast<std::size_t>(base + l * v.inner)] - m);
      ov[static_cast<std::size_t>(o * v.inner + i)] = m + std::log(s);
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [x, v](Node<S>& n) {
      auto& dst = x.node()->ensure_grad();
      const auto& xv2 = x.values();
      for (std::int64_t o = 0; o < v.outer; ++o)
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const std::int64_t base = o * v.len * v.inner + i;
          const auto ko = static_cast<std::size_t>(o * v.inner + i);
          for (std::int64_t l = 0; l < v.len; ++l) {
            const auto k = static_cast<std::size_t>(base + l * v.inner);
            dst[k] += n.grad[ko] * std::exp(xv2[k] - n.val[ko]);
          }
        }
    };
  }
  return out;
}

// Max along axis; gradient routes to the first maximal element.
template <class S>
Tensor<S> max_axis(const Tensor<S>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  std::vector<std::int64_t> arg(static_cast<std::size_t>(v.outer * v.inner));
  Tensor<S> out = detail::make_op<S>(detail::drop_axis(x.shape(), axis), "max_axis",
                                     {x}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.len * v.inner + i;
      S best = xv[static_cast<std::size_t>(base)];
      std::int64_t bi = 0;
      for (std::int64_t l = 1; l < v.len; ++l) {
        const S c = xv[static_cast<std::size_t>(base + l * v.inner)];
        if (c > best) {
          best = c;
          bi = l;
        }
      }
      ov[static_cast<std::size_t>(o * v.inner + i)] = best;
      arg[static_cast<std::size_t>(o * v.inner + i)] = bi;
    }
  if (out.requires_grad()) {
    out.node()->backward = [x, v, arg](Node<S>& n) {
      auto& dst = x.node()->ensure_grad();
      for (std::int64_t o = 0; o < v.outer; ++o)
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const auto ko = static_cast<std::size_t>(o * v.inner + i);
          dst[static_cast<std::size_t>((o * v.len + arg[ko]) * v.inner + i)] += n.grad[ko];
        }
    };
  }
  return out;
}

template <class S>
Tensor<S> min_axis(const Tensor<S>& x, int axis) {
  return neg(max_axis(neg(x), axis));
}

// Pre-affine output is standardized per row over the last axis (eps 1e-5).
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
  const std::int64_t d = x.dim(x.rank() - 1);
  check(gain.numel() == d && bias.numel() == d, "layer_norm: affine width mismatch");
  const std::int64_t rows = x.numel() / d;
  const S eps = S(1e-5);
  auto xhat = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows * d));
  auto inv = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));

  Tensor<S> out = detail::make_op<S>(x.shape(), "layer_norm", {x, gain, bias},
                                     [x, gain, bias, xhat, inv, rows, d](Node<S>& n) {
    const auto& gv = gain.values();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* g = n.grad.data() + r * d;
      const S* xh = xhat->data() + r * d;
      if (gain.requires_grad()) {
        auto& dg = gain.node()->ensure_grad();
        for (std::int64_t j = 0; j < d; ++j) dg[static_cast<std::size_t>(j)] += g[j] * xh[j];
      }
      if (bias.requires_grad()) {
        auto& db = bias.node()->ensure_grad();
        for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += g[j];
      }
      if (x.requires_grad()) {
        auto& dx = x.node()->ensure_grad();
        S m1 = 0, m2 = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          const S dxh = g[j] * gv[static_cast<std::size_t>(j)];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= static_cast<S>(d);
        m2 /= static_cast<S>(d);
        const S iv = (*inv)[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < d; ++j) {
          const S dxh = g[j] * gv[static_cast<std::size_t>(j)];
          dx[static_cast<std::size_t>(r * d + j)] += iv * (dxh - m1 - xh[j] * m2);
        }
      }
    }
  });

  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = xv.data() + r * d;
    S mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<S>(d);
    S var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(d);
    const S iv = S(1) / std::sqrt(var + eps);
    (*inv)[static_cast<std::size_t>(r)] = iv;
    for (std::int64_t j = 0; j < d; ++j) {
      const S xh = (xr[j] - mu) * iv;
      (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
      ov[static_cast<std::size_t>(r * d + j)] = xh * gv[static_cast<std::size_t>(j)] +
                                                bv[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

// Unit Euclidean norm along the last axis; zero rows pass through (eps guard).
template <class S>
Tensor<S> l2_normalize(const Tensor<S>& x) {
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / d;
  const S eps = S(1e-12);
  auto norms = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));

  Tensor<S> out = detail::make_op<S>(x.shape(), "l2_normalize", {x}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    S n2 = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const S v = xv[static_cast<std::size_t>(r * d + j)];
      n2 += v * v;
    }
    S nm = std::sqrt(n2);
    if (nm < eps) {
#ifdef EVL_DEBUG_GUARDS
      std::fprintf(stderr, "l2_normalize: near-zero row %lld\n",
                   static_cast<long long>(r));
#endif
      nm = eps;
    }
    (*norms)[static_cast<std::size_t>(r)] = nm;
    const S inv = S(1) / nm;
    for (std::int64_t j = 0; j < d; ++j)
      ov[static_cast<std::size_t>(r * d + j)] = xv[static_cast<std::size_t>(r * d + j)] * inv;
  }
  if (out.requires_grad()) {
    out.node()->backward = [x, norms, rows, d](Node<S>& n) {
      auto& dst = x.node()->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S* y = n.val.data() + r * d;
        const S* g = n.grad.data() + r * d;
        S dot = 0;
        for (std::int64_t j = 0; j < d; ++j) dot += y[j] * g[j];
        const S inv = S(1) / (*norms)[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < d; ++j)
          dst[static_cast<std::size_t>(r * d + j)] += (g[j] - y[j] * dot) * inv;
      }
    };
  }
  return out;
}

// softmax(q k^T / sqrt(head_dim)) v for single flat sequences.
template <class S>
Tensor<S> scaled_dot_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               std::int64_t head_dim) {
  check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
        "scaled_dot_attention: rank-2 operands required");
  check(q.dim(1) == head_dim && k.dim(1) == head_dim,
        "scaled_dot_attention: q/k width must equal head_dim");
  check(k.dim(0) == v.dim(0), "scaled_dot_attention: k/v length mismatch");
  Tensor<S> logits = scale(matmul(q, k, false, true),
                           S(1) / std::sqrt(static_cast<S>(head_dim)));
  return matmul(softmax(logits, 1), v);
}

// ---------------------------------------------------------------------------
// Discrete / lookup ops

// One-hot of argmax along `axis`; ties resolve to the lowest index. Constant
// with respect to the graph.
template <class S>
Tensor<S> one_hot_argmax(const Tensor<S>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.len * v.inner + i;
      S best = xv[static_cast<std::size_t>(base)];
      std::int64_t bi = 0;
      for (std::int64_t l = 1; l < v.len; ++l) {
        const S c = xv[static_cast<std::size_t>(base + l * v.inner)];
        if (c > best) {
          best = c;
          bi = l;
        }
      }
      ov[static_cast<std::size_t>(base + bi * v.inner)] = S(1);
    }
  return out;
}

// Embedding lookup: rows of `table` at `ids`.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<std::int64_t>& ids) {
  check(table.rank() == 2, "gather_rows: table must be rank 2");
  const std::int64_t d = table.dim(1);
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  Tensor<S> out = detail::make_op<S>({n, d}, "gather_rows", {table},
                                     [table, ids, d, n](Node<S>& nd) {
    auto& dst = table.node()->ensure_grad();
    for (std::int64_t r = 0; r < n; ++r) {
      S* dt = dst.data() + ids[static_cast<std::size_t>(r)] * d;
      const S* g = nd.grad.data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) dt[j] += g[j];
    }
  });
  for (std::int64_t r = 0; r < n; ++r)
    std::memcpy(out.values().data() + r * d,
                table.values().data() + ids[static_cast<std::size_t>(r)] * d,
                static_cast<std::size_t>(d) * sizeof(S));
  return out;
}

// Nearest-neighbor upsample of (B, h, w) by integer factor.
template <class S>
Tensor<S> upsample_nearest(const Tensor<S>& x, std::int64_t factor) {
  check(x.rank() == 3, "upsample_nearest: rank-3 input required");
  const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t oh = h * factor, ow = w * factor;
  Tensor<S> out = detail::make_op<S>({b, oh, ow}, "upsample", {x},
                                     [x, b, h, w, factor, oh, ow](Node<S>& n) {
    if (!x.requires_grad()) return;
    auto& dst = x.node()->ensure_grad();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j)
          dst[static_cast<std::size_t>((bi * h + i / factor) * w + j / factor)] +=
              n.grad[static_cast<std::size_t>((bi * oh + i) * ow + j)];
  });
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j)
        ov[static_cast<std::size_t>((bi * oh + i) * ow + j)] =
            xv[static_cast<std::size_t>((bi * h + i / factor) * w + j / factor)];
  return out;
}

}  // namespace evl
