#pragma once
// Dense row-major tensors (rank <= 4) with a tape-based reverse-mode autodiff
// engine. Ops record nodes onto the thread's active tape in execution order;
// backward() walks the tape once in reverse. A tape and the tensors recorded
// on it are confined to one thread; forward passes without an active tape do
// not record and may share frozen parameters across threads.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace catnet {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Counters for non-fatal degenerate inputs (empty masks, zero-norm vectors).
// These keep training alive instead of poisoning it with NaNs.
namespace warnings {

enum class Kind : int {
  zero_norm_cosine = 0,
  empty_support_mask,
  empty_prototype_class,
  empty_attention_mask,
  skipped_small_class,
  kind_count_
};

inline std::atomic<std::uint64_t>& counter(Kind k) {
  static std::atomic<std::uint64_t> counters[static_cast<int>(Kind::kind_count_)];
  return counters[static_cast<int>(k)];
}

inline void bump(Kind k) { counter(k).fetch_add(1, std::memory_order_relaxed); }

inline std::uint64_t count(Kind k) {
  return counter(k).load(std::memory_order_relaxed);
}

inline void reset() {
  for (int i = 0; i < static_cast<int>(Kind::kind_count_); ++i)
    counter(static_cast<Kind>(i)).store(0, std::memory_order_relaxed);
}

}  // namespace warnings

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims)
      : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > kMaxRank)
      throw ShapeError("shape rank must be in [1," + std::to_string(kMaxRank) +
                       "], got " + std::to_string(dims_.size()));
    for (std::size_t d : dims_)
      if (d == 0) throw ShapeError("shape extents must be >= 1, got " + str_of(dims_));
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : dims_) n *= d;
    return n;
  }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

  std::string str() const { return str_of(dims_); }

 private:
  static std::string str_of(const std::vector<std::size_t>& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) os << "x";
      os << dims[i];
    }
    os << "]";
    return os.str();
  }

  std::vector<std::size_t> dims_;
};

template <typename S>
struct TensorDataT {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation / ensure_grad()
  bool requires_grad = false;
  bool tracked = false;  // produced by a recorded op on some tape

  explicit TensorDataT(Shape s, S fill = S(0))
      : shape(std::move(s)), value(shape.numel(), fill) {}
  TensorDataT(Shape s, std::vector<S> v) : shape(std::move(s)), value(std::move(v)) {
    if (value.size() != shape.numel())
      throw ShapeError("data length " + std::to_string(value.size()) +
                       " does not match shape " + shape.str());
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

// Value-semantics handle over shared tensor storage.
template <typename S>
class TensorT {
 public:
  using Data = TensorDataT<S>;

  TensorT() = default;
  explicit TensorT(Shape shape, S fill = S(0))
      : d_(std::make_shared<Data>(std::move(shape), fill)) {}
  TensorT(Shape shape, std::vector<S> values)
      : d_(std::make_shared<Data>(std::move(shape), std::move(values))) {}

  static TensorT zeros(Shape s) { return TensorT(std::move(s), S(0)); }
  static TensorT full(Shape s, S v) { return TensorT(std::move(s), v); }
  static TensorT scalar(S v) { return TensorT(Shape{1}, std::vector<S>{v}); }
  static TensorT param(Shape s, std::vector<S> values) {
    TensorT t(std::move(s), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.rank(); }
  std::size_t numel() const { return d_->shape.numel(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }

  std::vector<S>& data() { return d_->value; }
  const std::vector<S>& data() const { return d_->value; }
  std::vector<S>& grad() { return d_->grad; }
  const std::vector<S>& grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  void ensure_grad() { d_->ensure_grad(); }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool r) { d_->requires_grad = r; }
  bool tracked() const { return d_->tracked; }
  void mark_tracked() { d_->tracked = true; }
  // True when backward should deposit gradient into this tensor.
  bool tracks() const { return d_->requires_grad || d_->tracked; }

  const std::shared_ptr<Data>& impl() const { return d_; }

  S& at(std::size_t i) { return d_->value[i]; }
  S at(std::size_t i) const { return d_->value[i]; }
  S& at(std::size_t i, std::size_t j) { return d_->value[i * d_->shape[1] + j]; }
  S at(std::size_t i, std::size_t j) const { return d_->value[i * d_->shape[1] + j]; }
  S& at(std::size_t i, std::size_t j, std::size_t k) {
    return d_->value[(i * d_->shape[1] + j) * d_->shape[2] + k];
  }
  S at(std::size_t i, std::size_t j, std::size_t k) const {
    return d_->value[(i * d_->shape[1] + j) * d_->shape[2] + k];
  }
  S& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return d_->value[((i * d_->shape[1] + j) * d_->shape[2] + k) * d_->shape[3] + l];
  }
  S at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return d_->value[((i * d_->shape[1] + j) * d_->shape[2] + k) * d_->shape[3] + l];
  }

  bool all_finite() const {
    for (S v : d_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Deep copy of values; fresh storage, no grad, not recorded anywhere.
  TensorT clone_detached() const {
    return TensorT(d_->shape, d_->value);
  }

 private:
  std::shared_ptr<Data> d_;
};

template <typename S>
class TapeT {
 public:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  static TapeT*& current() {
    thread_local TapeT* active = nullptr;
    return active;
  }

  void record(const char* op, std::function<void()> fn) {
    nodes_.push_back(Node{op, std::move(fn)});
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Nodes were
  // appended in execution order, so every node's inputs precede it and one
  // reverse sweep visits each node exactly once.
  void backward(TensorT<S>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward() needs a scalar loss, got shape " +
                       loss.shape().str());
    if (nodes_.empty()) throw UsageError("backward() on an empty tape");
    loss.ensure_grad();
    loss.grad()[0] += S(1);
    visits_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      ++visits_;
      it->backward();
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// RAII scope that makes a fresh tape the thread's recording target.
template <typename S>
class TapeScopeT {
 public:
  TapeScopeT() : prev_(TapeT<S>::current()) { TapeT<S>::current() = &tape_; }
  ~TapeScopeT() { TapeT<S>::current() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

  TapeT<S>& tape() { return tape_; }

 private:
  TapeT<S> tape_;
  TapeT<S>* prev_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

}  // namespace catnet
