#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace hcm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

// Runtime guard that scans op outputs for NaN/Inf. Defaults to on in debug
// builds; tests and debugging sessions can flip it at runtime.
struct debug_checks {
  static bool& enabled() {
#ifdef NDEBUG
    static bool on = false;
#else
    static bool on = true;
#endif
    return on;
  }
};

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first recorded use
  bool requires_grad = false;
  // Tape bookkeeping. (tape, tape_uid) identifies the recording a node id
  // belongs to; uids are never reused, so stale ids from destroyed or reset
  // tapes are recognized and ignored.
  Tape<T>* tape = nullptr;
  uint64_t tape_uid = 0;
  int64_t node = -1;
};

inline uint64_t next_tape_uid() {
  static std::atomic<uint64_t> c{1};
  return c.fetch_add(1);
}

// Per-thread set of live tape uids (tapes are confined to one thread).
inline std::unordered_set<uint64_t>& live_tape_uids() {
  thread_local std::unordered_set<uint64_t> s;
  return s;
}

}  // namespace detail

// Shared-buffer tensor handle: copies alias the same storage, the usual
// autodiff-engine design. Contract: data is immutable once a tensor has been
// consumed by a recorded op (parameters may be updated between tapes); the
// grad buffer is the only mutable piece during backward.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.impl_->data) v = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("Tensor::from: shape " + shape_str(shape) + " wants " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  const T* data() const { return impl_->data.data(); }
  // Mutable access exists for construction, parameter updates between tapes,
  // and test harnesses; never mutate a tensor a live tape has recorded.
  // Const-qualified: tensors are shared handles, so copies (including lambda
  // captures inside backward closures) mutate the same underlying buffers.
  T* mutable_data() const { return impl_->data.data(); }
  const std::vector<T>& vec() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad())
      throw TapeError("grad(): no gradient buffer on this tensor (did backward run?)");
    return impl_->grad;
  }
  std::vector<T>& grad_ref() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() const {
    if (impl_ && !impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw DimensionError("at(): index rank mismatch for shape " + shape_str(shape()));
    int64_t flat = 0;
    int i = 0;
    for (int64_t v : idx) {
      flat = flat * impl_->shape[static_cast<size_t>(i)] + v;
      ++i;
    }
    return impl_->data[static_cast<size_t>(flat)];
  }

  // Deep copy, detached from any tape, grad dropped, requires_grad off.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  detail::TensorImpl<T>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Reverse-mode gradient tape. Ops push one node each (output id, input ids,
// backward closure); backward() walks nodes in reverse recording order,
// restricted to nodes reachable from the loss, accumulating gradients into
// shared grad buffers with +=. A tape is confined to one thread.
template <typename T>
class Tape {
 public:
  Tape() : uid_(detail::next_tape_uid()) { detail::live_tape_uids().insert(uid_); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    detail::live_tape_uids().erase(uid_);
    if (active_slot() == this) active_slot() = nullptr;
  }

  // RAII activation; ops record onto the innermost active tape.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_slot(); }

  size_t node_count() const { return nodes_.size(); }
  uint64_t uid() const { return uid_; }

  // Registers an op. `out` becomes grad-carrying; every grad-carrying input
  // gets its grad buffer allocated now so the closure's += always lands in
  // storage shared by all aliases. Public on purpose: this is the extension
  // point for fused ops (and for negative-control tests with wrong rules).
  void record(const char* op, Tensor<T>& out, std::initializer_list<Tensor<T>> ins,
              std::function<void()> backward_fn) {
    Node node;
    node.op = op;
    for (const Tensor<T>& in : ins) {
      auto* im = in.impl();
      if (im->tape && im->tape != this && im->node >= 0 &&
          detail::live_tape_uids().count(im->tape_uid))
        throw TapeError(std::string(op) + ": input tensor is recorded on a different live tape");
      if (im->requires_grad) {
        node.ins.push_back(ensure_id(in));
        if (im->grad.empty()) im->grad.assign(im->data.size(), T(0));
      }
    }
    auto* om = out.impl();
    om->requires_grad = true;
    om->grad.assign(om->data.size(), T(0));
    node.out = ensure_id(out);
    node.fn = std::move(backward_fn);
    nodes_.push_back(std::move(node));
  }

  void backward(const Tensor<T>& loss) {
    if (spent_)
      throw TapeError("backward() already ran on this tape; call reset() before reuse");
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward(): loss must be a scalar tensor");
    auto* im = loss.impl();
    if (nodes_.empty() || im->tape != this || im->tape_uid != uid_ || im->node < 0)
      throw TapeError(
          "backward(): loss is not recorded on this tape (empty tape or detached loss)");
    spent_ = true;
    im->grad.assign(1, T(1));
    std::unordered_set<int64_t> reachable;
    reachable.insert(im->node);
    // Closures must not record; ops on sibling graphs stay untouched because
    // only nodes reachable from the loss run.
    Tape* prev = active_slot();
    active_slot() = nullptr;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!reachable.count(it->out)) continue;
      it->fn();
      for (int64_t id : it->ins) reachable.insert(id);
    }
    active_slot() = prev;
  }

  void reset() {
    detail::live_tape_uids().erase(uid_);
    nodes_.clear();
    next_id_ = 0;
    spent_ = false;
    uid_ = detail::next_tape_uid();
    detail::live_tape_uids().insert(uid_);
  }

 private:
  struct Node {
    const char* op;
    int64_t out = -1;
    std::vector<int64_t> ins;
    std::function<void()> fn;
  };

  int64_t ensure_id(const Tensor<T>& t) {
    auto* im = t.impl();
    if (im->tape == this && im->tape_uid == uid_ && im->node >= 0) return im->node;
    im->tape = this;
    im->tape_uid = uid_;
    im->node = next_id_++;
    return im->node;
  }

  static Tape*& active_slot() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<Node> nodes_;
  int64_t next_id_ = 0;
  uint64_t uid_;
  bool spent_ = false;
};

namespace detail {

// Every op funnels its output through here: optional non-finite scan.
template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  if (!debug_checks::enabled()) return;
  const T* p = t.data();
  for (int64_t i = 0, n = t.numel(); i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw DataError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
  }
}

// True when a tape is active and at least one input carries gradient.
template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace hcm
