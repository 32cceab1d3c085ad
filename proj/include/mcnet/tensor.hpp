#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "common.hpp"

namespace mcnet {

// Dense row-major tensor. Copying a Tensor copies the handle, not the storage;
// two copies alias the same values/grad. This is what lets a parameter appear
// in many graph records while accumulating into one grad buffer.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

  struct Storage {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until ensure_grad()
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
      n *= static_cast<std::size_t>(d);
    }
    s_->shape = std::move(shape);
    s_->values.assign(n, T(0));
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    for (T& v : t.values()) v = value;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    Tensor t({1}, requires_grad);
    t.values()[0] = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (values.size() != t.size()) throw std::invalid_argument("value count does not match shape");
    t.s_->values = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int>& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return s_->values.size(); }

  // A Tensor is a shared handle: const-ness of the handle does not protect the
  // storage, so accessors are const-qualified and hand out mutable references
  // (backward closures capture handles by value and write through them).
  std::vector<T>& values() const { return s_->values; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::vector<T>& grad() const {
    if (s_->grad.empty()) throw std::logic_error("grad not allocated");
    return s_->grad;
  }

  void ensure_grad() const {
    if (s_->grad.size() != s_->values.size()) s_->grad.assign(s_->values.size(), T(0));
  }
  void zero_grad() const {
    if (!s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
  }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return s_->values[0];
  }

  // Value copy that does not participate in any graph.
  Tensor detached_copy() const {
    Tensor t(s_->shape, false);
    t.s_->values = s_->values;
    return t;
  }

  const void* key() const { return static_cast<const void*>(s_.get()); }
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  std::shared_ptr<Storage> s_;
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Reverse-mode tape. Ops append one record each in execution order, which is a
// topological order by construction. backward() walks the tape in reverse;
// replay() re-runs the forward closures in order (used to check that recorded
// forwards are pure and reproduce the same bytes).
template <typename T>
class Graph {
 public:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> forward;   // recompute output values from inputs
    std::function<void()> backward;  // scatter output grad into input grads
  };

  bool enabled() const { return enabled_; }
  void set_enabled(bool b) { enabled_ = b; }

  bool should_record(const std::vector<Tensor<T>>& inputs) const {
    if (!enabled_) return false;
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) return true;
    return false;
  }

  void record(Record r) { records_.push_back(std::move(r)); }
  std::size_t num_records() const { return records_.size(); }
  void clear() { records_.clear(); }

  void replay() {
    for (auto& r : records_)
      if (r.forward) r.forward();
  }

  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward requires a scalar loss");
    std::unordered_set<const void*> seen;
    auto touch = [&](Tensor<T>& t) {
      if (seen.insert(t.key()).second) {
        t.ensure_grad();
        t.zero_grad();
      }
    };
    for (auto& r : records_) {
      for (auto& in : r.inputs) touch(in);
      touch(r.output);
    }
    touch(loss);
    loss.grad()[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it)
      if (it->backward) it->backward();
  }

 private:
  std::vector<Record> records_;
  bool enabled_ = true;
};

// RAII guard for running forwards without recording (eval / inference).
template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph<T>& g) : g_(g), prev_(g.enabled()) { g_.set_enabled(false); }
  ~NoGradGuard() { g_.set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph<T>& g_;
  bool prev_;
};

}  // namespace mcnet
