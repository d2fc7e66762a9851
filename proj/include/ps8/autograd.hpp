#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ps8/tensor.hpp"

namespace ps8 {

template <class T>
struct Node {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string name;

  Tensor<T>& grad_buffer() {
    if (!grad) grad.emplace(value.shape(), T{});
    return *grad;
  }
};

/// Shared handle to a tensor participating in reverse-mode differentiation.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false, std::string name = {})
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->name = std::move(name);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  bool has_grad() const { return node_->grad.has_value(); }
  const Tensor<T>& grad() const {
    if (!node_->grad) throw std::logic_error("no gradient accumulated for '" + node_->name + "'");
    return *node_->grad;
  }
  Tensor<T>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() const { node_->grad.reset(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so the list is topologically sorted by construction.
template <class T>
class Tape {
 public:
  struct Entry {
    std::string_view kind;
    std::vector<const Node<T>*> inputs;
    std::shared_ptr<Node<T>> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// True when an op over these inputs must be recorded.
  template <class... V>
  bool wants(const V&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  /// Creates the output variable of an op, marking it differentiable when
  /// the tape is tracking any of its inputs.
  template <class... V>
  Var<T> make_output(Tensor<T> value, const V&... inputs) const {
    Var<T> out(std::move(value), wants(inputs...));
    out.node()->leaf = false;
    return out;
  }

  void record(std::string_view kind, std::vector<const Node<T>*> inputs, const Var<T>& output,
              std::function<void()> backward) {
    entries_.push_back(Entry{kind, std::move(inputs), output.shared(), std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t count(std::string_view kind) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.kind == kind; }));
  }
  void clear() { entries_.clear(); }

  template <class U>
  friend void backward(Tape<U>& tape, const Var<U>& loss);

 private:
  bool recording_ = true;
  std::vector<Entry> entries_;
};

/// Propagates d(loss)/d(x) into the gradient buffer of every tracked leaf.
/// Gradients accumulate, so fan-out contributions sum. The tape is consumed:
/// each entry runs exactly once, in reverse order, and is then released.
template <class T>
void backward(Tape<T>& tape, const Var<T>& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any tracked tensor");
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output->grad) it->backward();
    if (!it->output->leaf) it->output->grad.reset();
    it->backward = nullptr;
  }
  tape.entries_.clear();
}

}  // namespace ps8
