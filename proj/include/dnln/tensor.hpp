#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dnln {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::vector<std::size_t> shape_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

/// Gradient sinks handed to a backward rule, one per recorded input. An empty
/// span means that input does not need a gradient.
using GradSinks = std::vector<std::span<double>>;
using BackwardRule = std::function<void(std::span<const double> grad_out, GradSinks& grad_in)>;

/// One recorded primitive application.
struct TapeNode {
  std::string_view rule;
  std::vector<Tensor> inputs;
  BackwardRule backward;
};

/// Dense row-major tensor of doubles with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage. Values produced
/// by operators carry a TapeNode linking them to their inputs while gradient
/// recording is enabled; the graph lives as long as the outputs that
/// reference it.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes are meant for leaves (parameters, inputs); mutating a value that
  // already fed an operator invalidates its recorded backward rules.
  std::span<double> mutable_data();
  double item() const;

  template <typename... Idx>
  double at(Idx... idx) const {
    return data()[offset({static_cast<std::size_t>(idx)...})];
  }
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const std::shared_ptr<TapeNode>& node() const;
  std::uint64_t sequence() const;

  /// Fresh leaf holding a copy of the values; no gradient history.
  Tensor detach() const;

  /// Reverse-mode sweep from a single-element tensor. Gradients accumulate into
  /// every reachable leaf that requires them; call zero_grad between steps.
  void backward() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Builds an operator output. The rule is recorded only when gradient mode
  /// is on and at least one input requires a gradient.
  static Tensor record(Shape shape, std::vector<double> data, std::string_view rule,
                       std::vector<Tensor> inputs, BackwardRule backward);

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace dnln
