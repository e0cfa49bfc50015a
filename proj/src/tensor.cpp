#include "dnln/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace dnln {

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;

}  // namespace

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;
  std::uint64_t seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
};

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::vector<std::size_t> shape_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("tensor: axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw std::invalid_argument("tensor: index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw std::out_of_range("tensor: index out of range");
    off = off * s[axis] + i;
    ++axis;
  }
  return off;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  if (impl_->node) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

const std::shared_ptr<TapeNode>& Tensor::node() const {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return impl_->node;
}

std::uint64_t Tensor::sequence() const { return impl_ ? impl_->seq : 0; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Tensor Tensor::record(Shape shape, std::vector<double> data, std::string_view rule,
                      std::vector<Tensor> inputs, BackwardRule backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!t_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.impl_->requires_grad = true;
  out.impl_->node = std::make_shared<TapeNode>(TapeNode{rule, std::move(inputs), std::move(backward)});
  return out;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss must be a single value, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) return;

  // Reachable graph. Operands are always created before their results, so
  // descending creation sequence is a valid reverse topological order.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<Impl*> stack{impl_.get()};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    Impl* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    if (!cur->node) continue;
    for (auto& in : cur->node->inputs) {
      Impl* p = in.impl_.get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(), [](Impl* a, Impl* b) { return a->seq > b->seq; });

  std::unordered_map<Impl*, std::vector<double>> pending;
  pending[impl_.get()].assign(1, 1.0);
  for (Impl* cur : order) {
    auto it = pending.find(cur);
    if (it == pending.end()) continue;
    if (!cur->node) {
      if (cur->grad.empty()) cur->grad.assign(cur->data.size(), 0.0);
      for (std::size_t i = 0; i < cur->grad.size(); ++i) cur->grad[i] += it->second[i];
      pending.erase(it);
      continue;
    }
    GradSinks sinks;
    sinks.reserve(cur->node->inputs.size());
    for (auto& in : cur->node->inputs) {
      Impl* p = in.impl_.get();
      if (!p->requires_grad) {
        sinks.emplace_back();
        continue;
      }
      auto& buf = pending[p];
      if (buf.empty()) buf.assign(p->data.size(), 0.0);
      sinks.emplace_back(buf);
    }
    // rehashing keeps element addresses stable, so the sinks stay valid
    auto& g = pending.find(cur)->second;
    cur->node->backward(g, sinks);
    pending.erase(cur);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace dnln
