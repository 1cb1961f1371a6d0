#include "msfuse/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

namespace msfuse {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }

std::span<const double> Tensor::values() const { return impl_->values; }

std::span<double> Tensor::mutable_values() {
  if (!impl_->is_leaf()) throw std::logic_error("mutable_values() on a non-leaf tensor");
  return impl_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
  Tape::record(*this).run_backward();
}

Tensor Tensor::detach() const { return from(shape(), impl_->values, false); }

const char* Tensor::op_name() const { return impl_->op; }

Tape Tape::record(const Tensor& root) {
  Tape tape;
  std::unordered_map<TensorImpl*, std::size_t> index;
  // Iterative post-order DFS; inputs are emitted before their consumers.
  struct Frame {
    TensorImpl* node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  if (root.defined() && root.requires_grad()) stack.push_back({root.impl(), 0});
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.next_input == 0 && index.count(top.node)) {
      stack.pop_back();
      continue;
    }
    if (top.next_input < top.node->inputs.size()) {
      TensorImpl* child = top.node->inputs[top.next_input++].get();
      if (child->requires_grad && !index.count(child)) stack.push_back({child, 0});
      continue;
    }
    TensorImpl* done = top.node;
    stack.pop_back();
    Record rec{tape.order_.size(), {}, done->op};
    for (const auto& in : done->inputs) {
      auto it = index.find(in.get());
      if (it != index.end()) rec.inputs.push_back(it->second);
    }
    index[done] = tape.order_.size();
    tape.order_.push_back(done);
    tape.records_.push_back(std::move(rec));
  }
  return tape;
}

void Tape::run_backward() const {
  if (order_.empty()) return;
  auto& seed = order_.back()->grad_buffer();
  std::fill(seed.begin(), seed.end(), 1.0);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   const char* op, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  TensorImpl* impl = out.impl();
  impl->requires_grad = true;
  impl->op = op;
  impl->backward = std::move(fn);
  for (const auto& t : inputs) {
    if (t.defined()) impl->inputs.push_back(t.ptr());
  }
  return out;
}

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   const char* op, BackwardFn fn) {
  return make_result(std::move(shape), std::move(values), std::vector<Tensor>(inputs), op, std::move(fn));
}

}  // namespace msfuse
