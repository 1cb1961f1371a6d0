#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msfuse {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyperparameters or geometry.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN/Inf or a verification fails.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when reading or writing artifacts fails.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl;
using TensorPtr = std::shared_ptr<TensorImpl>;

// Backward rule: reads out.grad and accumulates into out.inputs[i]->grad.
using BackwardFn = std::function<void(TensorImpl& out)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<TensorPtr> inputs;
  BackwardFn backward;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};

/// Dense row-major tensor of doubles with an optional autodiff history.
///
/// Tensor is a cheap shared handle: copies alias the same storage. Ops never
/// mutate their inputs; every op returns a fresh tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Leaf-only mutable access (parameter updates, test fixtures).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient values; zeros if nothing was accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  /// Runs reverse-mode differentiation from this scalar tensor.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  const char* op_name() const;

  TensorImpl* impl() const { return impl_.get(); }
  const TensorPtr& ptr() const { return impl_; }

 private:
  TensorPtr impl_;
};

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  struct Record {
    std::size_t id;                // position in `order`
    std::vector<std::size_t> inputs;
    const char* op;
  };

  static Tape record(const Tensor& root);

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return order_.size(); }

  /// Seeds the root gradient with ones and runs every backward rule in
  /// reverse topological order.
  void run_backward() const;

 private:
  std::vector<TensorImpl*> order_;
  std::vector<Record> records_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op output; attaches history only when an input needs gradients.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, const char* op, BackwardFn fn);
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   const char* op, BackwardFn fn);

}  // namespace msfuse
