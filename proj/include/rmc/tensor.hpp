#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every tensor produced by a differentiable op while gradient recording is
// enabled gets a tape id from a per-thread counter. backward() replays the
// reachable part of the tape in decreasing id order, which is a valid reverse
// topological order because an op's inputs always exist before its output.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rmc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Extents of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();
  std::optional<std::uint64_t> tape_id() const;

  // Copy of the values with no tape history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// True while ops record onto the tape (the default).
bool grad_enabled();

// Disables tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Populates gradients of every reachable tensor that requires them. Leaf
// gradients accumulate across calls until zeroed.
void backward(const Tensor& loss);

namespace detail {

// Builds an op result. Records parents and the backward closure only when
// recording is enabled and some parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace rmc
