#include "rmc/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "rmc/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rmc {

namespace {

#if defined(__GLIBC__)
// Activations are a few hundred KB each and die within one step. Left to
// defaults, glibc serves them with fresh mmap calls and pays page faults on
// every op; keeping them on the heap roughly halves step time.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_next_tape_id = 1;

detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw ContractError("operation on an undefined tensor");
  return *n;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string(s));
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string(s));
  return s[1];
}

std::span<double> Tensor::data() { return checked(node_).data; }
std::span<const double> Tensor::data() const { return checked(node_).data; }

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.data.size() != 1)
    throw ContractError("item() on tensor of shape " + shape_string(n.shape));
  return n.data[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
void Tensor::set_requires_grad(bool on) { checked(node_).requires_grad = on; }
bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }
std::span<double> Tensor::grad() { return checked(node_).grad; }
std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
  auto& n = checked(node_);
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

std::optional<std::uint64_t> Tensor::tape_id() const {
  const auto id = checked(node_).tape_id;
  if (id == 0) return std::nullopt;
  return id;
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return from_data(n.shape, n.data, false);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor detail::make_result(Shape shape, std::vector<double> data,
                           std::vector<std::shared_ptr<Node>> parents,
                           std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (t_grad_enabled)
    for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->tape_id = t_next_tape_id++;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.shape()));
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;
  if (root->tape_id == 0) {
    root->ensure_grad()[0] += 1.0;
    return;
  }

  // Collect the recorded (non-leaf) nodes reachable from the loss.
  std::vector<detail::Node*> recorded;
  std::vector<detail::Node*> stack{root};
  std::unordered_set<const detail::Node*> seen;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (n->tape_id == 0) continue;
    if (!seen.insert(n).second) continue;
    recorded.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(recorded.begin(), recorded.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->tape_id > b->tape_id; });

  // Intermediate gradients are per-pass scratch; only leaves accumulate.
  for (auto* n : recorded) n->grad.assign(n->data.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto* n : recorded) n->backward(*n);
}

}  // namespace rmc
