#include "starry/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "starry/rng.hpp"

namespace starry {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace detail {

std::vector<float>& grad_buffer(TensorNode* node) {
  if (node->grad.empty()) node->grad.assign(node->data->size(), 0.0f);
  return node->grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, float fill) {
  node_ = std::make_shared<detail::TensorNode>();
  node_->data = std::make_shared<std::vector<float>>(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) {
  if (numel(shape) != values.size()) {
    throw ShapeMismatchError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<detail::TensorNode>();
  node_->data = std::make_shared<std::vector<float>>(std::move(values));
  node_->shape = std::move(shape);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, float stddev) {
  Tensor t(shape);
  for (float& v : t.values()) v = stddev * static_cast<float>(rng.normal());
  return t;
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, float lo, float hi) {
  Tensor t(shape);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor Tensor::leaf_view(const Tensor& source) {
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = source.node_->shape;
  t.node_->data = source.node_->data;  // shared storage
  t.node_->requires_grad = source.node_->requires_grad;
  return t;
}

float Tensor::item() const {
  if (size() != 1) {
    throw ShapeMismatchError("item() requires a single-element tensor, got " +
                             shape_str(shape()));
  }
  return (*node_->data)[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

const std::vector<float>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw Error("gradient not populated; call Tape::backward first");
  }
  return node_->grad;
}

std::vector<float> Tensor::take_grad() {
  std::vector<float> out = std::move(node_->grad);
  node_->grad.clear();
  return out;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = node_->shape;
  t.node_->data = node_->data;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.node_ = std::make_shared<detail::TensorNode>();
  t.node_->shape = node_->shape;
  t.node_->data = std::make_shared<std::vector<float>>(*node_->data);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_counter{1};
}

Tape::Tape() {
  previous_ = g_active_tape;
  id_ = g_tape_counter.fetch_add(1);
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const std::shared_ptr<detail::TensorNode>& node,
                  std::vector<std::shared_ptr<detail::TensorNode>> parents,
                  std::function<void()> backward_fn) {
  Tape* tape = g_active_tape;
  node->tape_id = tape->id_;
  node->requires_grad = true;
  node->parents = std::move(parents);
  node->backward_fn = std::move(backward_fn);
  tape->entries_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeMismatchError("backward requires a scalar loss");
  }
  detail::TensorNode* root = loss.node();
  if (root->tape_id != id_) {
    throw NoTapeError("loss was not recorded on this tape");
  }

  // Reachability from the loss keeps unrelated records inert.
  std::unordered_set<const detail::TensorNode*> reachable;
  std::vector<const detail::TensorNode*> stack{root};
  reachable.insert(root);
  while (!stack.empty()) {
    const detail::TensorNode* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (p->requires_grad && reachable.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }

  detail::grad_buffer(root)[0] = 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    detail::TensorNode* n = it->get();
    if (n->backward_fn && reachable.count(n) && !n->grad.empty()) {
      n->backward_fn();
    }
  }

  for (const auto& entry : entries_) {
    if (!std::all_of(entry->grad.begin(), entry->grad.end(),
                     [](float g) { return std::isfinite(g); })) {
      throw NonFiniteError("non-finite gradient produced during backward");
    }
  }
}

}  // namespace starry
