#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "starry/errors.hpp"

namespace starry {

class Rng;
class Tape;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  std::vector<float> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // id of the recording tape, 0 for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;
};

// Accumulates into the node's grad buffer, allocating it on first touch.
std::vector<float>& grad_buffer(TensorNode* node);

}  // namespace detail

// Dense row-major f32 tensor. Copies are shallow handles onto a shared
// node; data mutation is reserved for leaves (parameter updates) and
// construction-time fills.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float value) { return Tensor(Shape{}, {value}); }
  static Tensor randn(const Shape& shape, Rng& rng, float stddev = 1.0f);
  static Tensor uniform(const Shape& shape, Rng& rng, float lo, float hi);

  // Shares the underlying data buffer but owns a fresh grad slot; used by
  // batch workers so gradient accumulation never races across threads.
  static Tensor leaf_view(const Tensor& source);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data->size(); }
  std::size_t rank() const { return node_->shape.size(); }

  float* data() { return node_->data->data(); }
  const float* data() const { return node_->data->data(); }
  std::vector<float>& values() { return *node_->data; }
  const std::vector<float>& values() const { return *node_->data; }

  // value of a single-element tensor
  float item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<float>& grad() const;
  std::vector<float> take_grad();
  void zero_grad();

  // Same data, no graph participation.
  Tensor detach() const;
  Tensor clone() const;

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. The innermost instance on each thread is active; ops
// record result nodes onto it when gradients are requested, and backward
// replays the records in strict reverse execution order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable
  // requires_grad leaf. loss must be scalar and recorded on this tape.
  void backward(const Tensor& loss);

  std::size_t entry_count() const { return entries_.size(); }

  static Tape* active();
  static void record(const std::shared_ptr<detail::TensorNode>& node,
                     std::vector<std::shared_ptr<detail::TensorNode>> parents,
                     std::function<void()> backward_fn);

 private:
  std::vector<std::shared_ptr<detail::TensorNode>> entries_;
  Tape* previous_ = nullptr;
  std::uint64_t id_ = 0;
};

}  // namespace starry
