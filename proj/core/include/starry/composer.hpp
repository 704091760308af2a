#pragma once

#include <cstdint>
#include <vector>

#include "starry/camera.hpp"
#include "starry/tensor.hpp"

namespace starry {

// One camera's RGB-D observation. rgb is planar (3, H, W) in [0,1],
// depth in meters with 0 marking invalid pixels.
struct ViewFrame {
  std::size_t view_id = 0;
  CameraModel camera;
  std::vector<float> rgb;
  std::vector<float> depth;
  std::vector<std::uint8_t> valid;
};

struct MultiViewFrame {
  std::size_t timestamp = 0;
  std::vector<ViewFrame> views;
};

// Fixed per-effector trace colors (magenta, cyan, orange, ...).
const std::vector<std::array<float, 3>>& effector_colors();

// Draws the projected end-effector history onto a copy of the view's rgb:
// one filled disk of radius 1 px per in-frame point, newest drawn last,
// one fixed color per effector. Points behind the camera or off-frame are
// skipped. `history` is per effector, oldest first.
std::vector<float> overlay_trajectory(const ViewFrame& view,
                                      const std::vector<std::vector<Vec3>>& history);

// Fixed spatial-temporal layout: (steps, views, C, H, W) with views
// ordered by view_id, channels [R, G, B] (+ depth / d_max when enabled),
// steps in time order.
struct ComposedInput {
  std::size_t steps = 0, views = 0, channels = 0, height = 0, width = 0;
  std::vector<float> data;

  std::size_t frame_size() const { return channels * height * width; }
  float* frame(std::size_t step, std::size_t view) {
    return data.data() + (step * views + view) * frame_size();
  }
  const float* frame(std::size_t step, std::size_t view) const {
    return data.data() + (step * views + view) * frame_size();
  }
};

struct ComposeOptions {
  float d_max = 3.0f;         // depth normalization scale, clipped
  bool include_depth = true;  // appearance-only inputs drop this channel
};

// `rgb_overlays[step][view]` optionally replaces the stored rgb (the
// overlay op output); pass an empty outer vector to use raw frames.
ComposedInput compose(const std::vector<MultiViewFrame>& window,
                      const std::vector<std::vector<std::vector<float>>>& rgb_overlays,
                      const ComposeOptions& options);

// Learned linear patch embedding plus factorized additive positions,
// stand-in for a pretrained video encoder. Parameters are owned by the
// policy model.
struct TokenizerParams {
  Tensor weight;    // (C*p*p, D)
  Tensor bias;      // (1, D)
  Tensor pos_step;  // (total step slots, D)
  Tensor pos_view;  // (views, D)
  Tensor pos_row;   // (H/p, D)
  Tensor pos_col;   // (W/p, D)
};

// One token per (step, view, patch), ordered step-major then view then
// row-major patch grid. step_offset shifts the pos_step row so future
// frames occupy their own slots after the observation window.
Tensor tokenize(const ComposedInput& x, std::size_t patch,
                const TokenizerParams& params, std::size_t step_offset = 0);

}  // namespace starry
