#include "starry/composer.hpp"

#include <algorithm>
#include <cmath>

#include "starry/ops.hpp"

namespace starry {

const std::vector<std::array<float, 3>>& effector_colors() {
  static const std::vector<std::array<float, 3>> colors = {
      {1.0f, 0.0f, 1.0f}, {0.0f, 1.0f, 1.0f}, {1.0f, 0.6f, 0.0f},
      {0.4f, 1.0f, 0.2f},
  };
  return colors;
}

std::vector<float> overlay_trajectory(const ViewFrame& view,
                                      const std::vector<std::vector<Vec3>>& history) {
  const std::size_t h = view.camera.height;
  const std::size_t w = view.camera.width;
  std::vector<float> rgb = view.rgb;
  const auto& palette = effector_colors();

  for (std::size_t m = 0; m < history.size(); ++m) {
    const auto& color = palette[m % palette.size()];
    for (const Vec3& point : history[m]) {
      PixelPoint proj;
      try {
        proj = project_point(view.camera, point);
      } catch (const BehindCameraError&) {
        continue;
      }
      const long cu = std::lround(proj.u);
      const long cv = std::lround(proj.v);
      if (cu < 0 || cv < 0 || cu >= static_cast<long>(w) ||
          cv >= static_cast<long>(h)) {
        continue;
      }
      // filled disk of radius 1: center plus 4-neighborhood
      static constexpr int offsets[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (const auto& off : offsets) {
        const long u = cu + off[0];
        const long v = cv + off[1];
        if (u < 0 || v < 0 || u >= static_cast<long>(w) || v >= static_cast<long>(h)) {
          continue;
        }
        const std::size_t idx = static_cast<std::size_t>(v) * w +
                                static_cast<std::size_t>(u);
        for (int c = 0; c < 3; ++c) rgb[c * h * w + idx] = color[c];
      }
    }
  }
  return rgb;
}

ComposedInput compose(const std::vector<MultiViewFrame>& window,
                      const std::vector<std::vector<std::vector<float>>>& rgb_overlays,
                      const ComposeOptions& options) {
  if (window.empty() || window[0].views.empty()) {
    throw InconsistentViewsError("compose: empty window");
  }
  const std::size_t views = window[0].views.size();
  const std::size_t height = window[0].views[0].camera.height;
  const std::size_t width = window[0].views[0].camera.width;
  for (const MultiViewFrame& frame : window) {
    if (frame.views.size() != views) {
      throw InconsistentViewsError("compose: view count varies across the window");
    }
    for (const ViewFrame& v : frame.views) {
      if (v.camera.height != height || v.camera.width != width) {
        throw InconsistentViewsError("compose: image extents vary across views");
      }
    }
  }
  if (!rgb_overlays.empty() && rgb_overlays.size() != window.size()) {
    throw InconsistentViewsError("compose: overlay count does not match window");
  }

  ComposedInput out;
  out.steps = window.size();
  out.views = views;
  out.channels = options.include_depth ? 4 : 3;
  out.height = height;
  out.width = width;
  out.data.resize(out.steps * views * out.frame_size());

  const std::size_t plane = height * width;
  for (std::size_t s = 0; s < out.steps; ++s) {
    // layout order is fixed by view_id regardless of input order
    std::vector<std::size_t> order(views);
    for (std::size_t i = 0; i < views; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return window[s].views[a].view_id < window[s].views[b].view_id;
    });
    for (std::size_t slot = 0; slot < views; ++slot) {
      const std::size_t src = order[slot];
      const ViewFrame& view = window[s].views[src];
      const std::vector<float>& rgb =
          rgb_overlays.empty() ? view.rgb : rgb_overlays[s][src];
      if (rgb.size() != 3 * plane || view.depth.size() != plane) {
        throw InconsistentViewsError("compose: frame buffer extents mismatch");
      }
      float* dst = out.frame(s, slot);
      std::copy(rgb.begin(), rgb.end(), dst);
      if (options.include_depth) {
        float* dplane = dst + 3 * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          dplane[i] = std::min(1.0f, std::max(0.0f, view.depth[i] / options.d_max));
        }
      }
    }
  }
  return out;
}

Tensor tokenize(const ComposedInput& x, std::size_t patch,
                const TokenizerParams& params, std::size_t step_offset) {
  if (patch == 0 || x.height % patch != 0 || x.width % patch != 0) {
    throw ShapeMismatchError("tokenize: patch must divide image extents");
  }
  const std::size_t rows = x.height / patch;
  const std::size_t cols = x.width / patch;
  const std::size_t per_frame = rows * cols;
  const std::size_t patch_dim = x.channels * patch * patch;
  const std::size_t total = x.steps * x.views * per_frame;
  if (params.weight.shape().size() != 2 || params.weight.shape()[0] != patch_dim) {
    throw ShapeMismatchError("tokenize: weight rows must equal the patch dim " +
                             std::to_string(patch_dim));
  }

  const std::vector<std::size_t> index_map =
      patch_index_map(x.channels, x.height, x.width, patch);

  std::vector<float> patches(total * patch_dim);
  std::vector<std::size_t> step_ids(total), view_ids(total), row_ids(total),
      col_ids(total);
  std::size_t token = 0;
  for (std::size_t s = 0; s < x.steps; ++s) {
    for (std::size_t v = 0; v < x.views; ++v) {
      const float* frame = x.frame(s, v);
      float* dst = patches.data() + token * patch_dim;
      for (std::size_t i = 0; i < index_map.size(); ++i) dst[i] = frame[index_map[i]];
      for (std::size_t t = 0; t < per_frame; ++t) {
        step_ids[token + t] = s + step_offset;
        view_ids[token + t] = v;
        row_ids[token + t] = t / cols;
        col_ids[token + t] = t % cols;
      }
      token += per_frame;
    }
  }

  Tensor patch_matrix(Shape{total, patch_dim}, std::move(patches));
  Tensor embedded = add(matmul(patch_matrix, params.weight), params.bias);
  Tensor pos = add(add(gather_rows(params.pos_step, step_ids),
                       gather_rows(params.pos_view, view_ids)),
                   add(gather_rows(params.pos_row, row_ids),
                       gather_rows(params.pos_col, col_ids)));
  return add(embedded, pos);
}

}  // namespace starry
