#pragma once

#include <cstddef>
#include <vector>

#include "starry/tensor.hpp"

namespace starry {

// Elementwise binary kernels. Shapes must have equal rank and conform per
// axis (equal extents, or extent 1 on the side being broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// y = mul_c * x + add_c, elementwise with scalar coefficients.
Tensor affine(const Tensor& x, float mul_c, float add_c);
inline Tensor scale(const Tensor& x, float c) { return affine(x, c, 0.0f); }

// Batched matrix product: (B..., M, K) @ (B..., K, N) with identical
// leading dims; plain 2-D product when no batch dims are present.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swaps two axes.
Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor clamp_min(const Tensor& x, float floor);

// Normalizes over the last axis with learned gain/bias of that length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

// Stable softmax over the last axis (max subtraction).
Tensor softmax_lastdim(const Tensor& x);

Tensor broadcast_to(const Tensor& x, const Shape& target);

// Row gather over axis 0 of a rank-2 tensor; backward scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices);

// (C, H, W) -> (Hp*Wp, C*p*p) where token index is row-major over the
// patch grid and each row is channel-major patch content. Inverse below.
Tensor patchify(const Tensor& image, std::size_t patch);

// Flat image index for each (token, element) slot of the patchify layout;
// callers extracting patches outside the graph must use this map so their
// ordering agrees with patchify/unpatchify.
std::vector<std::size_t> patch_index_map(std::size_t channels, std::size_t height,
                                         std::size_t width, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch);

// Composites (no dedicated backward; built from kernels).
Tensor square(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace starry
