#include "starry/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace starry {

namespace {

using detail::TensorNode;
using detail::grad_buffer;

bool grads_wanted(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->node()->requires_grad) return true;
  }
  return false;
}

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + " produced a non-finite value");
    }
  }
}

void accum(TensorNode* node, const float* g, std::size_t n) {
  std::vector<float>& buf = grad_buffer(node);
  for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

Shape conform_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeMismatchError(std::string(op) + ": rank mismatch " + shape_str(a) +
                             " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      out[i] = a[i];
    } else if (a[i] == 1 || b[i] == 1) {
      out[i] = std::max(a[i], b[i]);
    } else {
      throw ShapeMismatchError(std::string(op) + ": shapes " + shape_str(a) +
                               " and " + shape_str(b) + " do not conform");
    }
  }
  return out;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// Strides of `in` against the broadcast output shape (0 on broadcast axes).
std::vector<std::size_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s = row_major_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == 1 && out[i] != 1) s[i] = 0;
  }
  return s;
}

// True when `in` broadcasts only over leading axes, so that the offset of
// output element i is simply i % numel(in).
bool leading_broadcast(const Shape& in, const Shape& out) {
  bool still_leading = true;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == out[i]) {
      if (out[i] != 1) still_leading = false;
    } else {
      if (!still_leading) return false;
    }
  }
  return true;
}

template <typename F>
void for_each_bcast(const Shape& out, const Shape& sa_shape, const Shape& sb_shape,
                    F&& fn) {
  const std::size_t n = numel(out);
  const std::vector<std::size_t> so = row_major_strides(out);
  const std::vector<std::size_t> sa = bcast_strides(sa_shape, out);
  const std::vector<std::size_t> sb = bcast_strides(sb_shape, out);
  const std::size_t rank = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, ia = 0, ib = 0;
    for (std::size_t k = 0; k < rank; ++k) {
      std::size_t idx = rem / so[k];
      rem %= so[k];
      ia += idx * sa[k];
      ib += idx * sb[k];
    }
    fn(i, ia, ib);
  }
}

template <typename Fwd>
Tensor binary_ew(const Tensor& a, const Tensor& b, const char* name, Fwd fwd) {
  const Shape out_shape = conform_broadcast(a.shape(), b.shape(), name);
  const std::size_t n = numel(out_shape);
  std::vector<float> out(n);
  const float* pa = a.data();
  const float* pb = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  } else if (a.shape() == out_shape && leading_broadcast(b.shape(), out_shape)) {
    const std::size_t nb = b.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i % nb]);
  } else {
    for_each_bcast(out_shape, a.shape(), b.shape(),
                   [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     out[i] = fwd(pa[ia], pb[ib]);
                   });
  }
  return Tensor(out_shape, std::move(out));
}

// Reduces an output-shaped gradient onto the (possibly broadcast) input
// shape by summing over broadcast axes.
void reduce_grad_to(TensorNode* node, const Shape& out_shape,
                    const std::vector<float>& g) {
  if (node->shape == out_shape) {
    accum(node, g.data(), g.size());
    return;
  }
  std::vector<float>& buf = grad_buffer(node);
  const std::vector<std::size_t> so = row_major_strides(out_shape);
  const std::vector<std::size_t> si = bcast_strides(node->shape, out_shape);
  const std::size_t rank = out_shape.size();
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::size_t rem = i, ii = 0;
    for (std::size_t k = 0; k < rank; ++k) {
      std::size_t idx = rem / so[k];
      rem %= so[k];
      ii += idx * si[k];
    }
    buf[ii] += g[i];
  }
}

// As above but the per-element gradient is g * w (for mul).
void reduce_grad_to_weighted(TensorNode* node, const Shape& out_shape,
                             const std::vector<float>& g, const Shape& w_shape,
                             const float* w) {
  std::vector<float>& buf = grad_buffer(node);
  const std::vector<std::size_t> so = row_major_strides(out_shape);
  const std::vector<std::size_t> si = bcast_strides(node->shape, out_shape);
  const std::vector<std::size_t> sw = bcast_strides(w_shape, out_shape);
  const std::size_t rank = out_shape.size();
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::size_t rem = i, ii = 0, iw = 0;
    for (std::size_t k = 0; k < rank; ++k) {
      std::size_t idx = rem / so[k];
      rem %= so[k];
      ii += idx * si[k];
      iw += idx * sw[k];
    }
    buf[ii] += g[i] * w[iw];
  }
}

// ---- dense 2-D matmul kernels -------------------------------------------

void mm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
           std::size_t n) {
  // c assumed zeroed; ikj order keeps the inner loop contiguous
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(m,n) = a(m,p) * b(n,p)^T
void mm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t p,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * p;
    float* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * p;
      float acc = 0.0f;
      for (std::size_t t = 0; t < p; ++t) acc += arow[t] * brow[t];
      crow[j] += acc;
    }
  }
}

// c(k,n) = a(m,k)^T * b(m,n)
void mm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const float av = arow[t];
      float* crow = c + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor unary_ew(const Tensor& x, const char* name, Fwd fwd, Bwd bwd_factor) {
  const std::size_t n = x.size();
  std::vector<float> out(n);
  const float* px = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  Tensor result(x.shape(), std::move(out));
  check_finite(result, name);
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    auto xdata = x.node_ptr()->data;
    auto rdata = result.node_ptr()->data;
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      const std::vector<float>& g = rn->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * bwd_factor((*xdata)[i], (*rdata)[i]);
      }
    });
  }
  return result;
}

}  // namespace

// ---- binary elementwise ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor result = binary_ew(a, b, "add", [](float x, float y) { return x + y; });
  check_finite(result, "add");
  if (grads_wanted({&a, &b})) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* rn = result.node();
    Shape out_shape = result.shape();
    Tape::record(result.node_ptr(), {a.node_ptr(), b.node_ptr()}, [=]() {
      if (an->requires_grad) reduce_grad_to(an, out_shape, rn->grad);
      if (bn->requires_grad) reduce_grad_to(bn, out_shape, rn->grad);
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor result = binary_ew(a, b, "sub", [](float x, float y) { return x - y; });
  check_finite(result, "sub");
  if (grads_wanted({&a, &b})) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* rn = result.node();
    Shape out_shape = result.shape();
    Tape::record(result.node_ptr(), {a.node_ptr(), b.node_ptr()}, [=]() {
      if (an->requires_grad) reduce_grad_to(an, out_shape, rn->grad);
      if (bn->requires_grad) {
        std::vector<float> neg(rn->grad.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -rn->grad[i];
        reduce_grad_to(bn, out_shape, neg);
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor result = binary_ew(a, b, "mul", [](float x, float y) { return x * y; });
  check_finite(result, "mul");
  if (grads_wanted({&a, &b})) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* rn = result.node();
    Shape out_shape = result.shape();
    auto adata = a.node_ptr()->data;
    auto bdata = b.node_ptr()->data;
    Shape ashape = a.shape();
    Shape bshape = b.shape();
    Tape::record(result.node_ptr(), {a.node_ptr(), b.node_ptr()}, [=]() {
      if (an->requires_grad) {
        reduce_grad_to_weighted(an, out_shape, rn->grad, bshape, bdata->data());
      }
      if (bn->requires_grad) {
        reduce_grad_to_weighted(bn, out_shape, rn->grad, ashape, adata->data());
      }
    });
  }
  return result;
}

Tensor affine(const Tensor& x, float mul_c, float add_c) {
  const std::size_t n = x.size();
  std::vector<float> out(n);
  const float* px = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = mul_c * px[i] + add_c;
  Tensor result(x.shape(), std::move(out));
  check_finite(result, "affine");
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      for (std::size_t i = 0; i < rn->grad.size(); ++i) gx[i] += mul_c * rn->grad[i];
    });
  }
  return result;
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() != sa.size()) {
    throw ShapeMismatchError("matmul: need equal rank >= 2, got " + shape_str(sa) +
                             " and " + shape_str(sb));
  }
  const std::size_t rank = sa.size();
  for (std::size_t i = 0; i + 2 < rank; ++i) {
    if (sa[i] != sb[i]) {
      throw ShapeMismatchError("matmul: batch dims differ, " + shape_str(sa) +
                               " vs " + shape_str(sb));
    }
  }
  const std::size_t m = sa[rank - 2];
  const std::size_t k = sa[rank - 1];
  const std::size_t n = sb[rank - 1];
  if (sb[rank - 2] != k) {
    throw ShapeMismatchError("matmul: inner dims differ, " + shape_str(sa) +
                             " vs " + shape_str(sb));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) batch *= sa[i];

  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(batch * m * n, 0.0f);
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    mm_nn(pa + bi * m * k, pb + bi * k * n, out.data() + bi * m * n, m, k, n);
  }
  Tensor result(out_shape, std::move(out));
  check_finite(result, "matmul");
  if (grads_wanted({&a, &b})) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* rn = result.node();
    auto adata = a.node_ptr()->data;
    auto bdata = b.node_ptr()->data;
    Tape::record(result.node_ptr(), {a.node_ptr(), b.node_ptr()}, [=]() {
      const std::vector<float>& g = rn->grad;
      if (an->requires_grad) {
        std::vector<float>& ga = grad_buffer(an);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          mm_nt(g.data() + bi * m * n, bdata->data() + bi * k * n,
                ga.data() + bi * m * k, m, n, k);
        }
      }
      if (bn->requires_grad) {
        std::vector<float>& gb = grad_buffer(bn);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          mm_tn(adata->data() + bi * m * k, g.data() + bi * m * n,
                gb.data() + bi * k * n, m, k, n);
        }
      }
    });
  }
  return result;
}

// ---- layout ops --------------------------------------------------------------

Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b) {
  const Shape& s = x.shape();
  if (axis_a >= s.size() || axis_b >= s.size()) {
    throw ShapeMismatchError("transpose: axis out of range for " + shape_str(s));
  }
  Shape out_shape = s;
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  const std::vector<std::size_t> si = row_major_strides(s);
  const std::vector<std::size_t> so = row_major_strides(out_shape);
  std::vector<std::size_t> perm_strides(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) perm_strides[i] = si[i];
  std::swap(perm_strides[axis_a], perm_strides[axis_b]);

  const std::size_t n = x.size();
  std::vector<float> out(n);
  const float* px = x.data();
  const std::size_t rank = s.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, ii = 0;
    for (std::size_t k = 0; k < rank; ++k) {
      std::size_t idx = rem / so[k];
      rem %= so[k];
      ii += idx * perm_strides[k];
    }
    out[i] = px[ii];
  }
  Tensor result(out_shape, std::move(out));
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      const std::size_t count = rn->grad.size();
      for (std::size_t i = 0; i < count; ++i) {
        std::size_t rem = i, ii = 0;
        for (std::size_t k = 0; k < rank; ++k) {
          std::size_t idx = rem / so[k];
          rem %= so[k];
          ii += idx * perm_strides[k];
        }
        gx[ii] += rn->grad[i];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ShapeMismatchError("reshape: cannot view " + shape_str(x.shape()) +
                             " as " + shape_str(new_shape));
  }
  Tensor result(new_shape, std::vector<float>(x.values()));
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      accum(xn, rn->grad.data(), rn->grad.size());
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeMismatchError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw ShapeMismatchError("concat: axis out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeMismatchError("concat: rank mismatch");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeMismatchError("concat: non-axis extents differ, " +
                                 shape_str(s) + " vs " + shape_str(first));
      }
    }
    axis_total += s[axis];
  }
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  std::vector<float> out(numel(out_shape));
  std::size_t axis_offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pa = p.shape()[axis];
    const float* src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * axis_total + axis_offset) * inner,
                  src + o * pa * inner, pa * inner * sizeof(float));
    }
    axis_offset += pa;
  }
  Tensor result(out_shape, std::move(out));

  bool wants = false;
  if (Tape::active()) {
    for (const Tensor& p : parts) wants |= p.node()->requires_grad;
  }
  if (wants) {
    std::vector<std::shared_ptr<TensorNode>> parent_ptrs;
    std::vector<std::size_t> axis_dims;
    for (const Tensor& p : parts) {
      parent_ptrs.push_back(p.node_ptr());
      axis_dims.push_back(p.shape()[axis]);
    }
    TensorNode* rn = result.node();
    auto parents_copy = parent_ptrs;
    Tape::record(result.node_ptr(), std::move(parent_ptrs), [=]() {
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < parents_copy.size(); ++pi) {
        TensorNode* pn = parents_copy[pi].get();
        const std::size_t pa = axis_dims[pi];
        if (pn->requires_grad) {
          std::vector<float>& gp = grad_buffer(pn);
          for (std::size_t o = 0; o < outer; ++o) {
            const float* gsrc = rn->grad.data() + (o * axis_total + offset) * inner;
            float* gdst = gp.data() + o * pa * inner;
            for (std::size_t t = 0; t < pa * inner; ++t) gdst[t] += gsrc[t];
          }
        }
        offset += pa;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + len > s[axis]) {
    throw ShapeMismatchError("slice: [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<float> out(numel(out_shape));
  const float* px = x.data();
  const std::size_t dim = s[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner, px + (o * dim + start) * inner,
                len * inner * sizeof(float));
  }
  Tensor result(out_shape, std::move(out));
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      for (std::size_t o = 0; o < outer; ++o) {
        const float* gsrc = rn->grad.data() + o * len * inner;
        float* gdst = gx.data() + (o * dim + start) * inner;
        for (std::size_t t = 0; t < len * inner; ++t) gdst[t] += gsrc[t];
      }
    });
  }
  return result;
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor result = Tensor::scalar(static_cast<float>(acc));
  check_finite(result, "sum");
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      const float g = rn->grad[0];
      for (float& v : gx) v += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ShapeMismatchError("mean of empty tensor");
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor result = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  check_finite(result, "mean");
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      const float g = rn->grad[0] / static_cast<float>(n);
      for (float& v : gx) v += g;
    });
  }
  return result;
}

namespace {

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool keepdim, bool take_mean,
                   const char* name) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw ShapeMismatchError(std::string(name) + ": axis out of range for " +
                             shape_str(s));
  }
  const std::size_t dim = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[i]);
    }
  }

  std::vector<float> out(outer * inner);
  std::vector<double> acc(inner);
  const float* px = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t d = 0; d < dim; ++d) {
      const float* row = px + (o * dim + d) * inner;
      for (std::size_t i = 0; i < inner; ++i) acc[i] += row[i];
    }
    float* orow = out.data() + o * inner;
    const double denom = take_mean ? static_cast<double>(dim) : 1.0;
    for (std::size_t i = 0; i < inner; ++i) {
      orow[i] = static_cast<float>(acc[i] / denom);
    }
  }
  Tensor result(out_shape, std::move(out));
  check_finite(result, name);
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    const float scale_back = take_mean ? 1.0f / static_cast<float>(dim) : 1.0f;
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      for (std::size_t o = 0; o < outer; ++o) {
        const float* grow = rn->grad.data() + o * inner;
        for (std::size_t d = 0; d < dim; ++d) {
          float* xrow = gx.data() + (o * dim + d) * inner;
          for (std::size_t i = 0; i < inner; ++i) xrow[i] += scale_back * grow[i];
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, false, "sum");
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, true, "mean");
}

// ---- unary elementwise ---------------------------------------------------------

Tensor exp(const Tensor& x) {
  return unary_ew(
      x, "exp", [](float v) { return std::exp(v); },
      [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_ew(
      x, "log", [](float v) { return std::log(v); },
      [](float v, float) { return 1.0f / v; });
}

Tensor relu(const Tensor& x) {
  return unary_ew(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  return unary_ew(
      x, "gelu",
      [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [](float v, float) {
        const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        return cdf + v * pdf;
      });
}

Tensor softplus(const Tensor& x) {
  return unary_ew(
      x, "softplus",
      [](float v) {
        if (v > 20.0f) return v;
        if (v < -20.0f) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](float v, float) { return 1.0f / (1.0f + std::exp(-v)); });
}

Tensor clamp_min(const Tensor& x, float floor) {
  return unary_ew(
      x, "clamp_min", [floor](float v) { return v > floor ? v : floor; },
      [floor](float v, float) { return v > floor ? 1.0f : 0.0f; });
}

// ---- normalization -------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeMismatchError("layer_norm: scalar input");
  const std::size_t dim = s.back();
  if (gamma.shape() != Shape{dim} || beta.shape() != Shape{dim}) {
    throw ShapeMismatchError("layer_norm: gain/bias must have shape (" +
                             std::to_string(dim) + ")");
  }
  const std::size_t rows = x.size() / dim;
  std::vector<float> out(x.size());
  auto xhat = std::make_shared<std::vector<float>>(x.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = px + r * dim;
    double m = 0.0;
    for (std::size_t i = 0; i < dim; ++i) m += row[i];
    m /= static_cast<double>(dim);
    double var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = row[i] - m;
      var += d * d;
    }
    var /= static_cast<double>(dim);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = inv;
    float* orow = out.data() + r * dim;
    float* hrow = xhat->data() + r * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      const float h = (row[i] - static_cast<float>(m)) * inv;
      hrow[i] = h;
      orow[i] = h * pg[i] + pb[i];
    }
  }
  Tensor result(s, std::move(out));
  check_finite(result, "layer_norm");
  if (grads_wanted({&x, &gamma, &beta})) {
    TensorNode* xn = x.node();
    TensorNode* gn = gamma.node();
    TensorNode* bn = beta.node();
    TensorNode* rn = result.node();
    auto gdata = gamma.node_ptr()->data;
    Tape::record(result.node_ptr(),
                 {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()}, [=]() {
                   const std::vector<float>& g = rn->grad;
                   const float* pgv = gdata->data();
                   if (gn->requires_grad) {
                     std::vector<float>& gg = grad_buffer(gn);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const float* grow = g.data() + r * dim;
                       const float* hrow = xhat->data() + r * dim;
                       for (std::size_t i = 0; i < dim; ++i) {
                         gg[i] += grow[i] * hrow[i];
                       }
                     }
                   }
                   if (bn->requires_grad) {
                     std::vector<float>& gb = grad_buffer(bn);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const float* grow = g.data() + r * dim;
                       for (std::size_t i = 0; i < dim; ++i) gb[i] += grow[i];
                     }
                   }
                   if (xn->requires_grad) {
                     std::vector<float>& gx = grad_buffer(xn);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const float* grow = g.data() + r * dim;
                       const float* hrow = xhat->data() + r * dim;
                       float* gxrow = gx.data() + r * dim;
                       double sum_dh = 0.0, sum_dh_h = 0.0;
                       for (std::size_t i = 0; i < dim; ++i) {
                         const float dh = grow[i] * pgv[i];
                         sum_dh += dh;
                         sum_dh_h += static_cast<double>(dh) * hrow[i];
                       }
                       const float mean_dh =
                           static_cast<float>(sum_dh / static_cast<double>(dim));
                       const float mean_dh_h =
                           static_cast<float>(sum_dh_h / static_cast<double>(dim));
                       const float inv = (*inv_std)[r];
                       for (std::size_t i = 0; i < dim; ++i) {
                         const float dh = grow[i] * pgv[i];
                         gxrow[i] += inv * (dh - mean_dh - hrow[i] * mean_dh_h);
                       }
                     }
                   }
                 });
  }
  return result;
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) {
    throw ShapeMismatchError("softmax_lastdim: empty last axis");
  }
  const std::size_t dim = s.back();
  const std::size_t rows = x.size() / dim;
  std::vector<float> out(x.size());
  const float* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = px + r * dim;
    float* orow = out.data() + r * dim;
    float m = row[0];
    for (std::size_t i = 1; i < dim; ++i) m = std::max(m, row[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const float e = std::exp(row[i] - m);
      orow[i] = e;
      total += e;
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t i = 0; i < dim; ++i) orow[i] *= inv;
  }
  Tensor result(s, std::move(out));
  check_finite(result, "softmax_lastdim");
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    auto ydata = result.node_ptr()->data;
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      const std::vector<float>& g = rn->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const float* grow = g.data() + r * dim;
        const float* yrow = ydata->data() + r * dim;
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
          dot += static_cast<double>(grow[i]) * yrow[i];
        }
        float* gxrow = gx.data() + r * dim;
        const float dotf = static_cast<float>(dot);
        for (std::size_t i = 0; i < dim; ++i) {
          gxrow[i] += yrow[i] * (grow[i] - dotf);
        }
      }
    });
  }
  return result;
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  const Shape& s = x.shape();
  if (s.size() != target.size()) {
    throw ShapeMismatchError("broadcast_to: rank mismatch " + shape_str(s) +
                             " vs " + shape_str(target));
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != target[i] && s[i] != 1) {
      throw ShapeMismatchError("broadcast_to: " + shape_str(s) +
                               " cannot broadcast to " + shape_str(target));
    }
  }
  const std::size_t n = numel(target);
  std::vector<float> out(n);
  const float* px = x.data();
  const std::vector<std::size_t> so = row_major_strides(target);
  const std::vector<std::size_t> si = bcast_strides(s, target);
  const std::size_t rank = target.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, ii = 0;
    for (std::size_t k = 0; k < rank; ++k) {
      std::size_t idx = rem / so[k];
      rem %= so[k];
      ii += idx * si[k];
    }
    out[i] = px[ii];
  }
  Tensor result(target, std::move(out));
  if (grads_wanted({&x})) {
    TensorNode* xn = x.node();
    TensorNode* rn = result.node();
    Shape target_copy = target;
    Tape::record(result.node_ptr(), {x.node_ptr()}, [=]() {
      reduce_grad_to(xn, target_copy, rn->grad);
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
  const Shape& s = table.shape();
  if (s.size() != 2) {
    throw ShapeMismatchError("gather_rows: table must be rank 2, got " +
                             shape_str(s));
  }
  const std::size_t rows = s[0];
  const std::size_t dim = s[1];
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw ShapeMismatchError("gather_rows: index " + std::to_string(idx) +
                               " out of range " + std::to_string(rows));
    }
  }
  std::vector<float> out(indices.size() * dim);
  const float* pt = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(out.data() + i * dim, pt + indices[i] * dim, dim * sizeof(float));
  }
  Tensor result(Shape{indices.size(), dim}, std::move(out));
  if (grads_wanted({&table})) {
    TensorNode* tn = table.node();
    TensorNode* rn = result.node();
    auto idx_copy = indices;
    Tape::record(result.node_ptr(), {table.node_ptr()}, [=]() {
      std::vector<float>& gt = grad_buffer(tn);
      for (std::size_t i = 0; i < idx_copy.size(); ++i) {
        const float* gsrc = rn->grad.data() + i * dim;
        float* gdst = gt.data() + idx_copy[i] * dim;
        for (std::size_t d = 0; d < dim; ++d) gdst[d] += gsrc[d];
      }
    });
  }
  return result;
}

// ---- patch layout ---------------------------------------------------------------

namespace {

void patchify_indices(std::size_t channels, std::size_t height, std::size_t width,
                      std::size_t patch, std::vector<std::size_t>& image_index) {
  const std::size_t hp = height / patch;
  const std::size_t wp = width / patch;
  image_index.resize(hp * wp * channels * patch * patch);
  std::size_t t = 0;
  for (std::size_t pr = 0; pr < hp; ++pr) {
    for (std::size_t pc = 0; pc < wp; ++pc) {
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < patch; ++i) {
          for (std::size_t j = 0; j < patch; ++j) {
            image_index[t++] =
                c * height * width + (pr * patch + i) * width + pc * patch + j;
          }
        }
      }
    }
  }
}

}  // namespace

std::vector<std::size_t> patch_index_map(std::size_t channels, std::size_t height,
                                         std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeMismatchError("patch_index_map: patch must divide image extents");
  }
  std::vector<std::size_t> map;
  patchify_indices(channels, height, width, patch, map);
  return map;
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  const Shape& s = image.shape();
  if (s.size() != 3) {
    throw ShapeMismatchError("patchify: expected (C, H, W), got " + shape_str(s));
  }
  const std::size_t channels = s[0], height = s[1], width = s[2];
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeMismatchError("patchify: patch " + std::to_string(patch) +
                             " must divide " + shape_str(s));
  }
  std::vector<std::size_t> image_index;
  patchify_indices(channels, height, width, patch, image_index);
  std::vector<float> out(image_index.size());
  const float* px = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[image_index[i]];
  const std::size_t tokens = (height / patch) * (width / patch);
  Tensor result(Shape{tokens, channels * patch * patch}, std::move(out));
  if (grads_wanted({&image})) {
    TensorNode* xn = image.node();
    TensorNode* rn = result.node();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(image_index));
    Tape::record(result.node_ptr(), {image.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      for (std::size_t i = 0; i < rn->grad.size(); ++i) {
        gx[(*idx)[i]] += rn->grad[i];
      }
    });
  }
  return result;
}

Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch) {
  const Shape& s = tokens.shape();
  const std::size_t expect_tokens = (height / patch) * (width / patch);
  if (s.size() != 2 || s[0] != expect_tokens || s[1] != channels * patch * patch ||
      height % patch != 0 || width % patch != 0) {
    throw ShapeMismatchError("unpatchify: tokens " + shape_str(s) +
                             " do not match target layout");
  }
  std::vector<std::size_t> image_index;
  patchify_indices(channels, height, width, patch, image_index);
  std::vector<float> out(channels * height * width);
  const float* pt = tokens.data();
  for (std::size_t i = 0; i < image_index.size(); ++i) out[image_index[i]] = pt[i];
  Tensor result(Shape{channels, height, width}, std::move(out));
  if (grads_wanted({&tokens})) {
    TensorNode* xn = tokens.node();
    TensorNode* rn = result.node();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(image_index));
    Tape::record(result.node_ptr(), {tokens.node_ptr()}, [=]() {
      std::vector<float>& gx = grad_buffer(xn);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += rn->grad[(*idx)[i]];
      }
    });
  }
  return result;
}

// ---- composites -------------------------------------------------------------------

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

}  // namespace starry
