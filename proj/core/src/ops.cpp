#include "qvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "qvit/gemm.hpp"

namespace qvit {
namespace {

// Maps each output element of a broadcast to the flat index of each operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      s[i] = p[i] == 1 ? 0 : acc;
      acc *= p[i];
    }
    return s;
  };
  const auto sa = strides(pa);
  const auto sb = strides(pb);
  const std::size_t n = shape_numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < plan.out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

// f(a, b) forward; da(a, b, g) and db(a, b, g) give the local gradients.
template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = shape_numel(plan->out);
  std::vector<float> out(n);
  if (plan->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[plan->a_index[i]], bv[plan->b_index[i]]);
  }
  return make_op(name, plan->out, std::move(out), {a, b},
                 [a, b, plan, da, db](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   const auto av = a.data();
                   const auto bv = b.data();
                   const std::size_t n = g.size();
                   auto ai = [&](std::size_t i) { return plan->same ? i : plan->a_index[i]; };
                   auto bi = [&](std::size_t i) { return plan->same ? i : plan->b_index[i]; };
                   if (ctx.needs_grad(0)) {
                     auto ga = ctx.grad_input(0);
                     for (std::size_t i = 0; i < n; ++i)
                       ga[ai(i)] += da(av[ai(i)], bv[bi(i)], g[i]);
                   }
                   if (ctx.needs_grad(1)) {
                     auto gb = ctx.grad_input(1);
                     for (std::size_t i = 0; i < n; ++i)
                       gb[bi(i)] += db(av[ai(i)], bv[bi(i)], g[i]);
                   }
                 });
}

// y = f(x) with dy/dx = df(x, y).
template <typename F, typename DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<float> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op(name, x.shape(), std::move(out), {x}, [x, df](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    const auto y = ctx.output();
    const auto xv = x.data();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
  });
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.dim(-1) == 0) {
    throw DimensionError(std::string(op) + ": empty last dimension");
  }
  return x.dim(-1);
}

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(a);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float, float, float g) { return g; }, [](float, float, float g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float, float, float g) { return g; }, [](float, float, float g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float, float y, float g) { return g * y; }, [](float x, float, float g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / y; },
      [](float, float y, float g) { return g / y; },
      [](float x, float y, float g) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& x, float s) {
  return unary_op(
      "add_scalar", x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& x, float s) {
  return unary_op(
      "mul_scalar", x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0f); }

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](float v) { return std::sqrt(v); },
      [](float, float y) { return 0.5f / y; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op(
      "gelu", x,
      [](float v) {
        const double d = v;
        return static_cast<float>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
      },
      [](float v, float) {
        const double d = v;
        const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
        return static_cast<float>(cdf + d * pdf);
      });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op("sum", Shape{1}, {static_cast<float>(acc)}, {x}, [](BackwardContext& ctx) {
    const float g = ctx.grad_output()[0];
    for (auto& v : ctx.grad_input(0)) v += g;
  });
}

Tensor mean(const Tensor& x) {
  const auto n = x.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op("mean", Shape{1}, {static_cast<float>(acc / static_cast<double>(n))}, {x},
                 [n](BackwardContext& ctx) {
                   const float g = ctx.grad_output()[0] / static_cast<float>(n);
                   for (auto& v : ctx.grad_input(0)) v += g;
                 });
}

Tensor variance(const Tensor& x) {
  const auto xv = x.data();
  const auto n = xv.size();
  if (n == 0) throw DimensionError("variance of empty tensor");
  double mu = 0.0;
  for (float v : xv) mu += v;
  mu /= static_cast<double>(n);
  double ss = 0.0;
  for (float v : xv) ss += (v - mu) * (v - mu);
  return make_op("variance", Shape{1}, {static_cast<float>(ss / static_cast<double>(n))}, {x},
                 [x, mu, n](BackwardContext& ctx) {
                   const double g = ctx.grad_output()[0];
                   const auto xv = x.data();
                   auto gx = ctx.grad_input(0);
                   const double k = 2.0 * g / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i) gx[i] += static_cast<float>(k * (xv[i] - mu));
                 });
}

Tensor sum_lastdim(const Tensor& x) {
  const std::size_t d = last_dim(x, "sum_lastdim");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
    out[r] = static_cast<float>(acc);
  }
  return make_op("sum_lastdim", drop_last(x.shape()), std::move(out), {x},
                 [d, rows](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   auto gx = ctx.grad_input(0);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r];
                 });
}

Tensor mean_lastdim(const Tensor& x) {
  const std::size_t d = last_dim(x, "mean_lastdim");
  return mul_scalar(sum_lastdim(x), 1.0f / static_cast<float>(d));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_op("reshape", std::move(shape), x.to_vector(), {x}, [](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw DimensionError("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  // src[flat_out] = flat input index.
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*src)[flat] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += in_strides[axes[d]];
      if (idx[d] < out[d]) break;
      off -= in_strides[axes[d]] * idx[d];
      idx[d] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = xv[(*src)[i]];
  return make_op("permute", std::move(out), std::move(values), {x}, [src](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    auto gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out = first;
  out[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) throw DimensionError("concat: shape mismatch");
    }
    out[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::size_t row = out[ax] * inner;
  std::vector<float> values(shape_numel(out));
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  values.begin() + static_cast<std::ptrdiff_t>(o * row + col));
    col += widths[k];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat", out, std::move(values), inputs,
                 [widths, outer, row](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   std::size_t col = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     if (ctx.needs_grad(k)) {
                       auto gk = ctx.grad_input(k);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < widths[k]; ++j)
                           gk[o * widths[k] + j] += g[o * row + col + j];
                     }
                     col += widths[k];
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "slice");
  if (start + length > in[ax]) throw DimensionError("slice out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  Shape out = in;
  out[ax] = length;
  const std::size_t in_row = in[ax] * inner;
  const std::size_t out_row = length * inner;
  const std::size_t offset = start * inner;
  const auto xv = x.data();
  std::vector<float> values(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * in_row + offset), out_row,
                values.begin() + static_cast<std::ptrdiff_t>(o * out_row));
  return make_op("slice", out, std::move(values), {x},
                 [outer, in_row, out_row, offset](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   auto gx = ctx.grad_input(0);
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t j = 0; j < out_row; ++j)
                       gx[o * in_row + offset + j] += g[o * out_row + j];
                 });
}

namespace {

struct BatchedDims {
  std::size_t batch = 1;
  std::size_t m = 0, k = 0, n = 0;
  bool shared_b = false;
  Shape out;
};

// Shape analysis for [...,m,k] x [...,k,n] (or [...,n,k] when b_transposed).
BatchedDims batched_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError(std::string(op) + " needs rank >= 2");
  BatchedDims d;
  d.m = a.dim(-2);
  d.k = a.dim(-1);
  const std::size_t bk = b_transposed ? b.dim(-1) : b.dim(-2);
  d.n = b_transposed ? b.dim(-2) : b.dim(-1);
  if (bk != d.k) {
    throw DimensionError(std::string(op) + ": inner dimensions differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  d.shared_b = lead_b.empty() && !lead_a.empty();
  if (!d.shared_b && lead_a != lead_b) {
    throw DimensionError(std::string(op) + ": batch dimensions differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  d.batch = shape_numel(lead_a);
  d.out = lead_a;
  d.out.push_back(d.m);
  d.out.push_back(d.n);
  return d;
}

Tensor batched_product(const char* name, const Tensor& a, const Tensor& b, bool b_transposed) {
  const BatchedDims d = batched_dims(a, b, b_transposed, name);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<float> out(d.batch * d.m * d.n);
  const std::size_t sa = d.m * d.k, sb = d.shared_b ? 0 : d.k * d.n, sc = d.m * d.n;
  for (std::size_t i = 0; i < d.batch; ++i) {
    kernels::gemm(false, b_transposed, d.m, d.n, d.k, av.data() + i * sa, bv.data() + i * sb,
                  out.data() + i * sc);
  }
  return make_op(name, d.out, std::move(out), {a, b}, [a, b, d, b_transposed](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t sa = d.m * d.k, sb = d.shared_b ? 0 : d.k * d.n, sc = d.m * d.n;
    if (ctx.needs_grad(0)) {
      auto ga = ctx.grad_input(0);
      for (std::size_t i = 0; i < d.batch; ++i) {
        // dA = dC . B^T  (or dC . B when b is already stored transposed)
        kernels::gemm(false, !b_transposed, d.m, d.k, d.n, g.data() + i * sc, bv.data() + i * sb,
                      ga.data() + i * sa, true);
      }
    }
    if (ctx.needs_grad(1)) {
      auto gb = ctx.grad_input(1);
      for (std::size_t i = 0; i < d.batch; ++i) {
        if (b_transposed) {
          // dB[n,k] = dC^T . A
          kernels::gemm(true, false, d.n, d.k, d.m, g.data() + i * sc, av.data() + i * sa,
                        gb.data() + i * sb, true);
        } else {
          // dB[k,n] = A^T . dC
          kernels::gemm(true, false, d.k, d.n, d.m, av.data() + i * sa, g.data() + i * sc,
                        gb.data() + i * sb, true);
        }
      }
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return batched_product("matmul", a, b, false); }

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  return batched_product("matmul_nt", a, b, true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be [out, in]");
  const std::size_t in = w.dim(1), out_f = w.dim(0);
  if (x.rank() == 0 || x.dim(-1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw DimensionError("linear: bias must be [out]");
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<float> out(rows * out_f);
  kernels::gemm(false, true, rows, out_f, in, x.data().data(), w.data().data(), out.data());
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_f; ++j) out[r * out_f + j] += bv[j];
  }
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_op("linear", std::move(out_shape), std::move(out), std::move(inputs),
                 [x, w, rows, in, out_f](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   if (ctx.needs_grad(0)) {
                     kernels::gemm(false, false, rows, in, out_f, g.data(), w.data().data(),
                                   ctx.grad_input(0).data(), true);
                   }
                   if (ctx.needs_grad(1)) {
                     kernels::gemm(true, false, out_f, in, rows, g.data(), x.data().data(),
                                   ctx.grad_input(1).data(), true);
                   }
                   if (ctx.input_count() > 2 && ctx.needs_grad(2)) {
                     auto gb = ctx.grad_input(2);
                     for (std::size_t j = 0; j < out_f; ++j) {
                       double acc = 0.0;
                       for (std::size_t r = 0; r < rows; ++r) acc += g[r * out_f + j];
                       gb[j] += static_cast<float>(acc);
                     }
                   }
                 });
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t d = last_dim(x, "softmax_lastdim");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * d;
    const float mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / z);
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [d, rows](BackwardContext& ctx) {
    const auto g = ctx.grad_output();
    const auto y = ctx.output();
    auto gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        gx[r * d + j] += static_cast<float>(y[r * d + j] * (g[r * d + j] - dot));
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
  }
  if (eps < 0.0f) throw ContractError("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    const double rs = denom > 0.0 ? 1.0 / denom : 0.0;
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = static_cast<float>(h);
      out[r * d + j] = static_cast<float>(h * gv[j] + bv[j]);
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                 [gain, xhat, rstd, d, rows](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   const auto gv = gain.data();
                   const auto& h = *xhat;
                   if (ctx.needs_grad(0)) {
                     auto gx = ctx.grad_input(0);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dh = static_cast<double>(g[r * d + j]) * gv[j];
                         m1 += dh;
                         m2 += dh * h[r * d + j];
                       }
                       m1 /= static_cast<double>(d);
                       m2 /= static_cast<double>(d);
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dh = static_cast<double>(g[r * d + j]) * gv[j];
                         gx[r * d + j] +=
                             static_cast<float>((*rstd)[r] * (dh - m1 - h[r * d + j] * m2));
                       }
                     }
                   }
                   if (ctx.needs_grad(1)) {
                     auto gg = ctx.grad_input(1);
                     for (std::size_t j = 0; j < d; ++j) {
                       double acc = 0.0;
                       for (std::size_t r = 0; r < rows; ++r)
                         acc += static_cast<double>(g[r * d + j]) * h[r * d + j];
                       gg[j] += static_cast<float>(acc);
                     }
                   }
                   if (ctx.needs_grad(2)) {
                     auto gb = ctx.grad_input(2);
                     for (std::size_t j = 0; j < d; ++j) {
                       double acc = 0.0;
                       for (std::size_t r = 0; r < rows; ++r) acc += g[r * d + j];
                       gb[j] += static_cast<float>(acc);
                     }
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B, C]");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw DimensionError("cross_entropy: label count != batch");
  if (classes == 0) throw DimensionError("cross_entropy: zero classes");
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(batch * classes);
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const float* row = lv.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - lse);
    total += lse - row[y];
  }
  const double loss = total / static_cast<double>(batch);
  return make_op("cross_entropy", Shape{1}, {static_cast<float>(loss)}, {logits},
                 [probs, label_copy, batch, classes](BackwardContext& ctx) {
                   const double g = ctx.grad_output()[0] / static_cast<double>(batch);
                   auto gl = ctx.grad_input(0);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t c = 0; c < classes; ++c) {
                       double p = (*probs)[b * classes + c];
                       if (static_cast<int>(c) == (*label_copy)[b]) p -= 1.0;
                       gl[b * classes + c] += static_cast<float>(g * p);
                     }
                   }
                 });
}

Tensor l2_normalize_lastdim(const Tensor& x) {
  const std::size_t d = last_dim(x, "l2_normalize_lastdim");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<float> out(x.numel(), 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
    const double nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    if (nrm > 0.0)
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>(xv[r * d + j] / nrm);
  }
  return make_op("l2_normalize", x.shape(), std::move(out), {x},
                 [norms, d, rows](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   const auto y = ctx.output();
                   auto gx = ctx.grad_input(0);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double nrm = (*norms)[r];
                     if (nrm == 0.0) continue;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j)
                       dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
                     for (std::size_t j = 0; j < d; ++j)
                       gx[r * d + j] += static_cast<float>((g[r * d + j] - y[r * d + j] * dot) / nrm);
                   }
                 });
}

Tensor frobenius_norm_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("frobenius_norm_last2 needs rank >= 2");
  const std::size_t block = x.dim(-1) * x.dim(-2);
  const std::size_t count = block == 0 ? 0 : x.numel() / block;
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  if (out_shape.empty()) out_shape = Shape{1};
  const auto xv = x.data();
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < block; ++j)
      ss += static_cast<double>(xv[i * block + j]) * xv[i * block + j];
    out[i] = static_cast<float>(std::sqrt(ss));
  }
  return make_op("frobenius_norm", std::move(out_shape), std::move(out), {x},
                 [x, block, count](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   const auto y = ctx.output();
                   const auto xv = x.data();
                   auto gx = ctx.grad_input(0);
                   for (std::size_t i = 0; i < count; ++i) {
                     if (y[i] == 0.0f) continue;
                     const double k = static_cast<double>(g[i]) / y[i];
                     for (std::size_t j = 0; j < block; ++j)
                       gx[i * block + j] += static_cast<float>(k * xv[i * block + j]);
                   }
                 });
}

}  // namespace qvit
