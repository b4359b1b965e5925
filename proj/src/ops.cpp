#include "imhsa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace imhsa {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  require(a.dtype() == b.dtype(), std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) +
                                      " and " + dtype_name(b.dtype()));
}

void require_nonempty(const Tensor& a, const char* op) {
  require(!a.empty(), std::string(op) + ": empty tensor");
}

/// Validates, instruments and returns an op result.
Tensor finish(Tensor&& out, Meter* meter, std::uint64_t flops, const char* op) {
  if (!out.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
  if (meter) {
    meter->add_flops(flops);
    out.track(meter);
  }
  return std::move(out);
}

std::size_t leading(const Shape& s, std::size_t trailing_dims) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing_dims < s.size(); ++i) n *= s[i];
  return n;
}

// C[m x n] = A[m x k] * B[k x n]; C must be zeroed. Every output element sums
// its k products in ascending order, independent of how rows are blocked, so
// results are bit-reproducible for any batch composition.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kColBlock = 2048;
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t j1 = std::min(n, j0 + kColBlock);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* c0 = c + i * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      const T* ar = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = ar[p];
        const T a1 = ar[k + p];
        const T a2 = ar[2 * k + p];
        const T a3 = ar[3 * k + p];
        const T* br = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) {
          const T bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* c0 = c + i * n;
      const T* ar = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T a0 = ar[p];
        const T* br = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) c0[j] += a0 * br[j];
      }
    }
  }
}

struct MatmulDims {
  std::size_t batch, m, k, n;
  bool shared_b;
  Shape out_shape;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
  require_same_dtype(a, b, op);
  require(a.rank() >= 2 && b.rank() >= 2, std::string(op) + ": operands must have rank >= 2");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t bk = b_transposed ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = b_transposed ? bs[bs.size() - 2] : bs.back();
  require(k == bk, std::string(op) + ": inner extents differ " + shape_str(as) + " vs " + shape_str(bs));
  const bool shared = b.rank() == 2;
  if (!shared) {
    require(b.rank() == a.rank() &&
                std::equal(as.begin(), as.end() - 2, bs.begin()),
            std::string(op) + ": batch extents differ " + shape_str(as) + " vs " + shape_str(bs));
  }
  Shape out(as.begin(), as.end() - 2);
  out.push_back(m);
  out.push_back(n);
  return {leading(as, 2), m, k, n, shared, std::move(out)};
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

template <typename T>
void softmax_rows(std::span<T> x, std::size_t n) {
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x.data() + r * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
}

template <typename T>
void head_mix_kernel(std::span<const T> w, std::span<const T> in, std::span<T> out, std::size_t batch,
                     std::size_t heads, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = in.data() + b * heads * plane;
    T* dst = out.data() + b * heads * plane;
    for (std::size_t i = 0; i < heads; ++i) {
      T* o = dst + i * plane;
      std::fill(o, o + plane, T(0));
      for (std::size_t j = 0; j < heads; ++j) {
        const T wij = w[i * heads + j];
        const T* s = src + j * plane;
        for (std::size_t e = 0; e < plane; ++e) o[e] += wij * s[e];
      }
    }
  }
}

void check_head_mix(const Tensor& w, const Tensor& stack) {
  require_same_dtype(w, stack, "head_mix");
  require(stack.rank() >= 3, "head_mix: stack must have rank >= 3, got " + shape_str(stack.shape()));
  const std::size_t h = stack.extent(-3);
  require(w.rank() == 2 && w.extent(0) == h && w.extent(1) == h,
          "head_mix: weight " + shape_str(w.shape()) + " does not match " + std::to_string(h) + " heads");
}

template <typename T, typename F>
Tensor elementwise(const Tensor& a, const Tensor& b, const char* op, Meter* meter, F f) {
  require_same_dtype(a, b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor out(a.shape(), a.dtype());
  auto x = a.data<T>();
  auto y = b.data<T>();
  auto o = out.data<T>();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return finish(std::move(out), meter, o.size(), op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Meter* meter) {
  const auto d = matmul_dims(a, b, false, "matmul");
  Tensor out(d.out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* ap = a.data<T>().data();
    const T* bp = b.data<T>().data();
    T* cp = out.data<T>().data();
    for (std::size_t i = 0; i < d.batch; ++i) {
      gemm_nn(ap + i * d.m * d.k, d.shared_b ? bp : bp + i * d.k * d.n, cp + i * d.m * d.n, d.m, d.k, d.n);
    }
  });
  return finish(std::move(out), meter, 2ULL * d.batch * d.m * d.k * d.n, "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, Meter* meter) {
  const auto d = matmul_dims(a, b, true, "matmul_nt");
  Tensor out(d.out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* ap = a.data<T>().data();
    const T* bp = b.data<T>().data();
    T* cp = out.data<T>().data();
    // Kernel workspace, not an op output: holds one transposed right operand.
    std::vector<T> bt(d.k * d.n);
    for (std::size_t i = 0; i < d.batch; ++i) {
      if (!d.shared_b || i == 0) transpose_into(d.shared_b ? bp : bp + i * d.n * d.k, bt.data(), d.n, d.k);
      gemm_nn(ap + i * d.m * d.k, bt.data(), cp + i * d.m * d.n, d.m, d.k, d.n);
    }
  });
  return finish(std::move(out), meter, 2ULL * d.batch * d.m * d.k * d.n, "matmul_nt");
}

Tensor softmax_lastdim(const Tensor& x, Meter* meter) {
  Tensor copy(x);
  if (meter) copy.track(meter);
  return softmax_lastdim(std::move(copy), meter);
}

Tensor softmax_lastdim(Tensor&& x, Meter* meter) {
  require(!x.empty() && x.extent(-1) >= 1, "softmax_lastdim: empty last dimension");
  const std::size_t n = x.extent(-1);
  dispatch(x.dtype(), [&]<typename T>() { softmax_rows(x.data<T>(), n); });
  return finish(std::move(x), meter, 5ULL * x.size(), "softmax_lastdim");
}

namespace {

Tensor pool_grid(const Tensor& in, std::size_t batch, std::size_t hg, std::size_t wg, std::size_t d,
                 std::size_t out_h, std::size_t out_w, Shape out_shape, Meter* meter) {
  require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool2d: zero output extent");
  require(out_h <= hg && out_w <= wg, "adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                                          std::to_string(out_w) + " exceeds grid " + std::to_string(hg) +
                                          "x" + std::to_string(wg));
  Tensor out(std::move(out_shape), in.dtype());
  dispatch(in.dtype(), [&]<typename T>() {
    auto src_all = in.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = src_all.data() + b * hg * wg * d;
      T* dst = o.data() + b * out_h * out_w * d;
      for (std::size_t i = 0; i < out_h; ++i) {
        const std::size_t r0 = i * hg / out_h;
        const std::size_t r1 = (i + 1) * hg / out_h;
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t c0 = j * wg / out_w;
          const std::size_t c1 = (j + 1) * wg / out_w;
          T* cell = dst + (i * out_w + j) * d;
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t c = c0; c < c1; ++c) {
              const T* s = src + (r * wg + c) * d;
              for (std::size_t e = 0; e < d; ++e) cell[e] += s[e];
            }
          }
          const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
          for (std::size_t e = 0; e < d; ++e) cell[e] *= inv;
        }
      }
    }
  });
  return finish(std::move(out), meter, in.size() + out.size(), "adaptive_avg_pool2d");
}

}  // namespace

Tensor adaptive_avg_pool2d(const Tensor& grid, std::size_t out_h, std::size_t out_w, Meter* meter) {
  require(grid.rank() >= 3, "adaptive_avg_pool2d: grid must be [..., H, W, d], got " + shape_str(grid.shape()));
  Shape os(grid.shape().begin(), grid.shape().end() - 3);
  os.insert(os.end(), {out_h, out_w, grid.extent(-1)});
  return pool_grid(grid, leading(grid.shape(), 3), grid.extent(-3), grid.extent(-2), grid.extent(-1), out_h,
                   out_w, std::move(os), meter);
}

Tensor adaptive_avg_pool_tokens(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w,
                                std::size_t out_h, std::size_t out_w, Meter* meter) {
  require(tokens.rank() >= 2, "adaptive_avg_pool_tokens: tokens must be [..., N, d]");
  require(grid_h * grid_w == tokens.extent(-2),
          "adaptive_avg_pool_tokens: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
              " does not match " + std::to_string(tokens.extent(-2)) + " tokens");
  Shape os(tokens.shape().begin(), tokens.shape().end() - 2);
  os.insert(os.end(), {out_h * out_w, tokens.extent(-1)});
  return pool_grid(tokens, leading(tokens.shape(), 2), grid_h, grid_w, tokens.extent(-1), out_h, out_w,
                   std::move(os), meter);
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, Meter* meter) {
  require_nonempty(x, "layernorm");
  require(eps > 0.0, "layernorm: eps must be positive");
  require_same_dtype(x, gamma, "layernorm");
  require_same_dtype(x, beta, "layernorm");
  const std::size_t c = x.extent(-1);
  require(gamma.rank() == 1 && gamma.extent(0) == c && beta.rank() == 1 && beta.extent(0) == c,
          "layernorm: gamma/beta must be [" + std::to_string(c) + "]");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.data<T>();
    auto g = gamma.data<T>();
    auto bt = beta.data<T>();
    const std::size_t rows = x.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = in.data() + r * c;
      T mean = 0;
      for (std::size_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<T>(c);
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      T* orow = o.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] = (row[j] - mean) * inv * g[j] + bt[j];
    }
  });
  return finish(std::move(out), meter, 7ULL * x.size(), "layernorm");
}

Tensor gelu(const Tensor& x, Meter* meter) {
  require_nonempty(x, "gelu");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    auto in = x.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const T v = in[i];
      o[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v)));
    }
  });
  return finish(std::move(out), meter, x.size(), "gelu");
}

Tensor add(const Tensor& a, const Tensor& b, Meter* meter) {
  return dispatch(a.dtype(), [&]<typename T>() {
    return elementwise<T>(a, b, "add", meter, [](T x, T y) { return x + y; });
  });
}

Tensor sub(const Tensor& a, const Tensor& b, Meter* meter) {
  return dispatch(a.dtype(), [&]<typename T>() {
    return elementwise<T>(a, b, "sub", meter, [](T x, T y) { return x - y; });
  });
}

Tensor mul(const Tensor& a, const Tensor& b, Meter* meter) {
  return dispatch(a.dtype(), [&]<typename T>() {
    return elementwise<T>(a, b, "mul", meter, [](T x, T y) { return x * y; });
  });
}

Tensor scale(const Tensor& a, double s, Meter* meter) {
  Tensor copy(a);
  if (meter) copy.track(meter);
  return scale(std::move(copy), s, meter);
}

Tensor scale(Tensor&& a, double s, Meter* meter) {
  require_nonempty(a, "scale");
  dispatch(a.dtype(), [&]<typename T>() {
    const T f = static_cast<T>(s);
    for (T& v : a.data<T>()) v *= f;
  });
  return finish(std::move(a), meter, a.size(), "scale");
}

Tensor add_bias(const Tensor& x, const Tensor& bias, Meter* meter) {
  require_nonempty(x, "add_bias");
  require_same_dtype(x, bias, "add_bias");
  const std::size_t c = x.extent(-1);
  require(bias.rank() == 1 && bias.extent(0) == c, "add_bias: bias must be [" + std::to_string(c) + "]");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto bs = bias.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] + bs[i % c];
  });
  return finish(std::move(out), meter, x.size(), "add_bias");
}

Tensor transpose_last2(const Tensor& a, Meter* meter) {
  require(a.rank() >= 2, "transpose_last2: rank must be >= 2");
  const std::size_t r = a.extent(-2);
  const std::size_t c = a.extent(-1);
  Shape os = a.shape();
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os, a.dtype());
  const std::size_t batch = leading(a.shape(), 2);
  dispatch(a.dtype(), [&]<typename T>() {
    for (std::size_t b = 0; b < batch; ++b) {
      transpose_into(a.data<T>().data() + b * r * c, out.data<T>().data() + b * r * c, r, c);
    }
  });
  return finish(std::move(out), meter, 0, "transpose_last2");
}

Tensor concat_lastdim(std::span<const Tensor> parts, Meter* meter) {
  require(!parts.empty(), "concat_lastdim: no inputs");
  const Tensor& first = parts.front();
  require_nonempty(first, "concat_lastdim");
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype(first, p, "concat_lastdim");
    require(p.rank() == first.rank() &&
                std::equal(first.shape().begin(), first.shape().end() - 1, p.shape().begin()),
            "concat_lastdim: leading extents differ");
    total += p.extent(-1);
  }
  Shape os = first.shape();
  os.back() = total;
  Tensor out(os, first.dtype());
  const std::size_t rows = first.size() / first.extent(-1);
  dispatch(first.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.extent(-1);
      auto in = p.data<T>();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(in.data() + r * w, w, o.data() + r * total + offset);
      }
      offset += w;
    }
  });
  return finish(std::move(out), meter, 0, "concat_lastdim");
}

Tensor reshape(const Tensor& a, Shape shape, Meter* meter) {
  Tensor out(a);
  out.reshape_inplace(std::move(shape));
  if (meter) out.track(meter);
  return out;
}

Tensor reshape(Tensor&& a, Shape shape) {
  a.reshape_inplace(std::move(shape));
  return std::move(a);
}

Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis, Meter* meter) {
  require_nonempty(x, "mean_axis");
  const auto r = static_cast<std::ptrdiff_t>(x.rank());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "mean_axis: axis out of range");
  const auto ax = static_cast<std::size_t>(axis);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != ax) os.push_back(s[i]);
  }
  if (os.empty()) os.push_back(1);
  Tensor out(os, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.data<T>();
    for (std::size_t a = 0; a < outer; ++a) {
      T* dst = o.data() + a * inner;
      for (std::size_t k = 0; k < n; ++k) {
        const T* src = in.data() + (a * n + k) * inner;
        for (std::size_t e = 0; e < inner; ++e) dst[e] += src[e];
      }
      const T inv = T(1) / static_cast<T>(n);
      for (std::size_t e = 0; e < inner; ++e) dst[e] *= inv;
    }
  });
  return finish(std::move(out), meter, x.size() + out.size(), "mean_axis");
}

Tensor avg_pool3x3(const Tensor& grid, Meter* meter) {
  require(grid.rank() >= 3, "avg_pool3x3: grid must be [..., H, W, c]");
  const std::size_t hg = grid.extent(-3);
  const std::size_t wg = grid.extent(-2);
  const std::size_t c = grid.extent(-1);
  const std::size_t batch = leading(grid.shape(), 3);
  Tensor out(grid.shape(), grid.dtype());
  std::uint64_t flops = 0;
  for (std::size_t i = 0; i < hg; ++i) {
    const std::size_t nr = std::min(hg, i + 2) - (i == 0 ? 0 : i - 1);
    for (std::size_t j = 0; j < wg; ++j) {
      const std::size_t nc = std::min(wg, j + 2) - (j == 0 ? 0 : j - 1);
      flops += (nr * nc) * c;
    }
  }
  flops *= batch;
  dispatch(grid.dtype(), [&]<typename T>() {
    auto in = grid.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* src = in.data() + b * hg * wg * c;
      T* dst = o.data() + b * hg * wg * c;
      for (std::size_t i = 0; i < hg; ++i) {
        const std::size_t r0 = i == 0 ? 0 : i - 1;
        const std::size_t r1 = std::min(hg, i + 2);
        for (std::size_t j = 0; j < wg; ++j) {
          const std::size_t c0 = j == 0 ? 0 : j - 1;
          const std::size_t c1 = std::min(wg, j + 2);
          T* cell = dst + (i * wg + j) * c;
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t cc = c0; cc < c1; ++cc) {
              const T* s = src + (r * wg + cc) * c;
              for (std::size_t e = 0; e < c; ++e) cell[e] += s[e];
            }
          }
          const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
          for (std::size_t e = 0; e < c; ++e) cell[e] *= inv;
        }
      }
    }
  });
  return finish(std::move(out), meter, flops, "avg_pool3x3");
}

Tensor head_mix(const Tensor& w, const Tensor& stack, Meter* meter) {
  check_head_mix(w, stack);
  const std::size_t h = stack.extent(-3);
  const std::size_t plane = stack.extent(-2) * stack.extent(-1);
  const std::size_t batch = leading(stack.shape(), 3);
  Tensor out(stack.shape(), stack.dtype());
  dispatch(stack.dtype(), [&]<typename T>() {
    head_mix_kernel<T>(w.data<T>(), stack.data<T>(), out.data<T>(), batch, h, plane);
  });
  return finish(std::move(out), meter, 2ULL * batch * h * h * plane, "head_mix");
}

Tensor head_mix(const Tensor& w, Tensor&& stack, Meter* meter) {
  check_head_mix(w, stack);
  const std::size_t h = stack.extent(-3);
  const std::size_t plane = stack.extent(-2) * stack.extent(-1);
  const std::size_t batch = leading(stack.shape(), 3);
  dispatch(stack.dtype(), [&]<typename T>() {
    auto wd = w.data<T>();
    auto s = stack.data<T>();
    // In place: mix one plane-position across heads at a time through a small buffer.
    std::vector<T> column(h), mixed(h);
    for (std::size_t b = 0; b < batch; ++b) {
      T* base = s.data() + b * h * plane;
      for (std::size_t e = 0; e < plane; ++e) {
        for (std::size_t j = 0; j < h; ++j) column[j] = base[j * plane + e];
        for (std::size_t i = 0; i < h; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < h; ++j) acc += wd[i * h + j] * column[j];
          mixed[i] = acc;
        }
        for (std::size_t i = 0; i < h; ++i) base[i * plane + e] = mixed[i];
      }
    }
  });
  return finish(std::move(stack), meter, 2ULL * batch * h * h * plane, "head_mix");
}

double sum_all(const Tensor& x) {
  require_nonempty(x, "sum_all");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  return s;
}

double mean_all(const Tensor& x) { return sum_all(x) / static_cast<double>(x.size()); }

Tensor variance_over_axis(const Tensor& x, std::ptrdiff_t axis) {
  const Tensor mean = mean_axis(x.to(DType::f64), axis);
  const auto r = static_cast<std::ptrdiff_t>(x.rank());
  if (axis < 0) axis += r;
  const auto ax = static_cast<std::size_t>(axis);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Tensor out(mean.shape(), DType::f64);
  auto o = out.data<double>();
  auto m = mean.data<double>();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t e = 0; e < inner; ++e) {
        const double dv = x.at((a * n + k) * inner + e) - m[a * inner + e];
        o[a * inner + e] += dv * dv;
      }
    }
  }
  for (double& v : o) v /= static_cast<double>(n);
  return out.to(x.dtype());
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  require_nonempty(a, "cosine_similarity");
  require(a.size() == b.size(), "cosine_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.at(i);
    const double y = b.at(i);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 && nb == 0.0) throw std::domain_error("cosine_similarity: both vectors are zero");
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace imhsa
