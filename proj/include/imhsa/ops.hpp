#pragma once

// Primitive numerical ops. Every op is a pure function of its inputs, checks
// that its output is finite, and reports to an optional Meter.
//
// FLOP convention (shape-only, never value-dependent):
//   matmul / matmul_nt     2*m*k*n per batch entry
//   softmax_lastdim        5*n per row (max, subtract, exp, sum, divide)
//   layernorm              7*c per row
//   elementwise ops        1 per output element (gelu, add, sub, mul, scale, add_bias)
//   adaptive_avg_pool2d    1 per input element + 1 per output element
//   avg_pool3x3            window-size adds + 1 divide per output element
//   head_mix               2*H*H*R*C per stack
//   mean_axis              1 per input element + 1 per output element
//   data movement          0 (reshape, transpose, concat, head split/merge)
//
// Overloads taking `Tensor&&` reuse the consumed buffer: no new bytes are
// allocated and the input's meter registration carries over to the result.

#include <cstdint>
#include <span>

#include "imhsa/tensor.hpp"

namespace imhsa {

/// a[..., m, k] x b[..., k, n]. `b` may be rank 2, in which case the same matrix
/// multiplies every batch entry of `a`.
Tensor matmul(const Tensor& a, const Tensor& b, Meter* meter = nullptr);

/// a[..., m, k] x b[..., n, k]^T without materializing the transpose as a tensor.
Tensor matmul_nt(const Tensor& a, const Tensor& b, Meter* meter = nullptr);

Tensor softmax_lastdim(const Tensor& x, Meter* meter = nullptr);
Tensor softmax_lastdim(Tensor&& x, Meter* meter = nullptr);

/// Adaptive average pooling of grid[..., Hg, Wg, d] to [..., out_h, out_w, d].
/// Window i spans rows [floor(i*Hg/out_h), floor((i+1)*Hg/out_h)); columns
/// likewise. The windows partition the grid.
Tensor adaptive_avg_pool2d(const Tensor& grid, std::size_t out_h, std::size_t out_w,
                           Meter* meter = nullptr);

/// The same pooling on token rows: tokens[..., N, d] are read as a row-major
/// grid_h x grid_w grid (N == grid_h * grid_w); the result is [..., out_h*out_w, d].
Tensor adaptive_avg_pool_tokens(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w,
                                std::size_t out_h, std::size_t out_w, Meter* meter = nullptr);

/// Normalizes each last-dim row with population variance, then applies gamma/beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                 Meter* meter = nullptr);

/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x, Meter* meter = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Meter* meter = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Meter* meter = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Meter* meter = nullptr);
Tensor scale(const Tensor& a, double s, Meter* meter = nullptr);
Tensor scale(Tensor&& a, double s, Meter* meter = nullptr);

/// x[..., c] + bias[c] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias, Meter* meter = nullptr);

Tensor transpose_last2(const Tensor& a, Meter* meter = nullptr);
Tensor concat_lastdim(std::span<const Tensor> parts, Meter* meter = nullptr);
Tensor reshape(const Tensor& a, Shape shape, Meter* meter = nullptr);
Tensor reshape(Tensor&& a, Shape shape);

/// Mean over one axis; the axis is removed from the result.
Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis, Meter* meter = nullptr);

/// 3x3 stride-1 average over grid[..., Hg, Wg, c], padding excluded from the
/// count (the pooling token mixer's neighbourhood mean).
Tensor avg_pool3x3(const Tensor& grid, Meter* meter = nullptr);

/// Mixes a stack T[..., H, R, C] along its head axis: T'[i] = sum_j W[i, j] T[j].
Tensor head_mix(const Tensor& w, const Tensor& stack, Meter* meter = nullptr);
Tensor head_mix(const Tensor& w, Tensor&& stack, Meter* meter = nullptr);

double sum_all(const Tensor& x);
double mean_all(const Tensor& x);

/// Population variance along `axis`; the axis is removed from the result.
Tensor variance_over_axis(const Tensor& x, std::ptrdiff_t axis);

/// Cosine of the angle between the flattened tensors. Zero when exactly one of
/// them is the zero vector; throws when both are.
double cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace imhsa
