#pragma once

// Multi-head self-attention variants:
//
//   mhsa      softmax(Q K^T / sqrt(d)) V per head
//   mhsa-ix   the same with cross-head interaction on the full N x N stacks
//   decomp    landmark-decomposed attention A_Q (A_K V), no interaction
//   imhsa     decomposed attention with cross-head interaction on both factors
//
// Stacks are head-major: [H, N, d] for per-head tokens, [H, R, C] for attention
// matrices. A_Q is stored [H, N, L] (softmax over landmarks) and A_K is stored
// [H, L, N] (softmax over tokens), so the non-interactive product A_Q A_K is
// row-stochastic and the output is A_Q (A_K V) with no N x N intermediate.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "imhsa/ops.hpp"
#include "imhsa/rng.hpp"
#include "imhsa/tensor.hpp"

namespace imhsa {

struct AttnConfig {
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;
  std::size_t grid_h = 1;
  std::size_t grid_w = 1;
  std::size_t landmark_h = 7;
  std::size_t landmark_w = 7;

  /// Landmark grid defaults to 7x7 and is clamped to the token grid.
  static AttnConfig make(std::size_t heads, std::size_t head_dim, std::size_t grid_h, std::size_t grid_w,
                         std::size_t landmark_h = 7, std::size_t landmark_w = 7);

  std::size_t channels() const { return num_heads * head_dim; }
  std::size_t tokens() const { return grid_h * grid_w; }
  std::size_t landmarks() const { return landmark_h * landmark_w; }
  double scale() const;

  /// Throws ShapeError when any extent is zero or the landmark grid exceeds the token grid.
  void validate() const;
};

struct QKVWeights {
  Tensor wq, wk, wv;  // [c, c]; Q = z W_Q^T

  static QKVWeights random(std::size_t channels, Rng& rng, double stddev = 0.02, DType dtype = DType::f32);
  static QKVWeights identity(std::size_t channels, DType dtype = DType::f32);
};

struct HeadMixWeights {
  Tensor w1_q, w2_q, w1_k, w2_k;  // [H, H]

  static HeadMixWeights identity(std::size_t heads, DType dtype = DType::f32);
  /// Identity plus N(0, sigma^2) noise on every entry.
  static HeadMixWeights near_identity(std::size_t heads, Rng& rng, double sigma = 0.01,
                                      DType dtype = DType::f32);
  void validate(std::size_t heads) const;
};

struct DecomposedAttn {
  Tensor a_q;  // [H, N, L]
  Tensor a_k;  // [H, L, N]
};

struct QKV {
  Tensor q, k, v;
};

enum class Method { mhsa, mhsa_ix, decomp, imhsa };

const char* method_name(Method m);
Method parse_method(const std::string& name);
bool is_quadratic(Method m);
bool uses_interaction(Method m);

QKV project_qkv(const Tensor& z, const QKVWeights& w, Meter* meter = nullptr);

/// [..., N, c] -> [..., H, N, d]; head h takes channels [h*d, (h+1)*d).
Tensor split_heads(const Tensor& x, std::size_t heads, Meter* meter = nullptr);
/// [..., H, N, d] -> [..., N, H*d]; exact inverse of split_heads.
Tensor merge_heads(const Tensor& x, Meter* meter = nullptr);

// Attention cores on head-split stacks q, k, v: [H, N, d] -> [H, N, d].

/// Full attention matrices [H, N, N]; with `mix`, uses W1_Q before and W2_Q after the softmax.
Tensor full_attention(const Tensor& q, const Tensor& k, const AttnConfig& cfg, const HeadMixWeights* mix,
                      Meter* meter = nullptr);
Tensor mhsa_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
                   const HeadMixWeights* mix, Meter* meter = nullptr);

/// Pools a head stack [H, N, d] on the token grid to landmarks [H, L, d].
Tensor pool_landmarks(const Tensor& heads, const AttnConfig& cfg, Meter* meter = nullptr);

/// A_Q [H, N, L] from queries [H, N, d] and key landmarks [H, L, d].
Tensor query_factor(const Tensor& q, const Tensor& k_landmarks, const AttnConfig& cfg,
                    const HeadMixWeights* mix, Meter* meter = nullptr);
/// A_K [H, L, N] from query landmarks [H, L, d] and keys [H, N, d].
Tensor key_factor(const Tensor& q_landmarks, const Tensor& k, const AttnConfig& cfg, const HeadMixWeights* mix,
                  Meter* meter = nullptr);

/// Decomposed (mix == nullptr) or interactive decomposed attention, evaluated
/// as A_Q (A_K V). Intermediates are released as soon as they are consumed.
Tensor imhsa_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
                    const HeadMixWeights* mix, Meter* meter = nullptr);

/// Dispatches to the core of `method`. `mix` is required for the interactive methods.
Tensor attend(Method method, const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
              const HeadMixWeights* mix, Meter* meter = nullptr);

// Token-level entry points: z [N, c] -> [N, c].

Tensor mhsa_forward(const Tensor& z, const QKVWeights& w, const AttnConfig& cfg, Meter* meter = nullptr);
Tensor mhsa_interactive_forward(const Tensor& z, const QKVWeights& w, const HeadMixWeights& mix,
                                const AttnConfig& cfg, Meter* meter = nullptr);
Tensor decomposed_forward(const Tensor& z, const QKVWeights& w, const AttnConfig& cfg, Meter* meter = nullptr);
Tensor imhsa_forward(const Tensor& z, const QKVWeights& w, const HeadMixWeights& mix, const AttnConfig& cfg,
                     Meter* meter = nullptr);

/// Landmarks from channel grids Q, K [Hg, Wg, c]: two [L, c] tensors, row-major over the landmark grid.
std::pair<Tensor, Tensor> compute_landmarks(const Tensor& q_grid, const Tensor& k_grid, const AttnConfig& cfg,
                                            Meter* meter = nullptr);

/// A_Q, A_K from Q, K [N, c] and landmarks q, k [L, c].
DecomposedAttn decomposed_attention(const Tensor& q, const Tensor& k, const Tensor& q_landmarks,
                                    const Tensor& k_landmarks, const AttnConfig& cfg,
                                    const HeadMixWeights* mix, Meter* meter = nullptr);

/// Materializes A = A_Q A_K per head, then A V. Test-only reference path.
inline constexpr std::size_t kDenseOracleMaxTokens = 4096;
Tensor dense_oracle_imhsa(const Tensor& z, const QKVWeights& w, const HeadMixWeights* mix, const AttnConfig& cfg);

// Head diagnostics on stacks [H, R, C].

/// Population variance across heads, averaged over the R*C entries.
double head_variance(const Tensor& stack);
/// Mean cosine similarity over all unordered pairs of flattened head matrices.
double cross_head_similarity(const Tensor& stack);

/// Min-max normalizes to [0, 255] with floor rounding; a constant matrix maps to 0.
std::vector<std::uint8_t> heatmap_pixels(const Tensor& attn);
/// Writes `attn` [R, C] as a binary PGM (P5, maxval 255).
void export_attention_heatmap(const Tensor& attn, const std::filesystem::path& path);

}  // namespace imhsa
