#include "imhsa/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace imhsa {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void check_stack(const Tensor& t, std::size_t heads, std::size_t rows, std::size_t cols, const char* what) {
  require(t.rank() == 3 && t.extent(0) == heads && t.extent(1) == rows && t.extent(2) == cols,
          std::string(what) + ": expected [" + std::to_string(heads) + "x" + std::to_string(rows) + "x" +
              std::to_string(cols) + "], got " + shape_str(t.shape()));
}

void check_tokens(const Tensor& z, const AttnConfig& cfg) {
  require(z.rank() == 2 && z.extent(0) == cfg.tokens() && z.extent(1) == cfg.channels(),
          "tokens: expected [" + std::to_string(cfg.tokens()) + "x" + std::to_string(cfg.channels()) +
              "], got " + shape_str(z.shape()));
}

// Mix -> softmax -> mix on a score stack that is consumed in place.
Tensor normalize_scores(Tensor&& scores, const Tensor* w1, const Tensor* w2, Meter* meter) {
  if (w1) scores = head_mix(*w1, std::move(scores), meter);
  scores = softmax_lastdim(std::move(scores), meter);
  if (w2) scores = head_mix(*w2, std::move(scores), meter);
  return std::move(scores);
}

}  // namespace

AttnConfig AttnConfig::make(std::size_t heads, std::size_t head_dim, std::size_t grid_h, std::size_t grid_w,
                            std::size_t landmark_h, std::size_t landmark_w) {
  AttnConfig cfg{heads, head_dim, grid_h, grid_w, std::min(landmark_h, grid_h), std::min(landmark_w, grid_w)};
  cfg.validate();
  return cfg;
}

double AttnConfig::scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

void AttnConfig::validate() const {
  require(num_heads > 0 && head_dim > 0, "AttnConfig: heads and head_dim must be positive");
  require(grid_h > 0 && grid_w > 0, "AttnConfig: token grid must be non-empty");
  require(landmark_h > 0 && landmark_w > 0, "AttnConfig: landmark grid must be non-empty");
  require(landmark_h <= grid_h && landmark_w <= grid_w,
          "AttnConfig: landmark grid " + std::to_string(landmark_h) + "x" + std::to_string(landmark_w) +
              " exceeds token grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
}

QKVWeights QKVWeights::random(std::size_t channels, Rng& rng, double stddev, DType dtype) {
  QKVWeights w;
  w.wq = gaussian_tensor(rng, {channels, channels}, stddev, dtype);
  w.wk = gaussian_tensor(rng, {channels, channels}, stddev, dtype);
  w.wv = gaussian_tensor(rng, {channels, channels}, stddev, dtype);
  return w;
}

QKVWeights QKVWeights::identity(std::size_t channels, DType dtype) {
  return {Tensor::identity(channels, dtype), Tensor::identity(channels, dtype), Tensor::identity(channels, dtype)};
}

HeadMixWeights HeadMixWeights::identity(std::size_t heads, DType dtype) {
  auto eye = Tensor::identity(heads, dtype);
  return {eye, eye, eye, eye};
}

HeadMixWeights HeadMixWeights::near_identity(std::size_t heads, Rng& rng, double sigma, DType dtype) {
  HeadMixWeights m;
  for (Tensor* w : {&m.w1_q, &m.w2_q, &m.w1_k, &m.w2_k}) {
    *w = gaussian_tensor(rng, {heads, heads}, sigma, dtype);
    for (std::size_t i = 0; i < heads; ++i) w->set(i * heads + i, w->at(i * heads + i) + 1.0);
  }
  return m;
}

void HeadMixWeights::validate(std::size_t heads) const {
  for (const Tensor* w : {&w1_q, &w2_q, &w1_k, &w2_k}) {
    require(w->rank() == 2 && w->extent(0) == heads && w->extent(1) == heads,
            "HeadMixWeights: expected [" + std::to_string(heads) + "x" + std::to_string(heads) + "], got " +
                shape_str(w->shape()));
    if (!w->all_finite()) throw NumericError("HeadMixWeights: non-finite weight");
  }
}

const char* method_name(Method m) {
  switch (m) {
    case Method::mhsa: return "mhsa";
    case Method::mhsa_ix: return "mhsa-ix";
    case Method::decomp: return "decomp";
    case Method::imhsa: return "imhsa";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::mhsa, Method::mhsa_ix, Method::decomp, Method::imhsa}) {
    if (name == method_name(m)) return m;
  }
  throw std::invalid_argument("unknown attention method '" + name + "'");
}

bool is_quadratic(Method m) { return m == Method::mhsa || m == Method::mhsa_ix; }
bool uses_interaction(Method m) { return m == Method::mhsa_ix || m == Method::imhsa; }

QKV project_qkv(const Tensor& z, const QKVWeights& w, Meter* meter) {
  require(z.rank() == 2, "project_qkv: z must be [N, c]");
  const std::size_t c = z.extent(1);
  for (const Tensor* m : {&w.wq, &w.wk, &w.wv}) {
    require(m->rank() == 2 && m->extent(0) == c && m->extent(1) == c,
            "project_qkv: weights must be [" + std::to_string(c) + "x" + std::to_string(c) + "]");
  }
  if (!z.all_finite()) throw NumericError("project_qkv: non-finite input");
  return {matmul_nt(z, w.wq, meter), matmul_nt(z, w.wk, meter), matmul_nt(z, w.wv, meter)};
}

Tensor split_heads(const Tensor& x, std::size_t heads, Meter* meter) {
  require(x.rank() >= 2, "split_heads: input must be [..., N, c]");
  require(heads > 0, "split_heads: heads must be positive");
  const std::size_t n = x.extent(-2);
  const std::size_t c = x.extent(-1);
  require(c % heads == 0, "split_heads: channels " + std::to_string(c) + " not divisible by " +
                              std::to_string(heads) + " heads");
  const std::size_t d = c / heads;
  Shape os(x.shape().begin(), x.shape().end() - 2);
  os.insert(os.end(), {heads, n, d});
  const std::size_t batch = x.size() / (n * c);
  Tensor out(os, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < n; ++t) {
        const T* row = in.data() + (b * n + t) * c;
        for (std::size_t h = 0; h < heads; ++h) {
          std::copy_n(row + h * d, d, o.data() + ((b * heads + h) * n + t) * d);
        }
      }
    }
  });
  if (meter) out.track(meter);
  return out;
}

Tensor merge_heads(const Tensor& x, Meter* meter) {
  require(x.rank() >= 3, "merge_heads: input must be [..., H, N, d]");
  const std::size_t heads = x.extent(-3);
  const std::size_t n = x.extent(-2);
  const std::size_t d = x.extent(-1);
  const std::size_t c = heads * d;
  Shape os(x.shape().begin(), x.shape().end() - 3);
  os.insert(os.end(), {n, c});
  const std::size_t batch = x.size() / (heads * n * d);
  Tensor out(os, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < n; ++t) {
          std::copy_n(in.data() + ((b * heads + h) * n + t) * d, d, o.data() + (b * n + t) * c + h * d);
        }
      }
    }
  });
  if (meter) out.track(meter);
  return out;
}

Tensor full_attention(const Tensor& q, const Tensor& k, const AttnConfig& cfg, const HeadMixWeights* mix,
                      Meter* meter) {
  cfg.validate();
  const std::size_t n = cfg.tokens();
  check_stack(q, cfg.num_heads, n, cfg.head_dim, "full_attention q");
  check_stack(k, cfg.num_heads, n, cfg.head_dim, "full_attention k");
  if (mix) mix->validate(cfg.num_heads);
  Tensor scores = scale(matmul_nt(q, k, meter), cfg.scale(), meter);
  return normalize_scores(std::move(scores), mix ? &mix->w1_q : nullptr, mix ? &mix->w2_q : nullptr, meter);
}

Tensor mhsa_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
                   const HeadMixWeights* mix, Meter* meter) {
  check_stack(v, cfg.num_heads, cfg.tokens(), cfg.head_dim, "mhsa v");
  const Tensor attn = full_attention(q, k, cfg, mix, meter);
  return matmul(attn, v, meter);
}

Tensor pool_landmarks(const Tensor& heads, const AttnConfig& cfg, Meter* meter) {
  check_stack(heads, cfg.num_heads, cfg.tokens(), cfg.head_dim, "pool_landmarks");
  return adaptive_avg_pool_tokens(heads, cfg.grid_h, cfg.grid_w, cfg.landmark_h, cfg.landmark_w, meter);
}

Tensor query_factor(const Tensor& q, const Tensor& k_landmarks, const AttnConfig& cfg,
                    const HeadMixWeights* mix, Meter* meter) {
  check_stack(q, cfg.num_heads, cfg.tokens(), cfg.head_dim, "query_factor q");
  check_stack(k_landmarks, cfg.num_heads, cfg.landmarks(), cfg.head_dim, "query_factor k landmarks");
  if (mix) mix->validate(cfg.num_heads);
  Tensor raw = scale(matmul_nt(q, k_landmarks, meter), cfg.scale(), meter);
  return normalize_scores(std::move(raw), mix ? &mix->w1_q : nullptr, mix ? &mix->w2_q : nullptr, meter);
}

Tensor key_factor(const Tensor& q_landmarks, const Tensor& k, const AttnConfig& cfg, const HeadMixWeights* mix,
                  Meter* meter) {
  check_stack(q_landmarks, cfg.num_heads, cfg.landmarks(), cfg.head_dim, "key_factor q landmarks");
  check_stack(k, cfg.num_heads, cfg.tokens(), cfg.head_dim, "key_factor k");
  if (mix) mix->validate(cfg.num_heads);
  Tensor raw = scale(matmul_nt(q_landmarks, k, meter), cfg.scale(), meter);
  return normalize_scores(std::move(raw), mix ? &mix->w1_k : nullptr, mix ? &mix->w2_k : nullptr, meter);
}

Tensor imhsa_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
                    const HeadMixWeights* mix, Meter* meter) {
  cfg.validate();
  check_stack(v, cfg.num_heads, cfg.tokens(), cfg.head_dim, "imhsa v");
  Tensor q_lm = pool_landmarks(q, cfg, meter);
  Tensor k_lm = pool_landmarks(k, cfg, meter);
  Tensor a_k = key_factor(q_lm, k, cfg, mix, meter);
  q_lm = Tensor();
  Tensor kv = matmul(a_k, v, meter);  // [H, L, d]
  a_k = Tensor();
  Tensor a_q = query_factor(q, k_lm, cfg, mix, meter);
  k_lm = Tensor();
  return matmul(a_q, kv, meter);
}

Tensor attend(Method method, const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg,
              const HeadMixWeights* mix, Meter* meter) {
  if (uses_interaction(method) && !mix) {
    throw std::invalid_argument(std::string(method_name(method)) + " requires head-mix weights");
  }
  switch (method) {
    case Method::mhsa: return mhsa_attend(q, k, v, cfg, nullptr, meter);
    case Method::mhsa_ix: return mhsa_attend(q, k, v, cfg, mix, meter);
    case Method::decomp: return imhsa_attend(q, k, v, cfg, nullptr, meter);
    case Method::imhsa: return imhsa_attend(q, k, v, cfg, mix, meter);
  }
  throw std::logic_error("unreachable");
}

namespace {

Tensor token_forward(Method method, const Tensor& z, const QKVWeights& w, const HeadMixWeights* mix,
                     const AttnConfig& cfg, Meter* meter) {
  cfg.validate();
  check_tokens(z, cfg);
  Tensor out;
  {
    QKV p = project_qkv(z, w, meter);
    Tensor q = split_heads(p.q, cfg.num_heads, meter);
    Tensor k = split_heads(p.k, cfg.num_heads, meter);
    Tensor v = split_heads(p.v, cfg.num_heads, meter);
    p = QKV{};
    out = attend(method, q, k, v, cfg, mix, meter);
  }
  return merge_heads(out, meter);
}

}  // namespace

Tensor mhsa_forward(const Tensor& z, const QKVWeights& w, const AttnConfig& cfg, Meter* meter) {
  return token_forward(Method::mhsa, z, w, nullptr, cfg, meter);
}

Tensor mhsa_interactive_forward(const Tensor& z, const QKVWeights& w, const HeadMixWeights& mix,
                                const AttnConfig& cfg, Meter* meter) {
  return token_forward(Method::mhsa_ix, z, w, &mix, cfg, meter);
}

Tensor decomposed_forward(const Tensor& z, const QKVWeights& w, const AttnConfig& cfg, Meter* meter) {
  return token_forward(Method::decomp, z, w, nullptr, cfg, meter);
}

Tensor imhsa_forward(const Tensor& z, const QKVWeights& w, const HeadMixWeights& mix, const AttnConfig& cfg,
                     Meter* meter) {
  return token_forward(Method::imhsa, z, w, &mix, cfg, meter);
}

std::pair<Tensor, Tensor> compute_landmarks(const Tensor& q_grid, const Tensor& k_grid, const AttnConfig& cfg,
                                            Meter* meter) {
  cfg.validate();
  for (const Tensor* g : {&q_grid, &k_grid}) {
    require(g->rank() == 3 && g->extent(0) == cfg.grid_h && g->extent(1) == cfg.grid_w &&
                g->extent(2) == cfg.channels(),
            "compute_landmarks: grid must be [" + std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) +
                "x" + std::to_string(cfg.channels()) + "], got " + shape_str(g->shape()));
  }
  const Shape flat{cfg.landmarks(), cfg.channels()};
  return {reshape(adaptive_avg_pool2d(q_grid, cfg.landmark_h, cfg.landmark_w, meter), flat),
          reshape(adaptive_avg_pool2d(k_grid, cfg.landmark_h, cfg.landmark_w, meter), flat)};
}

DecomposedAttn decomposed_attention(const Tensor& q, const Tensor& k, const Tensor& q_landmarks,
                                    const Tensor& k_landmarks, const AttnConfig& cfg,
                                    const HeadMixWeights* mix, Meter* meter) {
  cfg.validate();
  check_tokens(q, cfg);
  check_tokens(k, cfg);
  for (const Tensor* lm : {&q_landmarks, &k_landmarks}) {
    require(lm->rank() == 2 && lm->extent(0) == cfg.landmarks() && lm->extent(1) == cfg.channels(),
            "decomposed_attention: landmarks must be [" + std::to_string(cfg.landmarks()) + "x" +
                std::to_string(cfg.channels()) + "], got " + shape_str(lm->shape()));
  }
  const Tensor qh = split_heads(q, cfg.num_heads, meter);
  const Tensor kh = split_heads(k, cfg.num_heads, meter);
  const Tensor q_lm = split_heads(q_landmarks, cfg.num_heads, meter);
  const Tensor k_lm = split_heads(k_landmarks, cfg.num_heads, meter);
  return {query_factor(qh, k_lm, cfg, mix, meter), key_factor(q_lm, kh, cfg, mix, meter)};
}

Tensor dense_oracle_imhsa(const Tensor& z, const QKVWeights& w, const HeadMixWeights* mix, const AttnConfig& cfg) {
  cfg.validate();
  check_tokens(z, cfg);
  if (cfg.tokens() > kDenseOracleMaxTokens) {
    throw std::invalid_argument("dense_oracle_imhsa: N = " + std::to_string(cfg.tokens()) + " exceeds " +
                                std::to_string(kDenseOracleMaxTokens));
  }
  const QKV p = project_qkv(z, w);
  const Tensor q = split_heads(p.q, cfg.num_heads);
  const Tensor k = split_heads(p.k, cfg.num_heads);
  const Tensor v = split_heads(p.v, cfg.num_heads);
  const Tensor a_q = query_factor(q, pool_landmarks(k, cfg), cfg, mix);
  const Tensor a_k = key_factor(pool_landmarks(q, cfg), k, cfg, mix);
  const Tensor full = matmul(a_q, a_k);  // [H, N, N]
  return merge_heads(matmul(full, v));
}

double head_variance(const Tensor& stack) {
  require(stack.rank() == 3, "head_variance: stack must be [H, R, C]");
  return mean_all(variance_over_axis(stack.to(DType::f64), 0));
}

double cross_head_similarity(const Tensor& stack) {
  require(stack.rank() == 3, "cross_head_similarity: stack must be [H, R, C]");
  const std::size_t heads = stack.extent(0);
  if (heads < 2) throw std::invalid_argument("cross_head_similarity: needs at least 2 heads");
  const std::size_t plane = stack.extent(1) * stack.extent(2);
  std::vector<Tensor> flat;
  flat.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor t({plane}, DType::f64);
    double norm = 0.0;
    for (std::size_t e = 0; e < plane; ++e) {
      const double v = stack.at(h * plane + e);
      t.set(e, v);
      norm += v * v;
    }
    if (norm == 0.0) throw std::invalid_argument("cross_head_similarity: head " + std::to_string(h) + " is zero");
    flat.push_back(std::move(t));
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < heads; ++i) {
    for (std::size_t j = i + 1; j < heads; ++j) {
      total += cosine_similarity(flat[i], flat[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

std::vector<std::uint8_t> heatmap_pixels(const Tensor& attn) {
  require(attn.rank() == 2, "heatmap: matrix must be [R, C]");
  if (!attn.all_finite()) throw NumericError("heatmap: non-finite values");
  const auto values = attn.to_vector();
  const auto [lo, hi] = std::ranges::minmax(values);
  std::vector<std::uint8_t> px(values.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double v = std::floor((values[i] - lo) / (hi - lo) * 255.0);
      px[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return px;
}

void export_attention_heatmap(const Tensor& attn, const std::filesystem::path& path) {
  const auto px = heatmap_pixels(attn);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << attn.extent(1) << ' ' << attn.extent(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace imhsa
