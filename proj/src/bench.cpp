#include "imhsa/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace imhsa {

std::size_t square_side(std::size_t n, const char* what) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (n == 0 || side * side != n) {
    throw std::invalid_argument(std::string(what) + " " + std::to_string(n) + " is not a positive perfect square");
  }
  return side;
}

BenchRecord measure_cell(Method method, std::size_t n, const BenchConfig& cfg, bool timed) {
  const std::size_t side = square_side(n, "token count");
  const std::size_t lside = square_side(cfg.landmarks, "landmark count");
  if (cfg.reps < 3 && timed) throw std::invalid_argument("bench needs at least 3 reps");
  BenchRecord rec{method, n, cfg.heads, cfg.head_dim, cfg.landmarks};
  if (cfg.capped.contains(method) && n > cfg.cap) {
    rec.skipped = true;
    return rec;
  }
  const AttnConfig acfg = AttnConfig::make(cfg.heads, cfg.head_dim, side, side, lside, lside);
  Rng rng(cfg.seed);
  const Shape s{cfg.heads, n, cfg.head_dim};
  const Tensor q = gaussian_tensor(rng, s, 1.0);
  const Tensor k = gaussian_tensor(rng, s, 1.0);
  const Tensor v = gaussian_tensor(rng, s, 1.0);
  const HeadMixWeights mix = HeadMixWeights::near_identity(cfg.heads, rng);
  const HeadMixWeights* mp = uses_interaction(method) ? &mix : nullptr;
  {
    Meter meter;
    const Tensor out = attend(method, q, k, v, acfg, mp, &meter);
    rec.flops = meter.flops();
    rec.peak_bytes = meter.peak_bytes();
  }
  if (!timed) return rec;
  attend(method, q, k, v, acfg, mp);  // warm-up
  std::vector<double> ms;
  for (std::size_t r = 0; r < cfg.reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor out = attend(method, q, k, v, acfg, mp);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  double ss = 0.0;
  for (double x : ms) ss += (x - mean) * (x - mean);
  rec.wall_ms_mean = mean;
  rec.wall_ms_std = std::sqrt(ss / static_cast<double>(ms.size() - 1));
  std::sort(ms.begin(), ms.end());
  const std::size_t h = ms.size() / 2;
  rec.wall_ms_median = ms.size() % 2 ? ms[h] : 0.5 * (ms[h - 1] + ms[h]);
  rec.reps = cfg.reps;
  return rec;
}

std::vector<BenchRecord> run_scaling_bench(std::span<const Method> methods, std::span<const std::size_t> token_counts,
                                           const BenchConfig& cfg) {
  if (methods.empty() || token_counts.empty()) throw std::invalid_argument("bench: no methods or token counts");
  for (std::size_t n : token_counts) square_side(n, "token count");
  std::vector<BenchRecord> out;
  for (Method m : methods) {
    for (std::size_t n : token_counts) out.push_back(measure_cell(m, n, cfg, true));
  }
  return out;
}

CsvRow bench_csv_header() {
  return {"method", "N", "H", "d", "L", "flops", "peak_bytes", "wall_ms_mean", "wall_ms_std", "reps"};
}

CsvRow bench_csv_row(const BenchRecord& r) {
  CsvRow row{method_name(r.method), std::to_string(r.n), std::to_string(r.heads), std::to_string(r.head_dim),
             std::to_string(r.landmarks)};
  if (r.skipped) {
    row.insert(row.end(), {"skipped:cap", "", "", "", ""});
  } else {
    row.insert(row.end(), {std::to_string(r.flops), std::to_string(r.peak_bytes), format_number(r.wall_ms_mean),
                           format_number(r.wall_ms_std), std::to_string(r.reps)});
  }
  return row;
}

std::uint64_t closed_form_flops(Method method, std::size_t n, std::size_t heads, std::size_t head_dim,
                                std::size_t landmarks) {
  const std::uint64_t N = n, H = heads, L = landmarks, c = heads * head_dim;
  switch (method) {
    case Method::mhsa: return 4 * N * N * c + 6 * H * N * N;
    case Method::mhsa_ix: return 4 * N * N * c + 6 * H * N * N + 4 * H * H * N * N;
    case Method::decomp: return 8 * N * L * c + 12 * N * L * H + 2 * N * c + 2 * L * c;
    case Method::imhsa: return 8 * N * L * c + 12 * N * L * H + 2 * N * c + 2 * L * c + 8 * H * H * N * L;
  }
  throw std::logic_error("unreachable");
}

SlopeFit fit_loglog_slope(std::span<const double> n, std::span<const double> t) {
  if (n.size() != t.size()) throw std::invalid_argument("slope fit: size mismatch");
  if (n.size() < 4) throw std::invalid_argument("slope fit: needs at least 4 points, got " + std::to_string(n.size()));
  std::vector<double> x, y;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!(n[i] > 0.0) || !(t[i] > 0.0)) throw std::invalid_argument("slope fit: values must be positive");
    x.push_back(std::log(n[i]));
    y.push_back(std::log(t[i]));
  }
  const double k = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / k;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / k;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("slope fit: degenerate (all N equal)");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0.0 ? 1.0 : std::clamp(sxy * sxy / (sxx * syy), 0.0, 1.0);
  fit.points = x.size();
  return fit;
}

SlopeFit fit_method_slope(std::span<const BenchRecord> records, Method method, std::size_t min_n) {
  std::vector<double> n, t;
  for (const BenchRecord& r : records) {
    if (r.method == method && !r.skipped && r.n >= min_n) {
      n.push_back(static_cast<double>(r.n));
      t.push_back(r.wall_ms_median);
    }
  }
  return fit_loglog_slope(n, t);
}

}  // namespace imhsa
