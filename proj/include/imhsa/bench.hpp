#pragma once

// Scaling benchmark of the attention cores.
//
// Each cell times one method at one token count on caller-owned head stacks
// Q, K, V [H, N, d]; the QKV projection is shared by every method and is not
// part of the measurement. Flops and peak bytes come from one instrumented
// forward; wall time from `reps` further runs after one warm-up.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "imhsa/attention.hpp"
#include "imhsa/data.hpp"

namespace imhsa {

struct BenchConfig {
  std::size_t heads = 6;
  std::size_t head_dim = 64;
  std::size_t landmarks = 49;
  std::size_t reps = 5;
  /// Methods in `capped` are skipped for N above `cap`.
  std::size_t cap = 4096;
  std::set<Method> capped = {Method::mhsa_ix};
  std::uint64_t seed = 0;
};

struct BenchRecord {
  Method method = Method::imhsa;
  std::size_t n = 0, heads = 0, head_dim = 0, landmarks = 0;
  bool skipped = false;  // over the cap; only the shape fields are meaningful
  std::uint64_t flops = 0;
  std::uint64_t peak_bytes = 0;
  double wall_ms_mean = 0.0;
  double wall_ms_std = 0.0;
  double wall_ms_median = 0.0;
  std::size_t reps = 0;
};

/// Side length of a square token grid; throws when `n` is not a positive perfect square.
std::size_t square_side(std::size_t n, const char* what);

std::vector<BenchRecord> run_scaling_bench(std::span<const Method> methods, std::span<const std::size_t> token_counts,
                                           const BenchConfig& cfg);

/// Single-cell measurement without timing.
BenchRecord measure_cell(Method method, std::size_t n, const BenchConfig& cfg, bool timed);

CsvRow bench_csv_header();
CsvRow bench_csv_row(const BenchRecord& r);

/// Attention-core flops under the counting convention, c = H d:
///   mhsa     4 N^2 c + 6 H N^2            (+ 4 H^2 N^2 with interaction)
///   decomp   8 N L c + 12 N L H + 2 N c + 2 L c   (+ 8 H^2 N L with interaction)
std::uint64_t closed_form_flops(Method method, std::size_t n, std::size_t heads, std::size_t head_dim,
                                std::size_t landmarks);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t points = 0;
};

/// Least-squares fit of log(t) on log(n). Needs at least 4 points, not all n equal, all values positive.
SlopeFit fit_loglog_slope(std::span<const double> n, std::span<const double> t);

/// Fits median wall time of `method`'s non-skipped records with n >= min_n.
SlopeFit fit_method_slope(std::span<const BenchRecord> records, Method method, std::size_t min_n = 0);

}  // namespace imhsa
