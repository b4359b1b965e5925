#include "imhsa/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>

#include "imhsa/ops.hpp"

namespace imhsa {

namespace {

constexpr DType f64 = DType::f64;

Tensor randn(Rng& rng, Shape s, double stddev = 1.0, double mean = 0.0) {
  return gaussian_tensor(rng, std::move(s), stddev, f64, mean);
}

// sum(out * R) with R drawn from a seed fixed per case, so every evaluation sees the same weights.
Var weighted_sum(Tape& t, Var out, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, t.constant(randn(rng, out.shape()))));
}

}  // namespace

ToyIViTConfig gradcheck_model_config() {
  ToyIViTConfig cfg;
  cfg.stages = {{MixerKind::pool, 1, 8, 1}, {MixerKind::attention, 1, 12, 2}};
  cfg.image_h = 6;
  cfg.image_w = 6;
  cfg.in_channels = 4;
  cfg.patch = 1;
  cfg.mlp_ratio = 2.0;
  cfg.landmark_h = 2;
  cfg.landmark_w = 2;
  cfg.num_classes = 3;
  cfg.dtype = f64;
  return cfg;
}

std::vector<SuiteResult> run_gradcheck_suite(const GradCheckOptions& options, std::size_t instances) {
  std::vector<SuiteResult> results;
  Rng rng(options.seed + 1);
  std::uint64_t case_seed = options.seed * 1000 + 17;
  instances = std::max<std::size_t>(1, instances);

  // Runs `body` on `instances` fresh draws of `make` and keeps the worst error per parameter.
  auto check = [&](const std::string& name, const std::function<NamedTensors(Rng&)>& make,
                   const std::function<Var(Tape&, std::span<const Var>)>& body) {
    SuiteResult res{name, {}};
    for (std::size_t i = 0; i < instances; ++i) {
      const std::uint64_t s = ++case_seed;
      const ScalarFn f = [&body, s](Tape& t, std::span<const Var> v) {
        Var out = body(t, v);
        return out.value().size() == 1 ? out : weighted_sum(t, out, s);
      };
      GradCheckOptions o = options;
      o.seed = s;
      const GradReport r = grad_check(f, make(rng), o);
      if (res.report.params.empty()) {
        res.report = r;
        continue;
      }
      for (std::size_t p = 0; p < r.params.size(); ++p) {
        ParamReport& acc = res.report.params[p];
        const std::size_t coords = acc.coords_checked + r.params[p].coords_checked;
        const bool pass = acc.pass && r.params[p].pass;
        if (r.params[p].max_rel_error > acc.max_rel_error) acc = r.params[p];
        acc.coords_checked = coords;
        acc.pass = pass;
      }
    }
    results.push_back(std::move(res));
  };
  auto two = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return NamedTensors{{"a", randn(r, a)}, {"b", randn(r, b)}}; };
  };
  auto one = [](Shape a, double stddev = 1.0) {
    return [a, stddev](Rng& r) { return NamedTensors{{"x", randn(r, a, stddev)}}; };
  };

  check("add", two({3, 4}, {3, 4}), [](Tape&, std::span<const Var> v) { return ad::add(v[0], v[1]); });
  check("sub", two({3, 4}, {3, 4}), [](Tape&, std::span<const Var> v) { return ad::sub(v[0], v[1]); });
  check("mul", two({3, 4}, {3, 4}), [](Tape&, std::span<const Var> v) { return ad::mul(v[0], v[1]); });
  check("scale", one({3, 4}), [](Tape&, std::span<const Var> v) { return ad::scale(v[0], -0.7); });
  check("reuse", one({2, 3}), [](Tape&, std::span<const Var> v) { return ad::mul(v[0], ad::add(v[0], v[0])); });
  check("matmul", two({2, 3, 4}, {2, 4, 5}), [](Tape&, std::span<const Var> v) { return ad::matmul(v[0], v[1]); });
  check("matmul_shared", two({2, 3, 4}, {4, 5}),
        [](Tape&, std::span<const Var> v) { return ad::matmul(v[0], v[1]); });
  check("matmul_nt", two({2, 3, 4}, {2, 5, 4}),
        [](Tape&, std::span<const Var> v) { return ad::matmul_nt(v[0], v[1]); });
  check("matmul_nt_shared", two({2, 3, 4}, {5, 4}),
        [](Tape&, std::span<const Var> v) { return ad::matmul_nt(v[0], v[1]); });
  check("softmax", one({3, 5}), [](Tape&, std::span<const Var> v) { return ad::softmax(v[0]); });
  check(
      "layernorm",
      [](Rng& r) {
        return NamedTensors{{"x", randn(r, {2, 3, 6})}, {"gamma", randn(r, {6}, 0.3, 1.0)}, {"beta", randn(r, {6}, 0.3)}};
      },
      [](Tape&, std::span<const Var> v) { return ad::layernorm(v[0], v[1], v[2], 1e-5); });
  check("gelu", one({4, 5}, 1.0), [](Tape&, std::span<const Var> v) { return ad::gelu(v[0]); });
  check("add_bias", two({2, 3, 4}, {4}), [](Tape&, std::span<const Var> v) { return ad::add_bias(v[0], v[1]); });
  check("transpose", one({2, 3, 4}), [](Tape&, std::span<const Var> v) { return ad::transpose_last2(v[0]); });
  check("concat", two({2, 3, 2}, {2, 3, 5}), [](Tape&, std::span<const Var> v) { return ad::concat_lastdim(v); });
  check("reshape", one({2, 6}), [](Tape&, std::span<const Var> v) { return ad::reshape(v[0], {3, 4}); });
  check("adaptive_pool2d", one({2, 5, 7, 3}),
        [](Tape&, std::span<const Var> v) { return ad::adaptive_avg_pool2d(v[0], 2, 3); });
  check("adaptive_pool_tokens", one({2, 15, 3}),
        [](Tape&, std::span<const Var> v) { return ad::adaptive_avg_pool_tokens(v[0], 3, 5, 2, 2); });
  check("avg_pool3x3", one({2, 4, 5, 3}), [](Tape&, std::span<const Var> v) { return ad::avg_pool3x3(v[0]); });
  check("split_heads", one({2, 3, 6}), [](Tape&, std::span<const Var> v) { return ad::split_heads(v[0], 3); });
  check("merge_heads", one({2, 3, 4, 2}), [](Tape&, std::span<const Var> v) { return ad::merge_heads(v[0]); });
  check("head_mix", two({3, 3}, {2, 3, 4, 5}), [](Tape&, std::span<const Var> v) { return ad::head_mix(v[0], v[1]); });
  check("mean_axis", one({2, 3, 4}), [](Tape&, std::span<const Var> v) { return ad::mean_axis(v[0], 1); });
  check("sum", one({3, 4}), [](Tape&, std::span<const Var> v) { return ad::sum(v[0]); });
  {
    const std::vector<std::size_t> labels{2, 0, 1, 2};
    check("cross_entropy", one({4, 3}),
          [labels](Tape&, std::span<const Var> v) { return ad::cross_entropy(v[0], labels); });
  }

  const AttnConfig acfg = AttnConfig::make(2, 3, 3, 4, 2, 2);
  for (Method m : {Method::mhsa, Method::mhsa_ix, Method::decomp, Method::imhsa}) {
    auto make = [m, acfg](Rng& r) {
      const Shape s{2, 2, acfg.tokens(), acfg.head_dim};
      NamedTensors ps{{"q", randn(r, s)}, {"k", randn(r, s)}, {"v", randn(r, s)}};
      if (!uses_interaction(m)) return ps;
      for (const char* w : {"w1_q", "w2_q", "w1_k", "w2_k"}) {
        Tensor mix = randn(r, {2, 2}, 0.3);
        for (std::size_t i = 0; i < 2; ++i) mix.set(i * 2 + i, mix.at(i * 2 + i) + 1.0);
        ps.emplace_back(w, std::move(mix));
      }
      return ps;
    };
    check(std::string("attend_") + method_name(m), make, [m, acfg](Tape&, std::span<const Var> v) {
      if (v.size() == 3) return ad::attend(m, v[0], v[1], v[2], acfg, nullptr);
      const ad::MixVars mix{v[3], v[4], v[5], v[6]};
      return ad::attend(m, v[0], v[1], v[2], acfg, &mix);
    });
  }

  {
    // Well-conditioned weights so every gradient is far above finite-difference noise.
    const ToyIViTConfig cfg = gradcheck_model_config();
    ModelParams params = build_toy_ivit(cfg, options.seed);
    for (auto& [name, t] : params.tensors) t = add(t, randn(rng, t.shape(), 0.3));
    const Tensor input = randn(rng, {2, cfg.image_h, cfg.image_w, cfg.in_channels});
    const std::vector<std::size_t> labels{1, 2};
    const ScalarFn f = [&](Tape& t, std::span<const Var> v) {
      return ad::cross_entropy(forward_graph(params, t, v, input), labels);
    };
    results.push_back({"toy_model", grad_check(f, params.tensors, options)});
  }
  return results;
}

}  // namespace imhsa
