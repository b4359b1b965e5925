#include <cmath>
#include <vector>

#include "doctest.h"
#include "imhsa/autodiff.hpp"
#include "imhsa/gradcheck_suite.hpp"
#include "imhsa/ops.hpp"

using namespace imhsa;

namespace {

constexpr DType f64 = DType::f64;

Tensor randn(Rng& rng, Shape s, double stddev = 1.0) { return gaussian_tensor(rng, std::move(s), stddev, f64); }

// Central difference of a scalar function of one tensor, coordinate by coordinate.
template <typename F>
std::vector<double> numeric_grad(F f, const Tensor& x, double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor p = x, m = x;
    p.set(i, x.at(i) + eps);
    m.set(i, x.at(i) - eps);
    g[i] = (f(p) - f(m)) / (2 * eps);
  }
  return g;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("sum gives all-ones gradient") {
    Rng rng(1);
    Tape t;
    const Var x = t.leaf(randn(rng, {3, 4}));
    t.backward(ad::sum(x));
    for (double g : t.grad(x).to_vector()) CHECK(g == 1.0);
  }

  TEST_CASE("sum of matmul: dA = ones B^T") {
    Rng rng(2);
    const Tensor a = randn(rng, {3, 4}), b = randn(rng, {4, 5});
    Tape t;
    const Var va = t.leaf(a), vb = t.leaf(b);
    t.backward(ad::sum(ad::matmul(va, vb)));
    const Tensor expected = matmul(Tensor::filled({3, 5}, 1.0, f64), transpose_last2(b));
    CHECK(max_abs_diff(t.grad(va), expected) < 1e-14);
    const auto num = numeric_grad([&](const Tensor& x) { return sum_all(matmul(x, b)); }, a);
    const Tensor ga = t.grad(va);
    for (std::size_t i = 0; i < num.size(); ++i) CHECK(ga.at(i) == doctest::Approx(num[i]).epsilon(1e-8));
    // dB = A^T ones.
    CHECK(max_abs_diff(t.grad(vb), matmul(transpose_last2(a), Tensor::filled({3, 5}, 1.0, f64))) < 1e-14);
  }

  TEST_CASE("sum of softmax has zero gradient") {
    Rng rng(3);
    Tape t;
    const Var x = t.leaf(randn(rng, {4, 6}, 3.0));
    t.backward(ad::sum(ad::softmax(x)));
    for (double g : t.grad(x).to_vector()) CHECK(std::abs(g) < 1e-15);
  }

  TEST_CASE("sum of squares at [1, 2, 3]") {
    const Tensor x = Tensor::from({3}, {1, 2, 3}, f64);
    Tape t;
    const Var v = t.leaf(x);
    t.backward(ad::sum(ad::mul(v, v)));
    CHECK(t.grad(v).to_vector() == std::vector<double>{2, 4, 6});
    const auto num = numeric_grad([](const Tensor& p) { return sum_all(mul(p, p)); }, x);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(num[i] - 2.0 * (i + 1)) < 1e-9);

    const ScalarFn f = [](Tape&, std::span<const Var> p) { return ad::sum(ad::mul(p[0], p[0])); };
    const GradReport r = grad_check(f, {{"x", x}});
    CHECK(r.pass());
    CHECK(r.params[0].coords_checked == 3);
    CHECK(r.max_rel_error() < 1e-9);
  }

  TEST_CASE("constant function has zero gradients") {
    Rng rng(4);
    const Tensor x = randn(rng, {2, 3});
    const ScalarFn f = [](Tape& t, std::span<const Var>) { return t.constant(Tensor::filled({1}, 4.2, f64)); };
    const GradReport r = grad_check(f, {{"x", x}});
    CHECK(r.pass());
    CHECK(r.max_rel_error() == 0.0);
    Tape t;
    const Var v = t.leaf(x);
    const Var c = t.constant(Tensor::filled({1}, 1.0, f64));
    t.backward(c);
    CHECK_FALSE(t.has_grad(v));
    for (double g : t.grad(v).to_vector()) CHECK(g == 0.0);
  }

  TEST_CASE("accumulation is additive") {
    Rng rng(5);
    const Tensor x = randn(rng, {5});
    Tape t;
    const Var v = t.leaf(x);
    t.backward(ad::sum(ad::add(v, v)));
    for (double g : t.grad(v).to_vector()) CHECK(g == 2.0);

    Tape t2;
    const Var w = t2.leaf(x);
    t2.backward(ad::sum(ad::mul(w, w)));
    CHECK(max_abs_diff(t2.grad(w), scale(x, 2.0)) < 1e-15);

    // Value consumed by two separate branches.
    Tape t3;
    const Var u = t3.leaf(x);
    t3.backward(ad::add(ad::sum(ad::scale(u, 3.0)), ad::sum(ad::scale(u, -0.5))));
    for (double g : t3.grad(u).to_vector()) CHECK(g == doctest::Approx(2.5));
  }

  TEST_CASE("repeated backward gives identical gradients and keeps values") {
    Rng rng(6);
    Tape t;
    const Var a = t.leaf(randn(rng, {2, 3, 4}));
    const Var b = t.leaf(randn(rng, {4, 3}));
    const Var g = t.leaf(randn(rng, {3}));
    const Var beta = t.leaf(randn(rng, {3}));
    const Var y = ad::gelu(ad::layernorm(ad::matmul(a, b), g, beta));
    const Var loss = ad::sum(ad::mul(ad::softmax(y), y));
    const Tensor before = y.value();
    t.backward(loss);
    const Tensor ga = t.grad(a), gb = t.grad(b);
    t.backward(loss);
    CHECK(bit_equal(t.grad(a), ga));
    CHECK(bit_equal(t.grad(b), gb));
    CHECK(bit_equal(y.value(), before));
  }

  TEST_CASE("tape errors") {
    Tape t;
    const Var x = t.leaf(Tensor::filled({2, 2}, 1.0, f64));
    CHECK_THROWS_AS(t.backward(x), ShapeError);
    Tape other;
    const Var y = other.leaf(Tensor::filled({2, 2}, 1.0, f64));
    CHECK_THROWS_AS(ad::add(x, y), ShapeError);
    CHECK_THROWS_AS(t.grad(y), ShapeError);
    Tape eval(false);
    const Var z = eval.leaf(Tensor::filled({1}, 1.0, f64));
    CHECK_THROWS(eval.backward(ad::sum(z)));
    const std::size_t labels[] = {3};
    CHECK_THROWS(ad::cross_entropy(t.leaf(Tensor::filled({1, 3}, 0.0, f64)), labels));
  }

  TEST_CASE("cross entropy of uniform logits is ln k") {
    Tape t;
    const Var logits = t.leaf(Tensor::filled({4, 5}, 0.3, f64));
    const std::size_t labels[] = {0, 1, 2, 4};
    const Var loss = ad::cross_entropy(logits, labels);
    CHECK(loss.value().at(0) == doctest::Approx(std::log(5.0)));
    t.backward(loss);
    const Tensor g = t.grad(logits);
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t k = 0; k < 5; ++k)
        CHECK(g.at(b * 5 + k) == doctest::Approx((0.2 - (k == labels[b] ? 1.0 : 0.0)) / 4.0));
  }

  TEST_CASE("taped attention matches the kernels") {
    Rng rng(7);
    const AttnConfig cfg = AttnConfig::make(2, 3, 3, 4, 2, 2);
    const Tensor q = randn(rng, {2, 12, 3}), k = randn(rng, {2, 12, 3}), v = randn(rng, {2, 12, 3});
    const HeadMixWeights mix = HeadMixWeights::near_identity(2, rng, 0.3, f64);
    for (Method m : {Method::mhsa, Method::mhsa_ix, Method::decomp, Method::imhsa}) {
      Tape t;
      const ad::MixVars mv{t.leaf(mix.w1_q), t.leaf(mix.w2_q), t.leaf(mix.w1_k), t.leaf(mix.w2_k)};
      ad::AttnProbe probe;
      const Var out = ad::attend(m, t.leaf(q), t.leaf(k), t.leaf(v), cfg, uses_interaction(m) ? &mv : nullptr, &probe);
      CHECK(max_abs_diff(out.value(), attend(m, q, k, v, cfg, &mix)) < 1e-12);
      if (is_quadratic(m)) {
        CHECK(probe.full.shape() == Shape{2, 12, 12});
      } else {
        CHECK(probe.a_q.shape() == Shape{2, 12, 4});
        CHECK(probe.a_k.shape() == Shape{2, 4, 12});
      }
    }
  }

  TEST_CASE("imhsa layer with squared-error loss passes the gradient check") {
    Rng rng(8);
    const AttnConfig cfg = AttnConfig::make(2, 2, 3, 3, 2, 2);
    const Tensor target = randn(rng, {9, 4});
    NamedTensors params{{"z", randn(rng, {9, 4})},         {"wq", randn(rng, {4, 4}, 0.5)},
                        {"wk", randn(rng, {4, 4}, 0.5)},    {"wv", randn(rng, {4, 4}, 0.5)}};
    const HeadMixWeights mix = HeadMixWeights::near_identity(2, rng, 0.3, f64);
    params.emplace_back("w1_q", mix.w1_q);
    params.emplace_back("w2_q", mix.w2_q);
    params.emplace_back("w1_k", mix.w1_k);
    params.emplace_back("w2_k", mix.w2_k);
    const ScalarFn f = [&](Tape& t, std::span<const Var> p) {
      const Var q = ad::split_heads(ad::matmul_nt(p[0], p[1]), 2);
      const Var k = ad::split_heads(ad::matmul_nt(p[0], p[2]), 2);
      const Var v = ad::split_heads(ad::matmul_nt(p[0], p[3]), 2);
      const ad::MixVars mv{p[4], p[5], p[6], p[7]};
      const Var out = ad::merge_heads(ad::attend(Method::imhsa, q, k, v, cfg, &mv));
      const Var diff = ad::sub(out, t.constant(target));
      return ad::sum(ad::mul(diff, diff));
    };
    const GradReport r = grad_check(f, params, {.eps = 1e-5, .tol = 1e-4});
    for (const auto& p : r.params) CHECK_MESSAGE(p.pass, p.name << " " << p.max_rel_error);
    CHECK(r.max_rel_error() < 1e-4);
  }

  TEST_CASE("grad_check samples coordinates on large tensors") {
    Rng rng(9);
    const ScalarFn f = [](Tape&, std::span<const Var> p) { return ad::sum(ad::mul(p[0], p[0])); };
    const GradReport r = grad_check(f, {{"x", randn(rng, {101, 100})}}, {.samples = 16});
    CHECK(r.params[0].coords_checked == 16);
    CHECK(r.pass());
    CHECK_THROWS(grad_check(f, {{"x", Tensor::filled({2}, 1.0)}}));
  }

  TEST_CASE("grad_check flags a wrong adjoint") {
    const ScalarFn f = [](Tape& t, std::span<const Var> p) {
      const Var x = p[0];
      // Forward is 3x, adjoint claims 2.
      const Var y = t.record("bad", scale(x.value(), 3.0), std::span<const Var>(&x, 1),
                             [](const Tape&, const Tensor&, const Tensor& g) {
                               return std::vector<std::optional<Tensor>>{scale(g, 2.0)};
                             });
      return ad::sum(y);
    };
    const GradReport r = grad_check(f, {{"x", Tensor::from({2}, {0.5, -1.0}, f64)}});
    CHECK_FALSE(r.pass());
    CHECK(r.params[0].worst_numeric == doctest::Approx(3.0));
    CHECK(r.params[0].worst_analytic == doctest::Approx(2.0));
  }

  TEST_CASE("gradient suite over every op, the attention cores and the toy model") {
    GradCheckOptions opt;
    opt.seed = kGradSuiteSeed;
    const auto results = run_gradcheck_suite(opt);
    CHECK(results.size() >= 30);
    for (const auto& r : results)
      for (const auto& p : r.report.params)
        CHECK_MESSAGE(p.pass, r.name << "." << p.name << " rel err " << p.max_rel_error);
    bool has_model = false;
    for (const auto& r : results) has_model |= r.name == "toy_model";
    CHECK(has_model);
  }
}
