#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "imhsa/attention.hpp"
#include "oracles.hpp"

using namespace imhsa;

namespace {

struct Instance {
  AttnConfig cfg;
  Tensor z;
  QKVWeights w;
  HeadMixWeights mix;
};

Instance make_instance(Rng& rng, std::size_t heads, std::size_t d, std::size_t gh, std::size_t gw, std::size_t lh,
                       std::size_t lw, DType dt, double mix_sigma = 0.3) {
  Instance in{AttnConfig::make(heads, d, gh, gw, lh, lw), {}, {}, {}};
  in.z = gaussian_tensor(rng, {gh * gw, heads * d}, 1.0, dt);
  in.w = QKVWeights::random(heads * d, rng, 0.5, dt);
  in.mix = HeadMixWeights::near_identity(heads, rng, mix_sigma, dt);
  return in;
}

oracle::Mix to_oracle(const HeadMixWeights& m) {
  return {m.w1_q.to_vector(), m.w2_q.to_vector(), m.w1_k.to_vector(), m.w2_k.to_vector()};
}

double row_sum(const Tensor& t, std::size_t row, std::size_t cols) {
  double s = 0.0;
  for (std::size_t j = 0; j < cols; ++j) s += t.at(row * cols + j);
  return s;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("config validation") {
    CHECK_THROWS_AS(AttnConfig::make(0, 4, 2, 2).validate(), ShapeError);
    AttnConfig c = AttnConfig::make(2, 4, 3, 3, 2, 2);
    CHECK(c.channels() == 8);
    CHECK(c.tokens() == 9);
    CHECK(c.landmarks() == 4);
    CHECK(c.scale() == doctest::Approx(0.5));
    c.landmark_h = 4;
    CHECK_THROWS_AS(c.validate(), ShapeError);
    // Default 7x7 landmarks clamp to small grids.
    CHECK(AttnConfig::make(1, 2, 3, 5).landmarks() == 15);
  }

  TEST_CASE("method names") {
    for (Method m : {Method::mhsa, Method::mhsa_ix, Method::decomp, Method::imhsa})
      CHECK(parse_method(method_name(m)) == m);
    CHECK(std::string(method_name(Method::mhsa_ix)) == "mhsa-ix");
    CHECK_THROWS(parse_method("linear"));
    CHECK(is_quadratic(Method::mhsa_ix));
    CHECK_FALSE(is_quadratic(Method::imhsa));
    CHECK(uses_interaction(Method::imhsa));
    CHECK_FALSE(uses_interaction(Method::decomp));
  }

  TEST_CASE("project_qkv") {
    Rng rng(1);
    const Tensor z = gaussian_tensor(rng, {3, 4}, 1.0, DType::f64);
    const QKV id = project_qkv(z, QKVWeights::identity(4, DType::f64));
    CHECK(bit_equal(id.q, z));
    CHECK(bit_equal(id.k, z));
    CHECK(bit_equal(id.v, z));
    const QKVWeights w = QKVWeights::random(4, rng, 1.0, DType::f64);
    const QKV zero = project_qkv(Tensor::filled({3, 4}, 0.0, DType::f64), w);
    for (double v : zero.v.to_vector()) CHECK(v == 0.0);
    const QKV p = project_qkv(z, w);
    const Tensor* got[] = {&p.q, &p.k, &p.v};
    const Tensor* ws[] = {&w.wq, &w.wk, &w.wv};
    for (int i = 0; i < 3; ++i) {
      const auto ref = oracle::project(z.to_vector(), ws[i]->to_vector(), 3, 4);
      CHECK(oracle::rel_err(got[i]->to_vector(), ref) < 1e-14);
    }
    CHECK_THROWS_AS(project_qkv(Tensor({3, 5}, DType::f64), w), ShapeError);
  }

  TEST_CASE("split and merge heads") {
    Rng rng(2);
    const Tensor x = gaussian_tensor(rng, {5, 6}, 1.0);
    const Tensor one = split_heads(x, 1);
    CHECK(one.shape() == Shape{1, 5, 6});
    CHECK(one.to_vector() == x.to_vector());
    for (std::size_t h : {1, 2, 3, 6}) CHECK(bit_equal(merge_heads(split_heads(x, h)), x));
    const Tensor row = Tensor::from({1, 4}, {1, 2, 3, 4});
    const Tensor s = split_heads(row, 2);
    CHECK(s.shape() == Shape{2, 1, 2});
    CHECK(s.to_vector() == std::vector<double>{1, 2, 3, 4});
    const Tensor two_rows = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(split_heads(two_rows, 2).to_vector() == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});
    CHECK_THROWS_AS(split_heads(x, 4), ShapeError);
  }

  TEST_CASE("mhsa_forward examples") {
    Rng rng(3);
    {
      const Instance in = make_instance(rng, 2, 2, 1, 1, 1, 1, DType::f64);
      const Tensor out = mhsa_forward(in.z, in.w, in.cfg);
      CHECK(rel_error(out, project_qkv(in.z, in.w).v) < 1e-15);
    }
    {
      AttnConfig cfg = AttnConfig::make(2, 2, 2, 3);
      const Tensor row = gaussian_tensor(rng, {1, 4}, 1.0, DType::f64);
      Tensor z({6, 4}, DType::f64);
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t e = 0; e < 4; ++e) z.set(i * 4 + e, row.at(e));
      const QKVWeights w = QKVWeights::random(4, rng, 0.5, DType::f64);
      const Tensor out = mhsa_forward(z, w, cfg);
      const Tensor vrow = project_qkv(row, w).v;
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t e = 0; e < 4; ++e) CHECK(out.at(i * 4 + e) == doctest::Approx(vrow.at(e)).epsilon(1e-12));
    }
    {
      const Instance in = make_instance(rng, 2, 2, 1, 5, 1, 1, DType::f64);
      const auto ref = oracle::mhsa(in.z.to_vector(), in.w.wq.to_vector(), in.w.wk.to_vector(),
                                    in.w.wv.to_vector(), 5, 2, 2, nullptr);
      CHECK(oracle::rel_err(mhsa_forward(in.z, in.w, in.cfg).to_vector(), ref) < 1e-13);
    }
  }

  TEST_CASE("mhsa is equivariant to token permutations") {
    Rng rng(4);
    const Instance in = make_instance(rng, 2, 3, 3, 3, 3, 3, DType::f64);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin() + 2, perm.end());
    Tensor zp(in.z.shape(), DType::f64);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t e = 0; e < 6; ++e) zp.set(i * 6 + e, in.z.at(perm[i] * 6 + e));
    const Tensor out = mhsa_forward(in.z, in.w, in.cfg);
    const Tensor outp = mhsa_forward(zp, in.w, in.cfg);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t e = 0; e < 6; ++e) CHECK(outp.at(i * 6 + e) == doctest::Approx(out.at(perm[i] * 6 + e)));
    // Landmarks depend on grid position, so decomposed attention is not.
    const Tensor d = decomposed_forward(in.z, in.w, AttnConfig::make(2, 3, 3, 3, 2, 2));
    const Tensor dp = decomposed_forward(zp, in.w, AttnConfig::make(2, 3, 3, 3, 2, 2));
    double diff = 0.0;
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t e = 0; e < 6; ++e) diff = std::max(diff, std::abs(dp.at(i * 6 + e) - d.at(perm[i] * 6 + e)));
    CHECK(diff > 1e-6);
  }

  TEST_CASE("interactive mhsa") {
    Rng rng(5);
    const Instance in = make_instance(rng, 3, 2, 2, 3, 1, 1, DType::f32);
    const HeadMixWeights id = HeadMixWeights::identity(3, DType::f32);
    CHECK(rel_error(mhsa_interactive_forward(in.z, in.w, id, in.cfg), mhsa_forward(in.z, in.w, in.cfg)) <= 1e-6);

    const Instance d = make_instance(rng, 3, 2, 2, 3, 1, 1, DType::f64);
    const oracle::Mix om = to_oracle(d.mix);
    const auto ref = oracle::mhsa(d.z.to_vector(), d.w.wq.to_vector(), d.w.wk.to_vector(), d.w.wv.to_vector(), 6,
                                  3, 2, &om);
    CHECK(oracle::rel_err(mhsa_interactive_forward(d.z, d.w, d.mix, d.cfg).to_vector(), ref) < 1e-13);
  }

  TEST_CASE("head permutation before the softmax permutes the attention heads") {
    Rng rng(6);
    const AttnConfig cfg = AttnConfig::make(3, 2, 2, 2);
    const Tensor q = gaussian_tensor(rng, {3, 4, 2}, 1.0, DType::f64);
    const Tensor k = gaussian_tensor(rng, {3, 4, 2}, 1.0, DType::f64);
    HeadMixWeights mix = HeadMixWeights::identity(3, DType::f64);
    const std::size_t p[] = {2, 0, 1};
    mix.w1_q = Tensor({3, 3}, DType::f64);
    for (std::size_t i = 0; i < 3; ++i) mix.w1_q.set(i * 3 + p[i], 1.0);
    const Tensor plain = full_attention(q, k, cfg, nullptr);
    const Tensor mixed = full_attention(q, k, cfg, &mix);
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t e = 0; e < 16; ++e) CHECK(mixed.at(h * 16 + e) == plain.at(p[h] * 16 + e));
  }

  TEST_CASE("averaging mix collapses heads") {
    Rng rng(7);
    const AttnConfig cfg = AttnConfig::make(2, 3, 2, 2);
    HeadMixWeights mix = HeadMixWeights::identity(2, DType::f64);
    mix.w1_q = Tensor::filled({2, 2}, 0.5, DType::f64);
    const Tensor a = full_attention(gaussian_tensor(rng, {2, 4, 3}, 1.0, DType::f64),
                                    gaussian_tensor(rng, {2, 4, 3}, 1.0, DType::f64), cfg, &mix);
    for (std::size_t e = 0; e < 16; ++e) CHECK(a.at(e) == a.at(16 + e));
  }

  TEST_CASE("compute_landmarks") {
    Rng rng(8);
    const AttnConfig full = AttnConfig::make(1, 2, 3, 4, 3, 4);
    const Tensor q = gaussian_tensor(rng, {3, 4, 2}, 1.0);
    const Tensor k = gaussian_tensor(rng, {3, 4, 2}, 1.0);
    const auto [ql, kl] = compute_landmarks(q, k, full);
    CHECK(ql.to_vector() == q.to_vector());
    CHECK(kl.to_vector() == k.to_vector());
    CHECK(ql.shape() == Shape{12, 2});

    const auto [cq, ck] = compute_landmarks(Tensor::filled({4, 4, 2}, 0.75), Tensor::filled({4, 4, 2}, -1.0),
                                            AttnConfig::make(1, 2, 4, 4, 2, 2));
    for (double v : cq.to_vector()) CHECK(v == doctest::Approx(0.75));
    for (double v : ck.to_vector()) CHECK(v == doctest::Approx(-1.0));

    std::vector<double> vals(16);
    std::iota(vals.begin(), vals.end(), 1.0);
    const Tensor g = Tensor::from({4, 4, 1}, vals);
    const auto [gq, gk] = compute_landmarks(g, g, AttnConfig::make(1, 1, 4, 4, 2, 2));
    CHECK(gq.to_vector() == std::vector<double>{3.5, 5.5, 11.5, 13.5});
  }

  TEST_CASE("decomposed_attention examples") {
    Rng rng(9);
    const AttnConfig cfg = AttnConfig::make(2, 2, 3, 3, 2, 2);
    const Tensor row = gaussian_tensor(rng, {4}, 1.0);
    Tensor same({9, 4});
    for (std::size_t i = 0; i < 36; ++i) same.set(i, row.at(i % 4));
    const Tensor grid = reshape(same, {3, 3, 4});
    const auto [ql, kl] = compute_landmarks(grid, grid, cfg);
    const DecomposedAttn u = decomposed_attention(same, same, ql, kl, cfg, nullptr);
    CHECK(u.a_q.shape() == Shape{2, 9, 4});
    CHECK(u.a_k.shape() == Shape{2, 4, 9});
    for (double v : u.a_q.to_vector()) CHECK(v == doctest::Approx(0.25));
    for (double v : u.a_k.to_vector()) CHECK(v == doctest::Approx(1.0 / 9.0));

    const AttnConfig one = AttnConfig::make(2, 2, 3, 3, 1, 1);
    const Tensor q = gaussian_tensor(rng, {9, 4}, 1.0), k = gaussian_tensor(rng, {9, 4}, 1.0);
    const auto [q1, k1] = compute_landmarks(reshape(q, {3, 3, 4}), reshape(k, {3, 3, 4}), one);
    for (double v : decomposed_attention(q, k, q1, k1, one, nullptr).a_q.to_vector()) CHECK(v == 1.0);

    const auto [q2, k2] = compute_landmarks(reshape(q, {3, 3, 4}), reshape(k, {3, 3, 4}), cfg);
    const DecomposedAttn plain = decomposed_attention(q, k, q2, k2, cfg, nullptr);
    const HeadMixWeights id = HeadMixWeights::identity(2);
    const DecomposedAttn ident = decomposed_attention(q, k, q2, k2, cfg, &id);
    CHECK(rel_error(ident.a_q, plain.a_q) <= 1e-6);
    CHECK(rel_error(ident.a_k, plain.a_k) <= 1e-6);
  }

  TEST_CASE("factor row sums equal W2 row sums") {
    Rng rng(10);
    const Instance in = make_instance(rng, 3, 2, 4, 4, 2, 2, DType::f64, 0.5);
    const QKV p = project_qkv(in.z, in.w);
    const auto [ql, kl] = compute_landmarks(reshape(p.q, {4, 4, 6}), reshape(p.k, {4, 4, 6}), in.cfg);
    const DecomposedAttn a = decomposed_attention(p.q, p.k, ql, kl, in.cfg, &in.mix);
    for (std::size_t h = 0; h < 3; ++h) {
      const double wq = row_sum(in.mix.w2_q, h, 3), wk = row_sum(in.mix.w2_k, h, 3);
      for (std::size_t r = 0; r < 16; ++r) CHECK(row_sum(a.a_q, h * 16 + r, 4) == doctest::Approx(wq).epsilon(1e-12));
      for (std::size_t r = 0; r < 4; ++r) CHECK(row_sum(a.a_k, h * 4 + r, 16) == doctest::Approx(wk).epsilon(1e-12));
    }
  }

  TEST_CASE("imhsa_forward matches the dense oracle") {
    Rng rng(11);
    for (DType dt : {DType::f32, DType::f64}) {
      const double tol = dt == DType::f32 ? 1e-5 : 1e-10;
      const Instance in = make_instance(rng, 2, 4, 5, 6, 2, 3, dt);
      const HeadMixWeights id = HeadMixWeights::identity(2, dt);
      CHECK(rel_error(imhsa_forward(in.z, in.w, id, in.cfg), dense_oracle_imhsa(in.z, in.w, &id, in.cfg)) <= tol);
      CHECK(rel_error(imhsa_forward(in.z, in.w, in.mix, in.cfg), dense_oracle_imhsa(in.z, in.w, &in.mix, in.cfg)) <=
            tol);
    }
  }

  TEST_CASE("imhsa_forward matches the loop oracle") {
    Rng rng(12);
    for (int it = 0; it < 10; ++it) {
      const std::size_t gh = 1 + rng.below(6), gw = 1 + rng.below(6);
      const std::size_t lh = 1 + rng.below(gh), lw = 1 + rng.below(gw);
      const Instance in = make_instance(rng, 1 + rng.below(3), 1 + rng.below(4), gh, gw, lh, lw, DType::f64);
      const oracle::Mix om = to_oracle(in.mix);
      const auto args = std::tuple{in.z.to_vector(), in.w.wq.to_vector(), in.w.wk.to_vector(), in.w.wv.to_vector()};
      const auto ref_mix = oracle::imhsa(std::get<0>(args), std::get<1>(args), std::get<2>(args), std::get<3>(args),
                                         gh, gw, in.cfg.num_heads, in.cfg.head_dim, lh, lw, &om);
      const auto ref = oracle::imhsa(std::get<0>(args), std::get<1>(args), std::get<2>(args), std::get<3>(args), gh,
                                     gw, in.cfg.num_heads, in.cfg.head_dim, lh, lw, nullptr);
      CHECK(oracle::rel_err(imhsa_forward(in.z, in.w, in.mix, in.cfg).to_vector(), ref_mix) < 1e-12);
      CHECK(oracle::rel_err(decomposed_forward(in.z, in.w, in.cfg).to_vector(), ref) < 1e-12);
    }
  }

  TEST_CASE("imhsa degenerate cases") {
    Rng rng(13);
    const Instance single = make_instance(rng, 2, 2, 1, 1, 1, 1, DType::f64);
    const HeadMixWeights id2 = HeadMixWeights::identity(2, DType::f64);
    CHECK(rel_error(imhsa_forward(single.z, single.w, id2, single.cfg), project_qkv(single.z, single.w).v) < 1e-14);

    const AttnConfig cfg = AttnConfig::make(2, 2, 3, 3, 2, 2);
    const Tensor row = gaussian_tensor(rng, {1, 4}, 1.0, DType::f64);
    Tensor z({9, 4}, DType::f64);
    for (std::size_t i = 0; i < 36; ++i) z.set(i, row.at(i % 4));
    const QKVWeights w = QKVWeights::random(4, rng, 0.5, DType::f64);
    const Tensor out = imhsa_forward(z, w, HeadMixWeights::identity(2, DType::f64), cfg);
    const Tensor vrow = project_qkv(row, w).v;
    for (std::size_t i = 0; i < 36; ++i) CHECK(out.at(i) == doctest::Approx(vrow.at(i % 4)).epsilon(1e-12));
  }

  TEST_CASE("dense oracle agrees with imhsa on 50 random instances") {
    Rng rng(14);
    double worst = 0.0;
    for (int it = 0; it < 50; ++it) {
      const std::size_t gh = 1 + rng.below(16), gw = 1 + rng.below(16);
      const std::size_t lh = 1 + rng.below(std::min<std::size_t>(gh, 4)), lw = 1 + rng.below(std::min<std::size_t>(gw, 4));
      const Instance in = make_instance(rng, 1 + rng.below(4), 1 + rng.below(8), gh, gw, lh, lw, DType::f32);
      worst = std::max(worst, rel_error(imhsa_forward(in.z, in.w, in.mix, in.cfg),
                                        dense_oracle_imhsa(in.z, in.w, &in.mix, in.cfg)));
    }
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("dense oracle properties") {
    Rng rng(15);
    const Instance in = make_instance(rng, 2, 3, 3, 4, 3, 4, DType::f64);
    const QKV p = project_qkv(in.z, in.w);
    const auto [ql, kl] = compute_landmarks(reshape(p.q, {3, 4, 6}), reshape(p.k, {3, 4, 6}), in.cfg);
    const DecomposedAttn a = decomposed_attention(p.q, p.k, ql, kl, in.cfg, nullptr);
    const Tensor prod = matmul(a.a_q, a.a_k);
    for (std::size_t r = 0; r < 24; ++r) CHECK(row_sum(prod, r, 12) == doctest::Approx(1.0).epsilon(1e-12));

    QKVWeights zero_v = in.w;
    zero_v.wv = Tensor::filled({6, 6}, 0.0, DType::f64);
    for (double v : dense_oracle_imhsa(in.z, zero_v, &in.mix, in.cfg).to_vector()) CHECK(v == 0.0);

    const AttnConfig big = AttnConfig::make(1, 1, 65, 64, 1, 1);
    CHECK_THROWS(dense_oracle_imhsa(Tensor({65 * 64, 1}), QKVWeights::identity(1), nullptr, big));
  }

  TEST_CASE("imhsa never materializes a token-by-token matrix") {
    Rng rng(16);
    const std::size_t h = 2, d = 8, side = 32, n = side * side;
    const AttnConfig cfg = AttnConfig::make(h, d, side, side, 4, 4);
    const Tensor q = gaussian_tensor(rng, {h, n, d}, 1.0);
    const Tensor k = gaussian_tensor(rng, {h, n, d}, 1.0);
    const Tensor v = gaussian_tensor(rng, {h, n, d}, 1.0);
    const HeadMixWeights mix = HeadMixWeights::near_identity(h, rng);
    Meter m;
    const Tensor out = imhsa_attend(q, k, v, cfg, &mix, &m);
    const std::size_t hnl = h * n * cfg.landmarks() * 4;
    CHECK(m.largest_allocation() <= std::max(hnl, out.bytes()));
    CHECK(m.largest_allocation() < n * n * 4);
    CHECK(m.peak_bytes() <= 3 * std::max(hnl, out.bytes()));

    Meter mq;
    mhsa_attend(q, k, v, cfg, nullptr, &mq);
    CHECK(mq.largest_allocation() >= h * n * n * 4);
  }

  TEST_CASE("head diagnostics") {
    CHECK(head_variance(Tensor::from({1, 2, 2}, {1, 2, 3, 4})) == 0.0);
    CHECK(head_variance(Tensor::from({2, 1, 2}, {1, 2, 1, 2})) == 0.0);
    CHECK(head_variance(Tensor::from({2, 2, 1}, {0.5, -1, 2.5, 1})) == doctest::Approx(1.0));

    CHECK(cross_head_similarity(Tensor::from({2, 1, 2}, {0.3, 0.4, 0.3, 0.4})) == doctest::Approx(1.0));
    CHECK(cross_head_similarity(Tensor::from({2, 1, 2}, {1, 0, 0, 1})) == doctest::Approx(0.0));
    CHECK(cross_head_similarity(Tensor::from({3, 1, 2}, {1, 0, 1, 0, 0, 1})) == doctest::Approx(1.0 / 3.0));
  }

  TEST_CASE("heatmap pixels") {
    for (auto p : heatmap_pixels(Tensor::filled({2, 3}, 0.4))) CHECK(p == 0);
    CHECK(heatmap_pixels(Tensor::from({1, 2}, {0, 1})) == std::vector<std::uint8_t>{0, 255});
    CHECK(heatmap_pixels(Tensor::from({2, 2}, {0, 0.5, 0.5, 1})) == std::vector<std::uint8_t>{0, 127, 127, 255});
    CHECK_THROWS(heatmap_pixels(Tensor({2, 2, 2})));
  }

  TEST_CASE("heatmap export writes a binary PGM") {
    const auto path = std::filesystem::temp_directory_path() / "imhsa_test_heatmap.pgm";
    export_attention_heatmap(Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5}), path);
    std::ifstream in(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 3);
    CHECK(h == 2);
    CHECK(maxval == 255);
    in.get();
    std::vector<unsigned char> px(6);
    in.read(reinterpret_cast<char*>(px.data()), 6);
    CHECK(in.gcount() == 6);
    CHECK(px == std::vector<unsigned char>{0, 51, 102, 153, 204, 255});
    CHECK(in.peek() == std::char_traits<char>::eof());
    std::filesystem::remove(path);
  }
}
