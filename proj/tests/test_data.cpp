#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "imhsa/data.hpp"
#include "imhsa/rng.hpp"

using namespace imhsa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "imhsa_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Record r: label r % 10, channel plane c filled with (r + 40 c + p) mod 256.
std::vector<std::uint8_t> cifar_bytes(std::size_t records) {
  std::vector<std::uint8_t> b;
  for (std::size_t r = 0; r < records; ++r) {
    b.push_back(static_cast<std::uint8_t>(r % 10));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) b.push_back(static_cast<std::uint8_t>((r + 40 * c + p) % 256));
  }
  return b;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("SplitMix64 reference outputs") {
    // Independent reference implementation (Python, arbitrary-precision ints masked to 64 bits).
    Rng zero(0);
    CHECK(zero.next() == 0xe220a8397b1dcdafULL);
    CHECK(zero.next() == 0x6e789e6aa1b965f4ULL);
    CHECK(zero.next() == 0x06c45d188009454fULL);
    Rng seven(7);
    CHECK(seven.next() == 7191089600892374487ULL);
    CHECK(seven.next() == 309689372594955804ULL);
    CHECK(seven.next() == 16616101746815609346ULL);
  }

  TEST_CASE("uniform and below") {
    Rng r(42);
    const double u1 = r.uniform(), u2 = r.uniform();
    CHECK(u1 == doctest::Approx(0.7415648787718233).epsilon(1e-15));
    CHECK(u2 == doctest::Approx(0.1599103928769201).epsilon(1e-15));
    Rng s(5);
    for (int i = 0; i < 1000; ++i) {
      const double u = s.uniform();
      CHECK((u >= 0.0 && u < 1.0));
      CHECK(s.below(7) < 7);
    }
  }

  TEST_CASE("gaussian: reference value, moments and determinism") {
    Rng r(42);
    CHECK(gaussian(r) == doctest::Approx(0.4147197504315306).epsilon(1e-14));
    Rng s(2024);
    double sum = 0.0, sq = 0.0;
    constexpr int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double g = gaussian(s);
      sum += g;
      sq += g * g;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 0.03);
    Rng a(9), b(9);
    for (int i = 0; i < 10; ++i) CHECK(gaussian(a) == gaussian(b));
  }

  TEST_CASE("synthetic batches") {
    Rng rng(1);
    const Batch b = gen_synth_batch(rng, 5);
    CHECK(b.inputs.shape() == Shape{5, 8, 8, 16});
    CHECK(b.labels.size() == 5);
    for (auto y : b.labels) CHECK(y < 4);
    CHECK_THROWS(gen_synth_batch(rng, 0));
  }

  TEST_CASE("noiseless tokens are prototypes and the vote is exact") {
    Rng rng(2);
    const Batch b = gen_synth_batch(rng, 200, SynthTask{0.0}, DType::f64);
    const Tensor protos = synth_prototypes();
    constexpr std::size_t per = 64 * 16;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 200; ++i) {
      Tensor sample({64, 16}, DType::f64);
      for (std::size_t e = 0; e < per; ++e) sample.set(e, b.inputs.at(i * per + e));
      for (std::size_t t = 0; t < 64; ++t) {
        int matches = 0;
        for (std::size_t p = 0; p < 4; ++p) {
          bool eq = true;
          for (std::size_t e = 0; e < 16; ++e) eq &= sample.at(t * 16 + e) == protos.at(p * 16 + e);
          matches += eq;
        }
        CHECK(matches == 1);
      }
      correct += nearest_prototype_vote(sample) == b.labels[i];
    }
    CHECK(correct == 200);
  }

  TEST_CASE("labels are uniform over classes") {
    Rng rng(3);
    std::vector<double> counts(4, 0.0);
    constexpr std::size_t n = 10000;
    for (std::size_t i = 0; i < n / 500; ++i)
      for (auto y : gen_synth_batch(rng, 500).labels) counts[y] += 1;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
    // Chi-squared, 3 degrees of freedom, p = 0.001.
    CHECK(chi2 < 16.266);
  }

  TEST_CASE("synthetic generation is a pure function of the seed") {
    Rng a(77), b(77);
    const Batch x = gen_synth_batch(a, 8), y = gen_synth_batch(b, 8);
    CHECK(bit_equal(x.inputs, y.inputs));
    CHECK(x.labels == y.labels);
  }

  TEST_CASE("CIFAR-10 reader") {
    const fs::path p = scratch("cifar.bin");
    write_bytes(p, cifar_bytes(3));
    const auto recs = read_cifar10_file(p);
    REQUIRE(recs.size() == 3);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(recs[r].label == r);
      REQUIRE(recs[r].pixels.size() == 3072);
      // Pixel (row 2, col 5) is plane offset 69; HWC index 69 * 3 + c.
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(recs[r].pixels[69 * 3 + c] == static_cast<float>((r + 40 * c + 69) % 256) / 255.0f);
    }
    const std::size_t idx[] = {2, 0};
    const Batch b = cifar_batch(recs, idx);
    CHECK(b.inputs.shape() == Shape{2, 32, 32, 3});
    CHECK(b.labels == std::vector<std::size_t>{2, 0});
    CHECK(b.inputs.at(5) == recs[2].pixels[5]);
  }

  TEST_CASE("CIFAR-10 reader rejects bad files") {
    auto bytes = cifar_bytes(2);
    bytes.pop_back();
    const fs::path p = scratch("truncated.bin");
    write_bytes(p, bytes);
    CHECK_THROWS(read_cifar10_file(p));
    write_bytes(p, {});
    CHECK_THROWS(read_cifar10_file(p));
    bytes = cifar_bytes(2);
    bytes[3073] = 10;
    write_bytes(p, bytes);
    CHECK_THROWS(read_cifar10_file(p));
    CHECK_THROWS(read_cifar10_file(scratch("missing.bin")));
    CHECK_THROWS(load_cifar10(scratch("no_such_dir")));
  }

  TEST_CASE("CIFAR-10 directory loader") {
    const fs::path dir = scratch("cifar_dir");
    fs::create_directories(dir);
    for (int i = 1; i <= 5; ++i) write_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), cifar_bytes(2));
    write_bytes(dir / "test_batch.bin", cifar_bytes(1));
    const CifarDataset ds = load_cifar10(dir);
    CHECK(ds.train.size() == 10);
    CHECK(ds.test.size() == 1);
  }

  TEST_CASE("config parsing") {
    const ConfigMap m = parse_config_text("heads = 4\n# c\nlr = 1e-3");
    CHECK(m == ConfigMap{{"heads", "4"}, {"lr", "1e-3"}});
    CHECK(parse_config_text("  a=1  \n\n   # x\nb = two words\n") == ConfigMap{{"a", "1"}, {"b", "two words"}});
    CHECK_THROWS(parse_config_text("heads 4"));
    CHECK_THROWS(parse_config_text("= 4"));
    CHECK_THROWS(parse_config_text("heads = 4", {"lr"}));
    CHECK_NOTHROW(parse_config_text("heads = 4", {"heads", "lr"}));
  }

  TEST_CASE("config round-trip") {
    const std::string canonical = serialize_config({{"b", "2"}, {"a", "x y"}});
    CHECK(canonical == "a = x y\nb = 2\n");
    CHECK(serialize_config(parse_config_text(canonical)) == canonical);
    const fs::path p = scratch("run.cfg");
    std::ofstream(p) << "# comment\nlr=0.5\n";
    const ConfigMap m = parse_config(p);
    CHECK(m.at("lr") == "0.5");
    std::ofstream(p) << serialize_config(m);
    CHECK(parse_config(p) == m);
    CHECK(read_text(p) == serialize_config(m));
  }

  TEST_CASE("CSV dialect") {
    const std::string text = to_csv({"a", "b"}, {{"1", "x"}, {"2.5", "y"}});
    CHECK(text == "a,b\n1,x\n2.5,y\n");
    CHECK_THROWS(to_csv({"a", "b"}, {{"1"}}));
    const fs::path p = scratch("t.csv");
    write_csv({"a", "b"}, {{"1", ""}}, p);
    const auto rows = read_csv(p);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1] == CsvRow{"1", ""});
    CHECK(format_number(0.5) == "0.5");
    CHECK(format_number(1.0 / 3.0, 4) == "0.3333");
  }

  TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(4);
    NamedTensors ts{{"embed.weight", gaussian_tensor(rng, {3, 4}, 1.0)},
                    {"head.bias", gaussian_tensor(rng, {5}, 1.0)},
                    {"mix", gaussian_tensor(rng, {2, 2, 2}, 1.0)}};
    const fs::path p = scratch("model.ckpt");
    write_checkpoint(ts, p);
    const NamedTensors back = read_checkpoint(p);
    REQUIRE(back.size() == ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
      CHECK(back[i].first == ts[i].first);
      CHECK(bit_equal(back[i].second, ts[i].second));
    }
    const std::string text = read_text(p);
    CHECK(text.rfind("IVIT-CKPT-1\nembed.weight 3x4 0\nhead.bias 5 48\nmix 2x2x2 68\n\n", 0) == 0);
    CHECK(text.size() == 60 + 4 * (12 + 5 + 8));
  }

  TEST_CASE("checkpoint errors") {
    const fs::path p = scratch("bad.ckpt");
    std::ofstream(p) << "NOT-A-CKPT\n\n";
    CHECK_THROWS(read_checkpoint(p));
    std::ofstream(p) << "IVIT-CKPT-1\nw 2x2 0\n";
    CHECK_THROWS(read_checkpoint(p));
    std::ofstream(p, std::ios::binary) << "IVIT-CKPT-1\nw 2x2 0\n\nabc";
    CHECK_THROWS(read_checkpoint(p));
    std::ofstream(p) << "IVIT-CKPT-1\nw 2xq 0\n\n";
    CHECK_THROWS(read_checkpoint(p));
    CHECK_THROWS(write_checkpoint({{"bad name", Tensor({1})}}, p));
  }
}
