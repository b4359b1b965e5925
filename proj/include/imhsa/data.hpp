#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "imhsa/rng.hpp"
#include "imhsa/tensor.hpp"

namespace imhsa {

/// Global-aggregation toy task: an 8x8 grid of 16-d tokens, each token a noisy
/// copy of one of four orthogonal unit prototypes; the label is the prototype
/// assigned to the most tokens.
struct SynthTask {
  static constexpr std::size_t kGrid = 8;
  static constexpr std::size_t kTokens = kGrid * kGrid;
  static constexpr std::size_t kDim = 16;
  static constexpr std::size_t kClasses = 4;
  double noise = 0.5;
};

/// A batch of samples: inputs [B, Hg, Wg, C] and integer labels.
struct Batch {
  Tensor inputs;
  std::vector<std::size_t> labels;
};

/// Draw order per sample: 64 token classes (row-major), then the token values
/// (row-major tokens, dims ascending). A sample whose majority count is tied is
/// discarded and redrawn from the continuing stream.
Batch gen_synth_batch(Rng& rng, std::size_t batch, const SynthTask& task = {}, DType dtype = DType::f32);

/// Prototype p is the unit vector e_p in R^16.
Tensor synth_prototypes(DType dtype = DType::f64);

/// Nearest-prototype vote per token followed by majority; the noiseless reference classifier.
std::size_t nearest_prototype_vote(const Tensor& sample);

struct Cifar10Record {
  std::uint8_t label = 0;
  std::vector<float> pixels;  // [32, 32, 3], HWC order, scaled to [0, 1]
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Parses one CIFAR-10 binary file (a multiple of 3073 bytes).
std::vector<Cifar10Record> read_cifar10_file(const std::filesystem::path& path);

struct CifarDataset {
  std::vector<Cifar10Record> train;
  std::vector<Cifar10Record> test;
};

/// Loads data_batch_{1..5}.bin and test_batch.bin from `dir`.
CifarDataset load_cifar10(const std::filesystem::path& dir);

/// Packs records [first, first + count) into a batch of [B, 32, 32, 3].
Batch cifar_batch(const std::vector<Cifar10Record>& records, std::span<const std::size_t> indices,
                  DType dtype = DType::f32);

using ConfigMap = std::map<std::string, std::string>;

/// "key = value" lines, '#' comments, blank lines ignored. Keys outside
/// `allowed` (when non-empty) and malformed lines are errors.
ConfigMap parse_config_text(const std::string& text, const std::vector<std::string>& allowed = {});
ConfigMap parse_config(const std::filesystem::path& path, const std::vector<std::string>& allowed = {});
/// Canonical form: one "key = value" line per entry in key order.
std::string serialize_config(const ConfigMap& config);

using CsvRow = std::vector<std::string>;
std::string to_csv(const CsvRow& header, const std::vector<CsvRow>& rows);
void write_csv(const CsvRow& header, const std::vector<CsvRow>& rows, const std::filesystem::path& path);
std::vector<CsvRow> read_csv(const std::filesystem::path& path);

/// Fixed-precision number formatting used by every CSV writer.
std::string format_number(double v, int precision = 6);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr const char* kCheckpointMagic = "IVIT-CKPT-1";

/// Header lines "name shape offset" (shape as AxBxC, offset in bytes from the
/// start of the data section), a blank line, then little-endian f32 blobs in
/// header order.
void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path);
NamedTensors read_checkpoint(const std::filesystem::path& path);

}  // namespace imhsa
