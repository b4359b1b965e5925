#include "imhsa/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace imhsa {

double gaussian(Rng& rng) {
  double u1 = rng.uniform();
  const double u2 = rng.uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev, DType dtype, double mean) {
  Tensor t(std::move(shape), dtype);
  for (std::size_t i = 0; i < t.size(); ++i) t.set(i, mean + stddev * gaussian(rng));
  return t;
}

Tensor synth_prototypes(DType dtype) {
  Tensor p({SynthTask::kClasses, SynthTask::kDim}, dtype);
  for (std::size_t c = 0; c < SynthTask::kClasses; ++c) p.set(c * SynthTask::kDim + c, 1.0);
  return p;
}

Batch gen_synth_batch(Rng& rng, std::size_t batch, const SynthTask& task, DType dtype) {
  if (batch == 0) throw std::invalid_argument("gen_synth_batch: batch must be >= 1");
  constexpr std::size_t n = SynthTask::kTokens;
  constexpr std::size_t dim = SynthTask::kDim;
  Batch out{Tensor({batch, SynthTask::kGrid, SynthTask::kGrid, dim}, dtype), {}};
  out.labels.reserve(batch);
  std::vector<std::size_t> cls(n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t label = 0;
    for (;;) {
      std::array<std::size_t, SynthTask::kClasses> counts{};
      for (auto& c : cls) {
        c = static_cast<std::size_t>(rng.below(SynthTask::kClasses));
        ++counts[c];
      }
      const auto top = std::ranges::max(counts);
      if (std::ranges::count(counts, top) == 1) {
        label = static_cast<std::size_t>(std::ranges::max_element(counts) - counts.begin());
        break;
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t e = 0; e < dim; ++e) {
        const double proto = (e == cls[t]) ? 1.0 : 0.0;
        out.inputs.set((b * n + t) * dim + e, proto + task.noise * gaussian(rng));
      }
    }
    out.labels.push_back(label);
  }
  return out;
}

std::size_t nearest_prototype_vote(const Tensor& sample) {
  constexpr std::size_t dim = SynthTask::kDim;
  if (sample.size() != SynthTask::kTokens * dim) throw ShapeError("nearest_prototype_vote: expected 64x16 tokens");
  std::array<std::size_t, SynthTask::kClasses> votes{};
  for (std::size_t t = 0; t < SynthTask::kTokens; ++t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < SynthTask::kClasses; ++c) {
      if (sample.at(t * dim + c) > sample.at(t * dim + best)) best = c;
    }
    ++votes[best];
  }
  return static_cast<std::size_t>(std::ranges::max_element(votes) - votes.begin());
}

std::vector<Cifar10Record> read_cifar10_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR-10 file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw std::runtime_error("truncated CIFAR-10 file " + path.string() + ": " + std::to_string(bytes.size()) +
                             " bytes is not a positive multiple of 3073");
  }
  std::vector<Cifar10Record> records(bytes.size() / kCifarRecordBytes);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw std::runtime_error("CIFAR-10 record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    }
    auto& out = records[r];
    out.label = rec[0];
    out.pixels.resize(32 * 32 * 3);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t p = 0; p < 1024; ++p) {
        out.pixels[p * 3 + ch] = static_cast<float>(rec[1 + ch * 1024 + p]) / 255.0f;
      }
    }
  }
  return records;
}

CifarDataset load_cifar10(const std::filesystem::path& dir) {
  CifarDataset ds;
  for (int i = 1; i <= 5; ++i) {
    auto part = read_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    ds.train.insert(ds.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  ds.test = read_cifar10_file(dir / "test_batch.bin");
  return ds;
}

Batch cifar_batch(const std::vector<Cifar10Record>& records, std::span<const std::size_t> indices, DType dtype) {
  if (indices.empty()) throw std::invalid_argument("cifar_batch: empty index list");
  Batch out{Tensor({indices.size(), 32, 32, 3}, dtype), {}};
  constexpr std::size_t per = 32 * 32 * 3;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& rec = records.at(indices[b]);
    for (std::size_t e = 0; e < per; ++e) out.inputs.set(b * per + e, rec.pixels[e]);
    out.labels.push_back(rec.label);
  }
  return out;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::vector<std::string>& allowed) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key or value");
    }
    if (!allowed.empty() && std::ranges::find(allowed, key) == allowed.end()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    out[key] = value;
  }
  return out;
}

ConfigMap parse_config(const std::filesystem::path& path, const std::vector<std::string>& allowed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), allowed);
}

std::string serialize_config(const ConfigMap& config) {
  std::string out;
  for (const auto& [k, v] : config) out += k + " = " + v + "\n";
  return out;
}

std::string to_csv(const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::string out;
  auto emit = [&](const CsvRow& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  };
  emit(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw std::invalid_argument("csv row width differs from header");
    emit(r);
  }
  return out;
}

void write_csv(const CsvRow& header, const std::vector<CsvRow>& rows, const std::filesystem::path& path) {
  const std::string text = to_csv(header, rows);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<CsvRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    CsvRow row;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      row.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_number(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

namespace {

void put_f32_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_field(const std::string& field) {
  Shape s;
  std::size_t start = 0;
  for (;;) {
    const auto x = field.find('x', start);
    const std::string part = field.substr(start, x == std::string::npos ? std::string::npos : x - start);
    if (part.empty() || !std::ranges::all_of(part, [](char c) { return c >= '0' && c <= '9'; })) {
      throw std::runtime_error("checkpoint: bad shape '" + field + "'");
    }
    s.push_back(std::stoull(part));
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return s;
}

}  // namespace

void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
  std::string header = std::string(kCheckpointMagic) + "\n";
  std::string blob;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("checkpoint: invalid tensor name '" + name + "'");
    }
    header += name + " " + shape_field(t.shape()) + " " + std::to_string(blob.size()) + "\n";
    for (std::size_t i = 0; i < t.size(); ++i) put_f32_le(blob, static_cast<float>(t.at(i)));
  }
  header += "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << header << blob;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: missing " + std::string(kCheckpointMagic) + " magic");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      terminated = true;
      break;
    }
    std::istringstream fields(line);
    std::string name, shape, offset, extra;
    if (!(fields >> name >> shape >> offset) || (fields >> extra)) {
      throw std::runtime_error("checkpoint: malformed header line '" + line + "'");
    }
    entries.push_back({name, parse_shape_field(shape), std::stoull(offset)});
  }
  if (!terminated) throw std::runtime_error("checkpoint: header not terminated by a blank line");
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  NamedTensors out;
  for (const auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + 4 * n > data.size()) throw std::runtime_error("checkpoint: data for '" + e.name + "' truncated");
    Tensor t(e.shape, DType::f32);
    auto dst = t.data<float>();
    for (std::size_t i = 0; i < n; ++i) dst[i] = get_f32_le(data.data() + e.offset + 4 * i);
    out.emplace_back(e.name, std::move(t));
  }
  return out;
}

}  // namespace imhsa
