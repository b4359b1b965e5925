#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "imhsa/data.hpp"
#include "imhsa/model.hpp"

namespace imhsa {

/// Settings shared by train / evaluate / diag / attnmap. Loaded from a config
/// file, then overridden by IMHSA_SEED, then by explicit flags.
struct RunConfig {
  std::string task = "synth";  // synth | cifar
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 7;
  double noise = 0.5;
  std::string stages = "pool:2:32,pool:2:32,attention:2:64:4,attention:2:64:4";
  std::optional<std::size_t> heads;  // overrides every attention stage
  std::size_t landmarks = 2;         // landmark grid side
  std::string attention = "imhsa";
  double mlp_ratio = 4.0;
  std::size_t eval_every = 0;
  std::size_t val_samples = 2000;
  std::string cifar_dir;
  std::size_t train_subset = 10000;
  std::size_t epochs = 0;  // cifar: when > 0, steps = epochs * train_subset / batch

  ToyIViTConfig model() const;
};

const std::vector<std::string>& config_keys();
RunConfig run_config_from_map(const ConfigMap& map);
ConfigMap run_config_to_map(const RunConfig& rc);

/// "pool:2:32,attention:2:64:4" -> stage specs (mixer:depth:channels[:heads]).
std::vector<StageSpec> parse_stages(const std::string& text);
std::string stages_to_string(const std::vector<StageSpec>& stages);

/// Runs one subcommand. Usage errors return 2, runtime failures 1.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace imhsa
