#pragma once

// Scaled-down iViT: a patch embedding, pooling-mixer stages, then attention
// stages, each block pre-norm residual:
//
//   x += Mixer(LN(x));  x += MLP(LN(x))
//
// Activations stay as channel grids [B, Hg, Wg, C]. A stage whose width differs
// from its predecessor starts with a 2x2 mean pool and a linear channel lift.
// The classifier is a global token mean followed by a linear layer.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "imhsa/attention.hpp"
#include "imhsa/autodiff.hpp"
#include "imhsa/data.hpp"

namespace imhsa {

enum class MixerKind { pool, attention };

struct StageSpec {
  MixerKind mixer = MixerKind::pool;
  std::size_t depth = 1;
  std::size_t channels = 32;
  std::size_t heads = 1;
};

struct ToyIViTConfig {
  std::vector<StageSpec> stages;
  std::size_t image_h = 8;
  std::size_t image_w = 8;
  std::size_t in_channels = 16;
  std::size_t patch = 1;
  double mlp_ratio = 4.0;
  std::size_t landmark_h = 2;
  std::size_t landmark_w = 2;
  std::size_t num_classes = 4;
  double drop_path = 0.0;
  /// Attention core used by every attention stage.
  Method attention = Method::imhsa;
  DType dtype = DType::f32;

  /// pool(2, 32), pool(2, 32), imhsa(2, 64, 4 heads), imhsa(2, 64, 4 heads) on the synthetic task.
  static ToyIViTConfig default_synth();
  /// The same stages on 32x32x3 images with 4x4 patches and 10 classes.
  static ToyIViTConfig default_cifar();

  /// Throws std::invalid_argument describing the first violated rule.
  void validate() const;

  std::size_t hidden(std::size_t channels) const;
  /// Token grid (rows, cols) seen by stage `i`.
  std::pair<std::size_t, std::size_t> stage_grid(std::size_t i) const;
  AttnConfig attn_config(std::size_t stage) const;
};

struct ModelParams {
  ToyIViTConfig config;
  NamedTensors tensors;

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t index_of(const std::string& name) const;
  std::size_t count() const;
};

/// Weights N(0, 0.02^2), norm gamma 1 / beta 0, biases 0, head mixes identity + N(0, 0.01^2).
/// Parameters are drawn in naming order from one Rng seeded with `seed`.
ModelParams build_toy_ivit(const ToyIViTConfig& cfg, std::uint64_t seed);

/// Per attention block capture for diagnostics.
struct AttnTrace {
  std::size_t stage = 0;
  std::size_t block = 0;
  ad::AttnProbe probe;
};

/// Reshapes [B, N, Cin] or [B, H, W, Cin] input into patch tokens [B, Hg, Wg, p*p*Cin].
Tensor patchify(const Tensor& input, const ToyIViTConfig& cfg);

/// Builds the forward graph on `tape` with `vars[i]` bound to params.tensors[i].
Var forward_graph(const ModelParams& params, Tape& tape, std::span<const Var> vars, const Tensor& input,
                  std::vector<AttnTrace>* trace = nullptr);

/// Inference: logits [B, num_classes].
Tensor forward(const ModelParams& params, const Tensor& input, Meter* meter = nullptr,
               std::vector<AttnTrace>* trace = nullptr);

struct TrainState {
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  NamedTensors m;
  NamedTensors v;
  std::uint64_t rng_state = 0;
  double running_loss = 0.0;
  double running_accuracy = 0.0;

  static TrainState init(const ModelParams& params, double lr, std::uint64_t seed);
};

struct StepResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// One Adam step on the mean cross-entropy of `batch`.
StepResult train_step(ModelParams& params, TrainState& state, const Batch& batch);

/// Top-1 accuracy over `data`, evaluated in chunks of `batch_size`.
double evaluate(const ModelParams& params, const Batch& data, std::size_t batch_size = 256);

double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels);

struct TrainLogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> val_accuracy;
};

using BatchSource = std::function<Batch(Rng&)>;

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
};

/// Draws batches from `source` with the state's Rng and logs every step.
std::vector<TrainLogRow> train(ModelParams& params, TrainState& state, const BatchSource& source,
                               const TrainOptions& options, const Batch* validation = nullptr);

/// Counted flops of one inference forward at batch 1.
std::uint64_t forward_flops(const ModelParams& params);

struct AblationRow {
  bool decomposition = false;
  bool interaction = false;
  std::uint64_t flops = 0;
  double wall_ms = 0.0;
  double top1 = 0.0;
};

struct AblationOptions {
  ToyIViTConfig base = ToyIViTConfig::default_synth();
  std::size_t steps = 300;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 7;
  SynthTask task;
  std::size_t val_samples = 1000;
  std::size_t timing_reps = 5;
};

/// Three variants: both on (imhsa), decomposition only, interaction only (mhsa-ix).
std::vector<AblationRow> run_ablation(const AblationOptions& options);

void save_model(const ModelParams& params, const std::filesystem::path& path);
/// Reads a checkpoint and checks it against the parameters `cfg` would build.
ModelParams load_model(const ToyIViTConfig& cfg, const std::filesystem::path& path);

}  // namespace imhsa
