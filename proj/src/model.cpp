#include "imhsa/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "imhsa/ops.hpp"

namespace imhsa {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("toy config: " + msg); }

enum class Init { normal, ones, zeros, mix };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

bool lifts(const ToyIViTConfig& cfg, std::size_t stage) {
  return stage > 0 && cfg.stages[stage].channels != cfg.stages[stage - 1].channels;
}

std::vector<ParamSpec> param_specs(const ToyIViTConfig& cfg) {
  std::vector<ParamSpec> specs;
  const std::size_t c0 = cfg.stages.front().channels;
  specs.push_back({"embed.weight", {c0, cfg.patch * cfg.patch * cfg.in_channels}, Init::normal});
  specs.push_back({"embed.bias", {c0}, Init::zeros});
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageSpec& st = cfg.stages[i];
    const std::size_t c = st.channels;
    const std::string sp = "stage" + std::to_string(i) + ".";
    if (lifts(cfg, i)) {
      specs.push_back({sp + "down.weight", {c, cfg.stages[i - 1].channels}, Init::normal});
      specs.push_back({sp + "down.bias", {c}, Init::zeros});
    }
    const std::size_t hid = cfg.hidden(c);
    for (std::size_t j = 0; j < st.depth; ++j) {
      const std::string p = block_prefix(i, j);
      specs.push_back({p + "norm1.gamma", {c}, Init::ones});
      // The pooling mixer cancels any constant shift, so its norm carries no beta.
      if (st.mixer == MixerKind::attention) {
        specs.push_back({p + "norm1.beta", {c}, Init::zeros});
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv"}) specs.push_back({p + w, {c, c}, Init::normal});
        for (const char* w : {"attn.w1_q", "attn.w2_q", "attn.w1_k", "attn.w2_k"}) {
          specs.push_back({p + w, {st.heads, st.heads}, Init::mix});
        }
      }
      specs.push_back({p + "norm2.gamma", {c}, Init::ones});
      specs.push_back({p + "norm2.beta", {c}, Init::zeros});
      specs.push_back({p + "mlp.fc1.weight", {hid, c}, Init::normal});
      specs.push_back({p + "mlp.fc1.bias", {hid}, Init::zeros});
      specs.push_back({p + "mlp.fc2.weight", {c, hid}, Init::normal});
      specs.push_back({p + "mlp.fc2.bias", {c}, Init::zeros});
    }
  }
  specs.push_back({"head.weight", {cfg.num_classes, cfg.stages.back().channels}, Init::normal});
  specs.push_back({"head.bias", {cfg.num_classes}, Init::zeros});
  return specs;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  Shape s = t.shape();
  const std::size_t row = t.size() / s[0];
  s[0] = count;
  Tensor out(s, t.dtype());
  dispatch(t.dtype(), [&]<typename T>() {
    auto in = t.data<T>();
    std::copy_n(in.data() + begin * row, count * row, out.data<T>().data());
  });
  return out;
}

}  // namespace

ToyIViTConfig ToyIViTConfig::default_synth() {
  ToyIViTConfig cfg;
  cfg.stages = {{MixerKind::pool, 2, 32, 1},
                {MixerKind::pool, 2, 32, 1},
                {MixerKind::attention, 2, 64, 4},
                {MixerKind::attention, 2, 64, 4}};
  return cfg;
}

ToyIViTConfig ToyIViTConfig::default_cifar() {
  ToyIViTConfig cfg = default_synth();
  cfg.image_h = 32;
  cfg.image_w = 32;
  cfg.in_channels = 3;
  cfg.patch = 4;
  cfg.num_classes = 10;
  return cfg;
}

void ToyIViTConfig::validate() const {
  if (stages.empty()) fail("no stages");
  if (image_h == 0 || image_w == 0 || in_channels == 0) fail("input extents must be positive");
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
    fail("patch size " + std::to_string(patch) + " does not divide the " + std::to_string(image_h) + "x" +
         std::to_string(image_w) + " input");
  }
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) fail("mlp_ratio must be positive");
  if (landmark_h == 0 || landmark_w == 0) fail("landmark grid must be non-empty");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (drop_path != 0.0) fail("drop_path other than 0 is not supported");
  bool any_attention = false;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    const std::string where = "stage " + std::to_string(i) + ": ";
    if (s.depth == 0 || s.channels == 0) fail(where + "depth and channels must be positive");
    if (i > 0 && s.channels < stages[i - 1].channels) fail(where + "channels decrease");
    if (s.mixer == MixerKind::attention) {
      any_attention = true;
      if (s.heads == 0 || s.channels % s.heads != 0) {
        fail(where + "channels " + std::to_string(s.channels) + " not divisible by " + std::to_string(s.heads) +
             " heads");
      }
    }
  }
  if (!any_attention) fail("at least one attention stage is required");
}

std::size_t ToyIViTConfig::hidden(std::size_t channels) const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(channels) * mlp_ratio)));
}

std::pair<std::size_t, std::size_t> ToyIViTConfig::stage_grid(std::size_t i) const {
  std::size_t h = image_h / patch, w = image_w / patch;
  for (std::size_t s = 1; s <= i; ++s) {
    if (lifts(*this, s)) {
      h = std::max<std::size_t>(1, h / 2);
      w = std::max<std::size_t>(1, w / 2);
    }
  }
  return {h, w};
}

AttnConfig ToyIViTConfig::attn_config(std::size_t stage) const {
  const StageSpec& s = stages.at(stage);
  const auto [h, w] = stage_grid(stage);
  return AttnConfig::make(s.heads, s.channels / s.heads, h, w, landmark_h, landmark_w);
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].first == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

const Tensor& ModelParams::get(const std::string& name) const { return tensors[index_of(name)].second; }
Tensor& ModelParams::get(const std::string& name) { return tensors[index_of(name)].second; }

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

ModelParams build_toy_ivit(const ToyIViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams params;
  params.config = cfg;
  for (const ParamSpec& s : param_specs(cfg)) {
    Tensor t;
    switch (s.init) {
      case Init::normal: t = gaussian_tensor(rng, s.shape, 0.02, cfg.dtype); break;
      case Init::ones: t = Tensor::filled(s.shape, 1.0, cfg.dtype); break;
      case Init::zeros: t = Tensor(s.shape, cfg.dtype); break;
      case Init::mix: {
        t = gaussian_tensor(rng, s.shape, 0.01, cfg.dtype);
        for (std::size_t i = 0; i < s.shape[0]; ++i) t.set(i * s.shape[0] + i, t.at(i * s.shape[0] + i) + 1.0);
        break;
      }
    }
    params.tensors.emplace_back(s.name, std::move(t));
  }
  return params;
}

Tensor patchify(const Tensor& input, const ToyIViTConfig& cfg) {
  const std::size_t cin = cfg.in_channels;
  const std::size_t ih = cfg.image_h, iw = cfg.image_w;
  bool ok = false;
  if (input.rank() == 4) {
    ok = input.extent(1) == ih && input.extent(2) == iw && input.extent(3) == cin;
  } else if (input.rank() == 3) {
    ok = input.extent(1) == ih * iw && input.extent(2) == cin;
  }
  if (!ok) {
    throw ShapeError("model input: expected [B, " + std::to_string(ih) + ", " + std::to_string(iw) + ", " +
                     std::to_string(cin) + "] or [B, " + std::to_string(ih * iw) + ", " + std::to_string(cin) +
                     "], got " + shape_str(input.shape()));
  }
  const std::size_t b = input.extent(0);
  const std::size_t p = cfg.patch;
  const std::size_t gh = ih / p, gw = iw / p;
  const std::size_t pc = p * p * cin;
  Tensor out({b, gh, gw, pc}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    auto in = input.data<T>();
    auto o = out.data<T>();
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t r = 0; r < gh; ++r) {
        for (std::size_t c = 0; c < gw; ++c) {
          T* dst = o.data() + ((n * gh + r) * gw + c) * pc;
          for (std::size_t pr = 0; pr < p; ++pr) {
            const T* src = in.data() + ((n * ih + r * p + pr) * iw + c * p) * cin;
            std::copy_n(src, p * cin, dst + pr * p * cin);
          }
        }
      }
    }
  });
  if (!out.all_finite()) throw NumericError("model input: non-finite values");
  return out;
}

Var forward_graph(const ModelParams& params, Tape& tape, std::span<const Var> vars, const Tensor& input,
                  std::vector<AttnTrace>* trace) {
  const ToyIViTConfig& cfg = params.config;
  if (vars.size() != params.tensors.size()) throw std::invalid_argument("forward: parameter count mismatch");
  Tensor patches = patchify(input, cfg);
  if (patches.dtype() != cfg.dtype) patches = patches.to(cfg.dtype);
  const std::size_t b = patches.extent(0);

  std::size_t next = 0;
  auto take = [&](const std::string& name) {
    if (next >= vars.size() || params.tensors[next].first != name) {
      throw std::logic_error("forward: parameter order mismatch at '" + name + "'");
    }
    return vars[next++];
  };
  auto linear = [&](Var x, const std::string& prefix) {
    Var w = take(prefix + "weight");
    Var bias = take(prefix + "bias");
    return ad::add_bias(ad::matmul_nt(x, w), bias);
  };
  auto norm = [&](Var x, const std::string& prefix) {
    Var g = take(prefix + "gamma");
    Var bt = take(prefix + "beta");
    return ad::layernorm(x, g, bt, 1e-5);
  };
  auto norm_no_shift = [&](Var x, const std::string& prefix) {
    Var g = take(prefix + "gamma");
    return ad::layernorm(x, g, tape.constant(Tensor(g.shape(), cfg.dtype)), 1e-5);
  };

  Var x = linear(tape.constant(std::move(patches)), "embed.");
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageSpec& st = cfg.stages[i];
    const auto [gh, gw] = cfg.stage_grid(i);
    if (lifts(cfg, i)) {
      x = linear(ad::adaptive_avg_pool2d(x, gh, gw), "stage" + std::to_string(i) + ".down.");
    }
    const std::size_t c = st.channels;
    for (std::size_t j = 0; j < st.depth; ++j) {
      const std::string p = block_prefix(i, j);
      if (st.mixer == MixerKind::pool) {
        Var y = norm_no_shift(x, p + "norm1.");
        x = ad::add(x, ad::sub(ad::avg_pool3x3(y), y));
      } else {
        const AttnConfig acfg = cfg.attn_config(i);
        Var y = norm(x, p + "norm1.");
        Var tokens = ad::reshape(y, {b, gh * gw, c});
        Var wq = take(p + "attn.wq");
        Var wk = take(p + "attn.wk");
        Var wv = take(p + "attn.wv");
        ad::MixVars mix{take(p + "attn.w1_q"), take(p + "attn.w2_q"), take(p + "attn.w1_k"),
                        take(p + "attn.w2_k")};
        Var q = ad::split_heads(ad::matmul_nt(tokens, wq), st.heads);
        Var k = ad::split_heads(ad::matmul_nt(tokens, wk), st.heads);
        Var v = ad::split_heads(ad::matmul_nt(tokens, wv), st.heads);
        ad::AttnProbe probe;
        Var o = ad::attend(cfg.attention, q, k, v, acfg, uses_interaction(cfg.attention) ? &mix : nullptr,
                           trace ? &probe : nullptr);
        if (trace) trace->push_back({i, j, std::move(probe)});
        x = ad::add(x, ad::reshape(ad::merge_heads(o), {b, gh, gw, c}));
      }
      Var h = ad::gelu(linear(norm(x, p + "norm2."), p + "mlp.fc1."));
      x = ad::add(x, linear(h, p + "mlp.fc2."));
    }
  }
  const auto [gh, gw] = cfg.stage_grid(cfg.stages.size() - 1);
  Var pooled = ad::mean_axis(ad::reshape(x, {b, gh * gw, cfg.stages.back().channels}), 1);
  Var logits = linear(pooled, "head.");
  if (next != vars.size()) throw std::logic_error("forward: unused parameters");
  return logits;
}

Tensor forward(const ModelParams& params, const Tensor& input, Meter* meter, std::vector<AttnTrace>* trace) {
  Tape tape(false, meter);
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors) vars.push_back(tape.constant(t));
  return forward_graph(params, tape, vars, input, trace).value();
}

TrainState TrainState::init(const ModelParams& params, double lr, std::uint64_t seed) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
  TrainState s;
  s.lr = lr;
  s.rng_state = seed;
  for (const auto& [name, t] : params.tensors) {
    s.m.emplace_back(name, Tensor(t.shape(), t.dtype()));
    s.v.emplace_back(name, Tensor(t.shape(), t.dtype()));
  }
  return s;
}

double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
    throw ShapeError("accuracy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i * k + j) > logits.at(i * k + best)) best = j;
    }
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

StepResult train_step(ModelParams& params, TrainState& state, const Batch& batch) {
  if (state.m.size() != params.tensors.size()) throw std::invalid_argument("train_step: state/parameter mismatch");
  for (std::size_t y : batch.labels) {
    if (y >= params.config.num_classes) {
      throw std::out_of_range("train_step: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(params.config.num_classes) + ")");
    }
  }
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors) vars.push_back(tape.leaf(t));
  Var logits = forward_graph(params, tape, vars, batch.inputs);
  Var loss = ad::cross_entropy(logits, batch.labels);
  const double loss_value = loss.value().at(0);
  const double acc = accuracy_of(logits.value(), batch.labels);
  tape.backward(loss);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const Tensor g = tape.grad(vars[i]);
    Tensor& p = params.tensors[i].second;
    Tensor& m = state.m[i].second;
    Tensor& v = state.v[i].second;
    dispatch(p.dtype(), [&]<typename T>() {
      auto gs = g.data<T>();
      auto ps = p.data<T>();
      auto ms = m.data<T>();
      auto vs = v.data<T>();
      for (std::size_t e = 0; e < ps.size(); ++e) {
        const double gi = gs[e];
        const double mi = state.beta1 * ms[e] + (1.0 - state.beta1) * gi;
        const double vi = state.beta2 * vs[e] + (1.0 - state.beta2) * gi * gi;
        ms[e] = static_cast<T>(mi);
        vs[e] = static_cast<T>(vi);
        ps[e] = static_cast<T>(ps[e] - state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps));
      }
    });
    if (!p.all_finite()) throw NumericError("train_step: parameter '" + params.tensors[i].first + "' diverged");
  }
  state.running_loss += (loss_value - state.running_loss) / t;
  state.running_accuracy += (acc - state.running_accuracy) / t;
  return {loss_value, acc};
}

double evaluate(const ModelParams& params, const Batch& data, std::size_t batch_size) {
  if (data.labels.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  const std::size_t n = data.labels.size();
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t count = std::min(batch_size, n - begin);
    const Tensor logits = forward(params, slice_rows(data.inputs, begin, count));
    const std::span<const std::size_t> labels(data.labels.data() + begin, count);
    correct += static_cast<std::size_t>(std::llround(accuracy_of(logits, labels) * static_cast<double>(count)));
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<TrainLogRow> train(ModelParams& params, TrainState& state, const BatchSource& source,
                               const TrainOptions& options, const Batch* validation) {
  std::vector<TrainLogRow> log;
  log.reserve(options.steps);
  for (std::size_t s = 0; s < options.steps; ++s) {
    Rng rng(state.rng_state);
    const Batch batch = source(rng);
    state.rng_state = rng.state();
    const StepResult r = train_step(params, state, batch);
    TrainLogRow row{state.step, r.loss, r.accuracy, std::nullopt};
    const bool last = s + 1 == options.steps;
    if (validation && (last || (options.eval_every > 0 && (s + 1) % options.eval_every == 0))) {
      row.val_accuracy = evaluate(params, *validation);
    }
    log.push_back(row);
  }
  return log;
}

std::uint64_t forward_flops(const ModelParams& params) {
  const ToyIViTConfig& cfg = params.config;
  Meter meter;
  forward(params, Tensor({1, cfg.image_h, cfg.image_w, cfg.in_channels}, cfg.dtype), &meter);
  return meter.flops();
}

std::vector<AblationRow> run_ablation(const AblationOptions& options) {
  struct Variant {
    bool decomposition, interaction;
    Method method;
  };
  const Variant variants[] = {{true, true, Method::imhsa}, {true, false, Method::decomp}, {false, true, Method::mhsa_ix}};
  Rng val_rng(options.seed ^ 0xA5A5A5A5ULL);
  const Batch val = gen_synth_batch(val_rng, options.val_samples, options.task, options.base.dtype);
  std::vector<AblationRow> rows;
  for (const Variant& var : variants) {
    ToyIViTConfig cfg = options.base;
    cfg.attention = var.method;
    ModelParams params = build_toy_ivit(cfg, options.seed);
    TrainState state = TrainState::init(params, options.lr, options.seed);
    const SynthTask task = options.task;
    const std::size_t bs = options.batch;
    const DType dt = cfg.dtype;
    train(params, state, [&](Rng& r) { return gen_synth_batch(r, bs, task, dt); }, {options.steps, 0});

    AblationRow row{var.decomposition, var.interaction, forward_flops(params), 0.0, evaluate(params, val)};
    const Tensor one = slice_rows(val.inputs, 0, 1);
    std::vector<double> times;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, options.timing_reps); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      forward(params, one);
      times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    row.wall_ms = times[times.size() / 2];
    rows.push_back(row);
  }
  return rows;
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  write_checkpoint(params.tensors, path);
}

ModelParams load_model(const ToyIViTConfig& cfg, const std::filesystem::path& path) {
  cfg.validate();
  const auto specs = param_specs(cfg);
  NamedTensors loaded = read_checkpoint(path);
  if (loaded.size() != specs.size()) {
    throw std::runtime_error("checkpoint " + path.string() + ": " + std::to_string(loaded.size()) +
                             " tensors, model expects " + std::to_string(specs.size()));
  }
  ModelParams params;
  params.config = cfg;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& [name, t] = loaded[i];
    if (name != specs[i].name || t.shape() != specs[i].shape) {
      throw std::runtime_error("checkpoint " + path.string() + ": entry " + std::to_string(i) + " is '" + name +
                               "' " + shape_str(t.shape()) + ", model expects '" + specs[i].name + "' " +
                               shape_str(specs[i].shape));
    }
    params.tensors.emplace_back(name, t.dtype() == cfg.dtype ? std::move(t) : t.to(cfg.dtype));
  }
  return params;
}

}  // namespace imhsa
