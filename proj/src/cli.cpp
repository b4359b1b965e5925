#include "imhsa/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "imhsa/bench.hpp"
#include "imhsa/gradcheck_suite.hpp"
#include "imhsa/ops.hpp"

namespace imhsa {

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double to_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw UsageError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size() || !std::isfinite(x)) throw UsageError(key + ": expected a number, got '" + v + "'");
  return x;
}

}  // namespace

std::vector<StageSpec> parse_stages(const std::string& text) {
  std::vector<StageSpec> stages;
  for (const std::string& item : split(text, ',')) {
    const auto f = split(item, ':');
    if (f.size() < 3 || f.size() > 4) throw UsageError("stages: malformed entry '" + item + "'");
    StageSpec s;
    if (f[0] == "pool") {
      s.mixer = MixerKind::pool;
    } else if (f[0] == "attention") {
      s.mixer = MixerKind::attention;
    } else {
      throw UsageError("stages: unknown mixer '" + f[0] + "'");
    }
    s.depth = to_size("stages", f[1]);
    s.channels = to_size("stages", f[2]);
    s.heads = f.size() == 4 ? to_size("stages", f[3]) : 1;
    stages.push_back(s);
  }
  if (stages.empty()) throw UsageError("stages: empty");
  return stages;
}

std::string stages_to_string(const std::vector<StageSpec>& stages) {
  std::string out;
  for (const StageSpec& s : stages) {
    if (!out.empty()) out += ',';
    out += s.mixer == MixerKind::pool ? "pool" : "attention";
    out += ':' + std::to_string(s.depth) + ':' + std::to_string(s.channels);
    if (s.mixer == MixerKind::attention) out += ':' + std::to_string(s.heads);
  }
  return out;
}

ToyIViTConfig RunConfig::model() const {
  ToyIViTConfig cfg = task == "cifar" ? ToyIViTConfig::default_cifar() : ToyIViTConfig::default_synth();
  cfg.stages = parse_stages(stages);
  if (heads) {
    for (StageSpec& s : cfg.stages) {
      if (s.mixer == MixerKind::attention) s.heads = *heads;
    }
  }
  cfg.landmark_h = cfg.landmark_w = landmarks;
  cfg.attention = parse_method(attention);
  cfg.mlp_ratio = mlp_ratio;
  cfg.validate();
  return cfg;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{"task",        "steps",     "batch",     "lr",         "seed",
                                             "noise",       "stages",    "heads",     "landmarks",  "attention",
                                             "mlp_ratio",   "eval_every", "val_samples", "cifar_dir", "train_subset",
                                             "epochs"};
  return keys;
}

RunConfig run_config_from_map(const ConfigMap& map) {
  RunConfig rc;
  for (const auto& [k, v] : map) {
    if (k == "task") {
      if (v != "synth" && v != "cifar") throw UsageError("task: expected synth or cifar, got '" + v + "'");
      rc.task = v;
    } else if (k == "steps") {
      rc.steps = to_size(k, v);
    } else if (k == "batch") {
      rc.batch = to_size(k, v);
      if (rc.batch == 0) throw UsageError("batch must be positive");
    } else if (k == "lr") {
      rc.lr = to_real(k, v);
      if (rc.lr < 0) throw UsageError("lr must be >= 0");
    } else if (k == "seed") {
      rc.seed = to_size(k, v);
    } else if (k == "noise") {
      rc.noise = to_real(k, v);
      if (rc.noise < 0) throw UsageError("noise must be >= 0");
    } else if (k == "stages") {
      parse_stages(v);
      rc.stages = v;
    } else if (k == "heads") {
      rc.heads = to_size(k, v);
    } else if (k == "landmarks") {
      rc.landmarks = to_size(k, v);
    } else if (k == "attention") {
      try {
        parse_method(v);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      rc.attention = v;
    } else if (k == "mlp_ratio") {
      rc.mlp_ratio = to_real(k, v);
    } else if (k == "eval_every") {
      rc.eval_every = to_size(k, v);
    } else if (k == "val_samples") {
      rc.val_samples = to_size(k, v);
      if (rc.val_samples == 0) throw UsageError("val_samples must be positive");
    } else if (k == "cifar_dir") {
      rc.cifar_dir = v;
    } else if (k == "train_subset") {
      rc.train_subset = to_size(k, v);
    } else if (k == "epochs") {
      rc.epochs = to_size(k, v);
    } else {
      throw UsageError("unknown config key '" + k + "'");
    }
  }
  return rc;
}

ConfigMap run_config_to_map(const RunConfig& rc) {
  ConfigMap m{{"task", rc.task},
              {"steps", std::to_string(rc.steps)},
              {"batch", std::to_string(rc.batch)},
              {"lr", format_number(rc.lr, 17)},
              {"seed", std::to_string(rc.seed)},
              {"noise", format_number(rc.noise, 17)},
              {"stages", rc.stages},
              {"landmarks", std::to_string(rc.landmarks)},
              {"attention", rc.attention},
              {"mlp_ratio", format_number(rc.mlp_ratio, 17)},
              {"eval_every", std::to_string(rc.eval_every)},
              {"val_samples", std::to_string(rc.val_samples)},
              {"train_subset", std::to_string(rc.train_subset)},
              {"epochs", std::to_string(rc.epochs)}};
  if (rc.heads) m["heads"] = std::to_string(*rc.heads);
  if (!rc.cifar_dir.empty()) m["cifar_dir"] = rc.cifar_dir;
  return m;
}

namespace {

// Raw string flags for every config key, merged over the config file and IMHSA_SEED.
struct RunFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<CLI::Option*> options;
  std::vector<std::string> keys;
};

void add_run_flags(CLI::App* sub, RunFlags& f, const std::vector<std::string>& exclude = {}) {
  sub->add_option("--config", f.config_path, "Config file of key = value lines");
  for (const std::string& key : config_keys()) {
    if (std::find(exclude.begin(), exclude.end(), key) != exclude.end()) continue;
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    f.keys.push_back(key);
    f.options.push_back(sub->add_option(flag, f.values[key], "Overrides config key '" + key + "'"));
  }
}

RunConfig resolve_run(const RunFlags& f, ConfigMap defaults = {}) {
  ConfigMap merged = std::move(defaults);
  if (!f.config_path.empty()) {
    for (auto& [k, v] : parse_config(f.config_path, config_keys())) merged[k] = v;
  }
  if (const char* env = std::getenv("IMHSA_SEED"); env && *env) merged["seed"] = env;
  for (std::size_t i = 0; i < f.keys.size(); ++i) {
    if (f.options[i]->count() > 0) merged[f.keys[i]] = f.values.at(f.keys[i]);
  }
  return run_config_from_map(merged);
}

struct TaskData {
  BatchSource source;
  Batch validation;
  std::size_t steps = 0;
};

TaskData make_task(const RunConfig& rc, const ToyIViTConfig& cfg) {
  TaskData td;
  td.steps = rc.steps;
  if (rc.task == "synth") {
    SynthTask task;
    task.noise = rc.noise;
    const std::size_t bs = rc.batch;
    const DType dt = cfg.dtype;
    td.source = [task, bs, dt](Rng& r) { return gen_synth_batch(r, bs, task, dt); };
    Rng vr(rc.seed ^ 0x5EEDULL);
    td.validation = gen_synth_batch(vr, rc.val_samples, task, dt);
    return td;
  }
  std::string dir = rc.cifar_dir;
  if (dir.empty()) {
    if (const char* env = std::getenv("IMHSA_CIFAR_DIR")) dir = env;
  }
  if (dir.empty()) throw UsageError("task cifar needs --cifar-dir or IMHSA_CIFAR_DIR");
  auto data = std::make_shared<CifarDataset>(load_cifar10(dir));
  const std::size_t subset = std::min(rc.train_subset == 0 ? data->train.size() : rc.train_subset, data->train.size());
  const std::size_t bs = rc.batch;
  const DType dt = cfg.dtype;
  td.source = [data, subset, bs, dt](Rng& r) {
    std::vector<std::size_t> idx(bs);
    for (auto& i : idx) i = r.below(subset);
    return cifar_batch(data->train, idx, dt);
  };
  std::vector<std::size_t> vidx(std::min(rc.val_samples, data->test.size()));
  for (std::size_t i = 0; i < vidx.size(); ++i) vidx[i] = i;
  td.validation = cifar_batch(data->test, vidx, dt);
  if (rc.epochs > 0) td.steps = (rc.epochs * subset + bs - 1) / bs;
  return td;
}

ToyIViTConfig model_for_checkpoint(const std::string& ckpt, const RunFlags& f) {
  RunFlags copy = f;
  if (copy.config_path.empty()) {
    const std::string side = ckpt + ".cfg";
    if (!std::filesystem::exists(side)) throw UsageError("no --config given and " + side + " does not exist");
    copy.config_path = side;
  }
  return resolve_run(copy).model();
}

// [B, H, R, C] -> [H, R, C] of sample b.
Tensor sample_slice(const Tensor& t, std::size_t b) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = shape_numel(s);
  Tensor out(s, DType::f64);
  for (std::size_t i = 0; i < n; ++i) out.set(i, t.at(b * n + i));
  return out;
}

Tensor head_slice(const Tensor& stack, std::size_t h) {
  const Shape s{stack.extent(1), stack.extent(2)};
  const std::size_t n = shape_numel(s);
  Tensor out(s, DType::f64);
  for (std::size_t i = 0; i < n; ++i) out.set(i, stack.at(h * n + i));
  return out;
}

// Effective per-head attention [H, N, N] of sample b.
Tensor effective_attention(const ad::AttnProbe& p, std::size_t b) {
  if (!p.full.empty()) return sample_slice(p.full, b);
  return matmul(sample_slice(p.a_q, b), sample_slice(p.a_k, b));
}

void emit_csv(const CsvRow& header, const std::vector<CsvRow>& rows, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << to_csv(header, rows);
  } else {
    write_csv(header, rows, path);
  }
}

int run_bench(const std::vector<std::string>& method_names, const std::vector<std::size_t>& tokens,
              const BenchConfig& cfg, const std::string& path, std::ostream& out) {
  std::vector<Method> methods;
  for (const auto& m : method_names) {
    try {
      methods.push_back(parse_method(m));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  for (std::size_t n : tokens) {
    try {
      square_side(n, "token count");
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const auto records = run_scaling_bench(methods, tokens, cfg);
  std::vector<CsvRow> rows;
  for (const auto& r : records) rows.push_back(bench_csv_row(r));
  emit_csv(bench_csv_header(), rows, path, out);
  if (!path.empty()) {
    for (Method m : methods) {
      const auto n = std::count_if(records.begin(), records.end(),
                                   [m](const BenchRecord& r) { return r.method == m && !r.skipped; });
      if (n < 4) continue;
      const SlopeFit fit = fit_method_slope(records, m);
      out << method_name(m) << " slope " << format_number(fit.slope, 4) << " r2 " << format_number(fit.r2, 4)
          << "\n";
    }
  }
  return 0;
}

int run_gradcheck(const std::string& dtype, const GradCheckOptions& opts, std::size_t instances, const std::string& path,
                  std::ostream& out) {
  if (dtype != "f64") throw UsageError("gradcheck: only --dtype f64 is supported");
  const auto results = run_gradcheck_suite(opts, instances);
  std::vector<CsvRow> rows;
  bool ok = true;
  for (const auto& r : results) {
    std::size_t coords = 0;
    for (const auto& p : r.report.params) coords += p.coords_checked;
    ok = ok && r.report.pass();
    rows.push_back({r.name, format_number(r.report.max_rel_error(), 3), std::to_string(coords),
                    r.report.pass() ? "pass" : "FAIL"});
  }
  emit_csv({"check", "max_rel_error", "coords", "status"}, rows, path, out);
  out << (ok ? "all gradient checks passed" : "gradient check FAILED") << "\n";
  return ok ? 0 : 1;
}

int run_train(const RunConfig& rc, const std::string& metrics, const std::string& ckpt, std::ostream& out) {
  const ToyIViTConfig cfg = rc.model();
  TaskData td = make_task(rc, cfg);
  ModelParams params = build_toy_ivit(cfg, rc.seed);
  TrainState state = TrainState::init(params, rc.lr, rc.seed);
  const auto log = train(params, state, td.source, {td.steps, rc.eval_every}, &td.validation);
  std::vector<CsvRow> rows;
  for (const auto& r : log) {
    rows.push_back({std::to_string(r.step), format_number(r.loss), format_number(r.accuracy),
                    r.val_accuracy ? format_number(*r.val_accuracy) : ""});
  }
  if (!metrics.empty()) write_csv({"step", "loss", "accuracy", "val_accuracy"}, rows, metrics);
  if (!ckpt.empty()) {
    save_model(params, ckpt);
    std::ofstream side(ckpt + ".cfg");
    side << serialize_config(run_config_to_map(rc));
    if (!side) throw std::runtime_error("cannot write " + ckpt + ".cfg");
  }
  out << "steps " << log.size() << " final_loss " << format_number(log.empty() ? 0.0 : log.back().loss)
      << " val_accuracy " << format_number(log.empty() ? 0.0 : log.back().val_accuracy.value_or(0.0)) << "\n";
  return 0;
}

int run_evaluate(const std::string& ckpt, const RunFlags& f, std::ostream& out) {
  const ToyIViTConfig cfg = model_for_checkpoint(ckpt, f);
  RunFlags data_flags = f;
  if (data_flags.config_path.empty()) data_flags.config_path = ckpt + ".cfg";
  const RunConfig rc = resolve_run(data_flags);
  const ModelParams params = load_model(cfg, ckpt);
  const TaskData td = make_task(rc, cfg);
  out << "accuracy " << format_number(evaluate(params, td.validation)) << "\n";
  return 0;
}

int run_ablate(const RunConfig& rc, const std::string& path, std::ostream& out) {
  AblationOptions opt;
  opt.base = rc.model();
  opt.steps = rc.steps;
  opt.batch = rc.batch;
  opt.lr = rc.lr;
  opt.seed = rc.seed;
  opt.task.noise = rc.noise;
  opt.val_samples = rc.val_samples;
  std::vector<CsvRow> rows;
  for (const auto& r : run_ablation(opt)) {
    rows.push_back({r.decomposition ? "on" : "off", r.interaction ? "on" : "off", std::to_string(r.flops),
                    format_number(r.wall_ms), format_number(r.top1)});
  }
  emit_csv({"decomposition", "interaction", "flops", "wall_ms", "top1"}, rows, path, out);
  return 0;
}

int run_diag(RunConfig rc, const std::vector<std::size_t>& heads, std::size_t samples, const std::string& path,
             std::ostream& out) {
  if (heads.empty()) throw UsageError("diag: --heads is empty");
  std::vector<CsvRow> rows;
  for (std::size_t h : heads) {
    rc.heads = h;
    const ToyIViTConfig cfg = rc.model();
    TaskData td = make_task(rc, cfg);
    ModelParams params = build_toy_ivit(cfg, rc.seed);
    TrainState state = TrainState::init(params, rc.lr, rc.seed);
    train(params, state, td.source, {td.steps, 0});
    const double acc = evaluate(params, td.validation);

    const std::size_t n = std::min(samples, td.validation.labels.size());
    Shape s = td.validation.inputs.shape();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Tensor probe_in = reshape(td.validation.inputs, {s[0], td.validation.inputs.size() / s[0]});
    Tensor head_rows({n, probe_in.extent(1)}, probe_in.dtype());
    for (std::size_t i = 0; i < head_rows.size(); ++i) head_rows.set(i, probe_in.at(i));
    s[0] = n;
    std::vector<AttnTrace> trace;
    forward(params, reshape(head_rows, s), nullptr, &trace);
    for (std::size_t layer = 0; layer < trace.size(); ++layer) {
      double var = 0.0, sim = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const Tensor a = effective_attention(trace[layer].probe, b);
        var += head_variance(a);
        if (h > 1) sim += cross_head_similarity(a);
      }
      rows.push_back({std::to_string(h), std::to_string(layer), format_number(acc),
                      format_number(var / static_cast<double>(n)),
                      h > 1 ? format_number(sim / static_cast<double>(n)) : ""});
    }
  }
  emit_csv({"heads", "layer", "accuracy", "variance", "similarity"}, rows, path, out);
  return 0;
}

int run_attnmap(const std::string& ckpt, const RunFlags& f, std::size_t sample, const std::string& dir,
                std::ostream& out) {
  const ToyIViTConfig cfg = model_for_checkpoint(ckpt, f);
  RunFlags data_flags = f;
  if (data_flags.config_path.empty()) data_flags.config_path = ckpt + ".cfg";
  const RunConfig rc = resolve_run(data_flags);
  const ModelParams params = load_model(cfg, ckpt);
  const TaskData td = make_task(rc, cfg);
  if (sample >= td.validation.labels.size()) throw UsageError("attnmap: --sample out of range");
  Shape s = td.validation.inputs.shape();
  const std::size_t row = td.validation.inputs.size() / s[0];
  Tensor one(Shape{1, row}, td.validation.inputs.dtype());
  for (std::size_t i = 0; i < row; ++i) one.set(i, td.validation.inputs.at(sample * row + i));
  s[0] = 1;
  std::vector<AttnTrace> trace;
  forward(params, reshape(one, s), nullptr, &trace);
  std::filesystem::create_directories(dir);
  std::size_t files = 0;
  for (std::size_t layer = 0; layer < trace.size(); ++layer) {
    const ad::AttnProbe& p = trace[layer].probe;
    const Tensor eff = effective_attention(p, 0);
    for (std::size_t h = 0; h < eff.extent(0); ++h) {
      const std::string stem = dir + "/layer" + std::to_string(layer) + "_head" + std::to_string(h);
      if (p.full.empty()) {
        export_attention_heatmap(head_slice(sample_slice(p.a_q, 0), h), stem + "_aq.pgm");
        export_attention_heatmap(head_slice(sample_slice(p.a_k, 0), h), stem + "_ak.pgm");
        files += 2;
      }
      export_attention_heatmap(head_slice(eff, h), stem + "_attn.pgm");
      ++files;
    }
  }
  out << "wrote " << files << " heatmaps to " << dir << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Interactive multi-head self-attention: benchmarks, gradient checks and toy training"};
  app.name("imhsa-cli");
  app.require_subcommand(1, 1);

  auto* bench = app.add_subcommand("bench", "Scaling benchmark of the attention cores");
  std::vector<std::string> methods{"mhsa", "mhsa-ix", "decomp", "imhsa"};
  std::vector<std::size_t> tokens{196, 784, 3136, 12544};
  BenchConfig bcfg;
  std::size_t bench_seed = 0;
  std::string bench_out;
  bench->add_option("--methods", methods, "Comma-separated methods")->delimiter(',');
  bench->add_option("--tokens", tokens, "Comma-separated token counts (perfect squares)")->delimiter(',');
  bench->add_option("--heads", bcfg.heads, "Heads")->check(CLI::PositiveNumber);
  bench->add_option("--head-dim", bcfg.head_dim, "Per-head dimension")->check(CLI::PositiveNumber);
  bench->add_option("--landmarks", bcfg.landmarks, "Landmark count (perfect square)")->check(CLI::PositiveNumber);
  bench->add_option("--reps", bcfg.reps, "Timed repetitions")->check(CLI::Range(3, 1000000));
  bench->add_option("--cap", bcfg.cap, "Token cap for mhsa-ix");
  bench->add_option("--seed", bench_seed, "Input seed");
  bench->add_option("--out", bench_out, "CSV output path (default stdout)");

  auto* grad = app.add_subcommand("gradcheck", "Central-difference checks of every op and the toy model");
  std::string dtype = "f64";
  GradCheckOptions gopt;
  gopt.seed = kGradSuiteSeed;
  std::size_t instances = 20;
  std::string grad_out;
  grad->add_option("--dtype", dtype, "Only f64");
  grad->add_option("--eps", gopt.eps, "Finite-difference step")->check(CLI::PositiveNumber);
  grad->add_option("--tol", gopt.tol, "Relative tolerance")->check(CLI::PositiveNumber);
  grad->add_option("--samples", gopt.samples, "Coordinates checked on large tensors")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gopt.seed, "Seed");
  grad->add_option("--instances", instances, "Random instances per op")->check(CLI::PositiveNumber);
  grad->add_option("--out", grad_out, "CSV output path (default stdout)");

  auto* trn = app.add_subcommand("train", "Train the toy model");
  RunFlags train_flags;
  std::string metrics, ckpt;
  add_run_flags(trn, train_flags);
  trn->add_option("--metrics", metrics, "Per-step metrics CSV");
  trn->add_option("--checkpoint", ckpt, "Checkpoint output (config written next to it as .cfg)");

  auto* evl = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  RunFlags eval_flags;
  std::string eval_ckpt;
  add_run_flags(evl, eval_flags);
  evl->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();

  auto* abl = app.add_subcommand("ablate", "Decomposition / interaction ablation");
  RunFlags abl_flags;
  std::string abl_out;
  add_run_flags(abl, abl_flags);
  abl->add_option("--out", abl_out, "CSV output path (default stdout)");

  auto* diag = app.add_subcommand("diag", "Head diversity diagnostics across head counts");
  RunFlags diag_flags;
  std::vector<std::size_t> diag_heads{2, 4, 8};
  std::size_t diag_samples = 64;
  std::string diag_out;
  add_run_flags(diag, diag_flags, {"heads"});
  diag->add_option("--heads", diag_heads, "Comma-separated head counts")->delimiter(',');
  diag->add_option("--samples", diag_samples, "Validation samples probed")->check(CLI::PositiveNumber);
  diag->add_option("--out", diag_out, "CSV output path (default stdout)");

  auto* amap = app.add_subcommand("attnmap", "Export attention heatmaps (PGM) from a checkpoint");
  RunFlags amap_flags;
  std::string amap_ckpt, amap_dir = "attnmaps";
  std::size_t amap_sample = 0;
  add_run_flags(amap, amap_flags);
  amap->add_option("--checkpoint", amap_ckpt, "Checkpoint")->required();
  amap->add_option("--out-dir", amap_dir, "Output directory");
  amap->add_option("--sample", amap_sample, "Validation sample index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (bench->parsed()) {
      bcfg.seed = bench_seed;
      return run_bench(methods, tokens, bcfg, bench_out, out);
    }
    if (grad->parsed()) return run_gradcheck(dtype, gopt, instances, grad_out, out);
    if (trn->parsed()) return run_train(resolve_run(train_flags), metrics, ckpt, out);
    if (evl->parsed()) return run_evaluate(eval_ckpt, eval_flags, out);
    if (abl->parsed()) return run_ablate(resolve_run(abl_flags, {{"steps", "300"}}), abl_out, out);
    if (diag->parsed()) return run_diag(resolve_run(diag_flags, {{"steps", "300"}}), diag_heads, diag_samples,
                                        diag_out, out);
    if (amap->parsed()) return run_attnmap(amap_ckpt, amap_flags, amap_sample, amap_dir, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace imhsa
