#pragma once

// Reverse-mode differentiation over the tensor and attention op set.
//
// A Tape is an append-only list of nodes. Each node holds its forward value,
// the ids of its inputs (always earlier nodes) and an adjoint closure. backward()
// walks the nodes once in reverse order and accumulates input gradients
// additively, so a value consumed twice receives both contributions.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "imhsa/attention.hpp"
#include "imhsa/data.hpp"
#include "imhsa/tensor.hpp"

namespace imhsa {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Adjoint: given the node's output value and the incoming gradient, returns one
/// entry per input (nullopt when that input needs no gradient).
using Backward =
    std::function<std::vector<std::optional<Tensor>>(const Tape&, const Tensor& out, const Tensor& grad)>;

class Tape {
 public:
  /// With `record_grads` false the tape only evaluates; no adjoints are kept.
  explicit Tape(bool record_grads = true, Meter* meter = nullptr) : record_(record_grads), meter_(meter) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var record(std::string op, Tensor value, std::span<const Var> inputs, Backward backward);

  /// Seeds d loss / d loss = 1 and propagates. The loss must hold one element.
  /// Clears gradients from any previous call first.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  bool has_grad(Var v) const;
  /// Gradient of the last backward() w.r.t. `v`; zeros when `v` did not influence the loss.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& op(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  Meter* meter() const { return meter_; }
  bool recording() const { return record_; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };

  void check(Var v) const;

  bool record_;
  Meter* meter_;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var softmax(Var x);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gelu(Var x);
Var add_bias(Var x, Var bias);
Var transpose_last2(Var a);
Var concat_lastdim(std::span<const Var> parts);
Var reshape(Var a, Shape shape);
Var adaptive_avg_pool2d(Var grid, std::size_t out_h, std::size_t out_w);
Var adaptive_avg_pool_tokens(Var tokens, std::size_t grid_h, std::size_t grid_w, std::size_t out_h,
                             std::size_t out_w);
Var avg_pool3x3(Var grid);
Var split_heads(Var x, std::size_t heads);
Var merge_heads(Var x);
Var head_mix(Var w, Var stack);
Var mean_axis(Var x, std::ptrdiff_t axis);
Var sum(Var x);
/// Mean cross-entropy of logits [B, K] against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

struct MixVars {
  Var w1_q, w2_q, w1_k, w2_k;
};

/// Attention factors captured during a taped forward, for diagnostics.
struct AttnProbe {
  Tensor a_q;   // decomposed methods: [..., H, N, L]
  Tensor a_k;   // decomposed methods: [..., H, L, N]
  Tensor full;  // quadratic methods: [..., H, N, N]
};

/// Taped attention core on stacks [..., H, N, d]; same math as imhsa::attend.
Var attend(Method method, Var q, Var k, Var v, const AttnConfig& cfg, const MixVars* mix,
           AttnProbe* probe = nullptr);

}  // namespace ad

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Tensors with more elements than this are checked on `samples` seeded coordinates.
  std::size_t sample_threshold = 10000;
  std::size_t samples = 64;
  std::uint64_t seed = 0;
};

struct ParamReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool pass = true;
  // Worst coordinate.
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradReport {
  std::vector<ParamReport> params;
  bool pass() const;
  double max_rel_error() const;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `f` at `params` (all f64) with central
/// differences. Per coordinate: |a - n| / max(|a|, |n|, 1e-8).
GradReport grad_check(const ScalarFn& f, const NamedTensors& params, const GradCheckOptions& options = {});

}  // namespace imhsa
