#include "imhsa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "imhsa/ops.hpp"

namespace imhsa {

namespace {

using Grads = std::vector<std::optional<Tensor>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    require(v.tape != nullptr, "autodiff: variable has no tape");
    if (t == nullptr) t = v.tape;
    require(v.tape == t, "autodiff: variables belong to different tapes");
  }
  return *t;
}

std::size_t rows_of(const Tensor& t) { return t.size() / t.extent(-1); }

// [..., m, k] -> [prod(...) * m, k]
Tensor flatten_rows(const Tensor& t) {
  return reshape(t, Shape{rows_of(t), t.extent(-1)});
}

// Scatter-add of pooled gradients back onto the source grid. `g` holds
// [batch, out_h, out_w, d] values in any compatible shape.
Tensor pool_backward(const Tensor& g, const Shape& in_shape, std::size_t gh, std::size_t gw, std::size_t oh,
                     std::size_t ow) {
  Tensor out(in_shape, g.dtype());
  const std::size_t d = in_shape.back();
  const std::size_t batch = shape_numel(in_shape) / (gh * gw * d);
  dispatch(g.dtype(), [&]<typename T>() {
    auto gi = g.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < oh; ++i) {
        const std::size_t r0 = i * gh / oh, r1 = (i + 1) * gh / oh;
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t c0 = j * gw / ow, c1 = (j + 1) * gw / ow;
          const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
          const T* src = gi.data() + ((b * oh + i) * ow + j) * d;
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t c = c0; c < c1; ++c) {
              T* dst = o.data() + ((b * gh + r) * gw + c) * d;
              for (std::size_t e = 0; e < d; ++e) dst[e] += src[e] * inv;
            }
          }
        }
      }
    }
  });
  return out;
}

Tensor avg3x3_backward(const Tensor& g) {
  const std::size_t gh = g.extent(-3), gw = g.extent(-2), c = g.extent(-1);
  const std::size_t batch = g.size() / (gh * gw * c);
  Tensor out(g.shape(), g.dtype());
  dispatch(g.dtype(), [&]<typename T>() {
    auto gi = g.data<T>();
    auto o = out.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t r = 0; r < gh; ++r) {
        const std::size_t r0 = r == 0 ? 0 : r - 1, r1 = std::min(gh, r + 2);
        for (std::size_t col = 0; col < gw; ++col) {
          const std::size_t c0 = col == 0 ? 0 : col - 1, c1 = std::min(gw, col + 2);
          const T inv = T(1) / static_cast<T>((r1 - r0) * (c1 - c0));
          const T* src = gi.data() + ((b * gh + r) * gw + col) * c;
          for (std::size_t rr = r0; rr < r1; ++rr) {
            for (std::size_t cc = c0; cc < c1; ++cc) {
              T* dst = o.data() + ((b * gh + rr) * gw + cc) * c;
              for (std::size_t e = 0; e < c; ++e) dst[e] += src[e] * inv;
            }
          }
        }
      }
    }
  });
  return out;
}

// Column sums of a [rows, c] view.
Tensor sum_rows(const Tensor& g) {
  const std::size_t c = g.extent(-1);
  const std::size_t rows = rows_of(g);
  Tensor out({c}, g.dtype());
  dispatch(g.dtype(), [&]<typename T>() {
    auto gi = g.data<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t e = 0; e < c; ++e) o[e] += gi[r * c + e];
    }
  });
  return out;
}

}  // namespace

const Tensor& Var::value() const {
  require(tape != nullptr, "autodiff: variable has no tape");
  return tape->value(*this);
}

void Tape::check(Var v) const {
  require(v.tape == this, "autodiff: variable belongs to another tape");
  require(v.id < nodes_.size(), "autodiff: unknown variable id " + std::to_string(v.id));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  require(!value.empty(), "autodiff: leaf value is empty");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string op, Tensor value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const Var& in : inputs) {
    check(in);
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  n.requires_grad = n.requires_grad && record_;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  check(loss);
  require(record_, "autodiff: backward on a tape that does not record gradients");
  const Tensor& lv = nodes_[loss.id].value;
  require(lv.size() == 1, "autodiff: loss must hold a single element, got " + shape_str(lv.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss.id] = Tensor::filled(lv.shape(), 1.0, lv.dtype());
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || !grads_[i]) continue;
    Grads in_grads = n.backward(*this, n.value, *grads_[i]);
    require(in_grads.size() == n.inputs.size(), "autodiff: adjoint of '" + n.op + "' returned wrong arity");
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      const std::size_t id = n.inputs[j];
      if (!in_grads[j] || !nodes_[id].requires_grad) continue;
      Tensor& g = *in_grads[j];
      require(g.shape() == nodes_[id].value.shape(),
              "autodiff: adjoint of '" + n.op + "' produced " + shape_str(g.shape()) + " for input " +
                  shape_str(nodes_[id].value.shape()));
      if (grads_[id]) {
        grads_[id] = add(*grads_[id], g);
      } else {
        grads_[id] = std::move(g);
      }
    }
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::has_grad(Var v) const {
  check(v);
  return v.id < grads_.size() && grads_[v.id].has_value();
}

Tensor Tape::grad(Var v) const {
  check(v);
  if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
  return Tensor(nodes_[v.id].value.shape(), nodes_[v.id].value.dtype());
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

const std::string& Tape::op(Var v) const {
  check(v);
  return nodes_[v.id].op;
}

namespace ad {

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Var in[] = {a, b};
  return t.record("add", imhsa::add(a.value(), b.value(), t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{g, g}; });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Var in[] = {a, b};
  return t.record("sub", imhsa::sub(a.value(), b.value(), t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{g, imhsa::scale(g, -1.0)}; });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Var in[] = {a, b};
  return t.record("mul", imhsa::mul(a.value(), b.value(), t.meter()), in,
                  [a, b](const Tape& tp, const Tensor&, const Tensor& g) {
                    return Grads{imhsa::mul(g, tp.value(b)), imhsa::mul(g, tp.value(a))};
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of({a});
  const Var in[] = {a};
  return t.record("scale", imhsa::scale(a.value(), s, t.meter()), in,
                  [s](const Tape&, const Tensor&, const Tensor& g) { return Grads{imhsa::scale(g, s)}; });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Var in[] = {a, b};
  return t.record("matmul", imhsa::matmul(a.value(), b.value(), t.meter()), in,
                  [a, b](const Tape& tp, const Tensor&, const Tensor& g) {
                    const Tensor& av = tp.value(a);
                    const Tensor& bv = tp.value(b);
                    Tensor da = imhsa::matmul_nt(g, bv);
                    Tensor db;
                    if (bv.rank() == 2 && av.rank() > 2) {
                      db = imhsa::matmul(transpose_last2(flatten_rows(av)), flatten_rows(g));
                    } else {
                      db = imhsa::matmul(transpose_last2(av), g);
                    }
                    return Grads{std::move(da), std::move(db)};
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Var in[] = {a, b};
  return t.record("matmul_nt", imhsa::matmul_nt(a.value(), b.value(), t.meter()), in,
                  [a, b](const Tape& tp, const Tensor&, const Tensor& g) {
                    const Tensor& av = tp.value(a);
                    const Tensor& bv = tp.value(b);
                    Tensor da = imhsa::matmul(g, bv);
                    Tensor db;
                    if (bv.rank() == 2 && av.rank() > 2) {
                      db = imhsa::matmul(transpose_last2(flatten_rows(g)), flatten_rows(av));
                    } else {
                      db = imhsa::matmul(transpose_last2(g), av);
                    }
                    return Grads{std::move(da), std::move(db)};
                  });
}

Var softmax(Var x) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  return t.record("softmax", softmax_lastdim(x.value(), t.meter()), in,
                  [](const Tape&, const Tensor& y, const Tensor& g) {
                    const std::size_t n = y.extent(-1);
                    const std::size_t rows = y.size() / n;
                    Tensor dx(y.shape(), y.dtype());
                    dispatch(y.dtype(), [&]<typename T>() {
                      auto yv = y.data<T>();
                      auto gv = g.data<T>();
                      auto o = dx.data<T>();
                      for (std::size_t r = 0; r < rows; ++r) {
                        const std::size_t base = r * n;
                        T dot = 0;
                        for (std::size_t i = 0; i < n; ++i) dot += gv[base + i] * yv[base + i];
                        for (std::size_t i = 0; i < n; ++i) o[base + i] = yv[base + i] * (gv[base + i] - dot);
                      }
                    });
                    return Grads{std::move(dx)};
                  });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of({x, gamma, beta});
  const Var in[] = {x, gamma, beta};
  return t.record(
      "layernorm", imhsa::layernorm(x.value(), gamma.value(), beta.value(), eps, t.meter()), in,
      [x, gamma, eps](const Tape& tp, const Tensor&, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const Tensor& gm = tp.value(gamma);
        const std::size_t c = xv.extent(-1);
        const std::size_t rows = xv.size() / c;
        Tensor dx(xv.shape(), xv.dtype());
        Tensor dg({c}, xv.dtype());
        Tensor db({c}, xv.dtype());
        dispatch(xv.dtype(), [&]<typename T>() {
          auto xs = xv.data<T>();
          auto gs = g.data<T>();
          auto gam = gm.data<T>();
          auto o = dx.data<T>();
          auto og = dg.data<T>();
          auto ob = db.data<T>();
          std::vector<double> xhat(c), dy(c);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * c;
            double mean = 0.0;
            for (std::size_t i = 0; i < c; ++i) mean += xs[base + i];
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              const double dv = xs[base + i] - mean;
              var += dv * dv;
            }
            var /= static_cast<double>(c);
            const double rstd = 1.0 / std::sqrt(var + eps);
            double mean_dy = 0.0, mean_dy_xhat = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              xhat[i] = (xs[base + i] - mean) * rstd;
              dy[i] = static_cast<double>(gs[base + i]) * gam[i];
              mean_dy += dy[i];
              mean_dy_xhat += dy[i] * xhat[i];
              og[i] += static_cast<T>(gs[base + i] * xhat[i]);
              ob[i] += gs[base + i];
            }
            mean_dy /= static_cast<double>(c);
            mean_dy_xhat /= static_cast<double>(c);
            for (std::size_t i = 0; i < c; ++i) {
              o[base + i] = static_cast<T>(rstd * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat));
            }
          }
        });
        return Grads{std::move(dx), std::move(dg), std::move(db)};
      });
}

Var gelu(Var x) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  return t.record("gelu", imhsa::gelu(x.value(), t.meter()), in,
                  [x](const Tape& tp, const Tensor&, const Tensor& g) {
                    const Tensor& xv = tp.value(x);
                    Tensor dx(xv.shape(), xv.dtype());
                    dispatch(xv.dtype(), [&]<typename T>() {
                      constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
                      auto xs = xv.data<T>();
                      auto gs = g.data<T>();
                      auto o = dx.data<T>();
                      for (std::size_t i = 0; i < xs.size(); ++i) {
                        const double v = xs[i];
                        const double th = std::tanh(k * (v + 0.044715 * v * v * v));
                        const double d =
                            0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * v * v);
                        o[i] = static_cast<T>(gs[i] * d);
                      }
                    });
                    return Grads{std::move(dx)};
                  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of({x, bias});
  const Var in[] = {x, bias};
  return t.record("add_bias", imhsa::add_bias(x.value(), bias.value(), t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{g, sum_rows(g)}; });
}

Var transpose_last2(Var a) {
  Tape& t = tape_of({a});
  const Var in[] = {a};
  return t.record("transpose", imhsa::transpose_last2(a.value(), t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{imhsa::transpose_last2(g)}; });
}

Var concat_lastdim(std::span<const Var> parts) {
  require(!parts.empty(), "concat: no inputs");
  Tape& t = *parts[0].tape;
  std::vector<Tensor> values;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require(p.tape == &t, "autodiff: variables belong to different tapes");
    values.push_back(p.value());
    widths.push_back(p.value().extent(-1));
  }
  return t.record("concat", imhsa::concat_lastdim(values, t.meter()), parts,
                  [widths](const Tape&, const Tensor& out, const Tensor& g) {
                    const std::size_t total = out.extent(-1);
                    const std::size_t rows = out.size() / total;
                    Grads res;
                    std::size_t offset = 0;
                    for (std::size_t w : widths) {
                      Shape s = out.shape();
                      s.back() = w;
                      Tensor part(s, out.dtype());
                      dispatch(out.dtype(), [&]<typename T>() {
                        auto gs = g.data<T>();
                        auto o = part.data<T>();
                        for (std::size_t r = 0; r < rows; ++r) {
                          std::copy_n(gs.data() + r * total + offset, w, o.data() + r * w);
                        }
                      });
                      res.emplace_back(std::move(part));
                      offset += w;
                    }
                    return res;
                  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of({a});
  const Var in[] = {a};
  const Shape original = a.value().shape();
  return t.record("reshape", imhsa::reshape(a.value(), std::move(shape), t.meter()), in,
                  [original](const Tape&, const Tensor&, const Tensor& g) {
                    return Grads{imhsa::reshape(g, original)};
                  });
}

Var adaptive_avg_pool2d(Var grid, std::size_t out_h, std::size_t out_w) {
  Tape& t = tape_of({grid});
  const Var in[] = {grid};
  const Shape s = grid.value().shape();
  require(s.size() >= 3, "adaptive_avg_pool2d: grid must be [..., Hg, Wg, d]");
  const std::size_t gh = s[s.size() - 3], gw = s[s.size() - 2];
  return t.record("adaptive_pool", imhsa::adaptive_avg_pool2d(grid.value(), out_h, out_w, t.meter()), in,
                  [s, gh, gw, out_h, out_w](const Tape&, const Tensor&, const Tensor& g) {
                    return Grads{pool_backward(g, s, gh, gw, out_h, out_w)};
                  });
}

Var adaptive_avg_pool_tokens(Var tokens, std::size_t grid_h, std::size_t grid_w, std::size_t out_h,
                             std::size_t out_w) {
  Tape& t = tape_of({tokens});
  const Var in[] = {tokens};
  const Shape s = tokens.value().shape();
  return t.record("adaptive_pool",
                  imhsa::adaptive_avg_pool_tokens(tokens.value(), grid_h, grid_w, out_h, out_w, t.meter()), in,
                  [s, grid_h, grid_w, out_h, out_w](const Tape&, const Tensor&, const Tensor& g) {
                    return Grads{pool_backward(g, s, grid_h, grid_w, out_h, out_w)};
                  });
}

Var avg_pool3x3(Var grid) {
  Tape& t = tape_of({grid});
  const Var in[] = {grid};
  return t.record("avg_pool3x3", imhsa::avg_pool3x3(grid.value(), t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{avg3x3_backward(g)}; });
}

Var split_heads(Var x, std::size_t heads) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  return t.record("split_heads", imhsa::split_heads(x.value(), heads, t.meter()), in,
                  [](const Tape&, const Tensor&, const Tensor& g) { return Grads{imhsa::merge_heads(g)}; });
}

Var merge_heads(Var x) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  const std::size_t heads = x.value().extent(-3);
  return t.record("merge_heads", imhsa::merge_heads(x.value(), t.meter()), in,
                  [heads](const Tape&, const Tensor&, const Tensor& g) {
                    return Grads{imhsa::split_heads(g, heads)};
                  });
}

Var head_mix(Var w, Var stack) {
  Tape& t = tape_of({w, stack});
  const Var in[] = {w, stack};
  return t.record("head_mix", imhsa::head_mix(w.value(), stack.value(), t.meter()), in,
                  [w, stack](const Tape& tp, const Tensor&, const Tensor& g) {
                    const Tensor& wv = tp.value(w);
                    const Tensor& sv = tp.value(stack);
                    const std::size_t h = wv.extent(0);
                    const std::size_t plane = sv.extent(-2) * sv.extent(-1);
                    const std::size_t batch = sv.size() / (h * plane);
                    Tensor dw({h, h}, wv.dtype());
                    dispatch(wv.dtype(), [&]<typename T>() {
                      auto gs = g.data<T>();
                      auto ss = sv.data<T>();
                      auto o = dw.data<T>();
                      for (std::size_t b = 0; b < batch; ++b) {
                        for (std::size_t i = 0; i < h; ++i) {
                          const T* gi = gs.data() + (b * h + i) * plane;
                          for (std::size_t j = 0; j < h; ++j) {
                            const T* sj = ss.data() + (b * h + j) * plane;
                            T acc = 0;
                            for (std::size_t e = 0; e < plane; ++e) acc += gi[e] * sj[e];
                            o[i * h + j] += acc;
                          }
                        }
                      }
                    });
                    return Grads{std::move(dw), imhsa::head_mix(imhsa::transpose_last2(wv), g)};
                  });
}

Var mean_axis(Var x, std::ptrdiff_t axis) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  const Shape s = x.value().shape();
  const std::size_t ax = axis < 0 ? static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s.size()) + axis)
                                  : static_cast<std::size_t>(axis);
  Tensor out = imhsa::mean_axis(x.value(), axis, t.meter());
  return t.record("mean_axis", std::move(out), in, [s, ax](const Tape&, const Tensor&, const Tensor& g) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[ax];
    Tensor dx(s, g.dtype());
    dispatch(g.dtype(), [&]<typename T>() {
      auto gs = g.data<T>();
      auto o = dx.data<T>();
      const T inv = T(1) / static_cast<T>(n);
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t e = 0; e < inner; ++e) o[(a * n + k) * inner + e] = gs[a * inner + e] * inv;
        }
      }
    });
    return Grads{std::move(dx)};
  });
}

Var sum(Var x) {
  Tape& t = tape_of({x});
  const Var in[] = {x};
  Tensor out = Tensor::filled({1}, sum_all(x.value()), x.value().dtype());
  if (t.meter()) {
    t.meter()->add_flops(x.value().size());
    out.track(t.meter());
  }
  const Shape s = x.value().shape();
  return t.record("sum", std::move(out), in, [s](const Tape&, const Tensor&, const Tensor& g) {
    return Grads{Tensor::filled(s, g.at(0), g.dtype())};
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& t = tape_of({logits});
  const Var in[] = {logits};
  const Tensor& lv = logits.value();
  require(lv.rank() == 2, "cross_entropy: logits must be [B, K], got " + shape_str(lv.shape()));
  const std::size_t b = lv.extent(0), k = lv.extent(1);
  require(labels.size() == b, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                                  std::to_string(b));
  for (std::size_t y : labels) {
    if (y >= k) throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " out of range");
  }
  Tensor probs = softmax_lastdim(lv);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) loss -= std::log(std::max(probs.at(i * k + labels[i]), 1e-300));
  loss /= static_cast<double>(b);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Tensor out = Tensor::filled({1}, loss, lv.dtype());
  if (t.meter()) {
    t.meter()->add_flops(6 * lv.size());
    out.track(t.meter());
  }
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return t.record("cross_entropy", std::move(out), in,
                  [probs = std::move(probs), ys, b, k](const Tape&, const Tensor&, const Tensor& g) {
                    const double s = g.at(0) / static_cast<double>(b);
                    Tensor d = imhsa::scale(probs, s);
                    for (std::size_t i = 0; i < b; ++i) {
                      d.set(i * k + ys[i], d.at(i * k + ys[i]) - s);
                    }
                    return Grads{std::move(d)};
                  });
}

namespace {

void check_heads(const Tensor& t, const AttnConfig& cfg, std::size_t rows, const char* what) {
  require(t.rank() >= 3 && t.extent(-3) == cfg.num_heads && t.extent(-2) == rows &&
              t.extent(-1) == cfg.head_dim,
          std::string(what) + ": expected [..., " + std::to_string(cfg.num_heads) + ", " + std::to_string(rows) +
              ", " + std::to_string(cfg.head_dim) + "], got " + shape_str(t.shape()));
}

Var normalize(Var scores, const Var* w1, const Var* w2) {
  if (w1) scores = head_mix(*w1, scores);
  scores = softmax(scores);
  if (w2) scores = head_mix(*w2, scores);
  return scores;
}

}  // namespace

Var attend(Method method, Var q, Var k, Var v, const AttnConfig& cfg, const MixVars* mix, AttnProbe* probe) {
  cfg.validate();
  if (uses_interaction(method) && !mix) {
    throw std::invalid_argument(std::string(method_name(method)) + " requires head-mix weights");
  }
  const std::size_t n = cfg.tokens();
  check_heads(q.value(), cfg, n, "attend q");
  check_heads(k.value(), cfg, n, "attend k");
  check_heads(v.value(), cfg, n, "attend v");
  const bool ix = uses_interaction(method);
  const double s = cfg.scale();

  if (is_quadratic(method)) {
    Var a = normalize(scale(matmul_nt(q, k), s), ix ? &mix->w1_q : nullptr, ix ? &mix->w2_q : nullptr);
    if (probe) probe->full = a.value();
    return matmul(a, v);
  }

  auto pool = [&](Var x) {
    return adaptive_avg_pool_tokens(x, cfg.grid_h, cfg.grid_w, cfg.landmark_h, cfg.landmark_w);
  };
  Var q_lm = pool(q);
  Var k_lm = pool(k);
  Var a_k = normalize(scale(matmul_nt(q_lm, k), s), ix ? &mix->w1_k : nullptr, ix ? &mix->w2_k : nullptr);
  Var a_q = normalize(scale(matmul_nt(q, k_lm), s), ix ? &mix->w1_q : nullptr, ix ? &mix->w2_q : nullptr);
  if (probe) {
    probe->a_q = a_q.value();
    probe->a_k = a_k.value();
  }
  return matmul(a_q, matmul(a_k, v));
}

}  // namespace ad

bool GradReport::pass() const {
  return std::all_of(params.begin(), params.end(), [](const ParamReport& p) { return p.pass; });
}

double GradReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

GradReport grad_check(const ScalarFn& f, const NamedTensors& params, const GradCheckOptions& options) {
  require(!params.empty(), "grad_check: no parameters");
  for (const auto& [name, t] : params) {
    require(t.dtype() == DType::f64, "grad_check: parameter '" + name + "' must be f64");
  }

  auto evaluate = [&](const NamedTensors& ps, Tape& tape, std::vector<Var>& vars) {
    vars.clear();
    for (const auto& [name, t] : ps) vars.push_back(tape.leaf(t));
    Var loss = f(tape, vars);
    require(loss.tape == &tape, "grad_check: loss is not on the evaluation tape");
    require(loss.value().size() == 1, "grad_check: loss must be a scalar");
    const double v = loss.value().at(0);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return std::pair{loss, v};
  };

  Tape tape;
  std::vector<Var> vars;
  auto [loss, base] = evaluate(params, tape, vars);
  (void)base;
  tape.backward(loss);

  Rng rng(options.seed);
  GradReport report;
  NamedTensors work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = tape.grad(vars[p]);
    const std::size_t size = params[p].second.size();
    std::vector<std::size_t> coords;
    if (size > options.sample_threshold) {
      std::set<std::size_t> chosen;
      const std::size_t want = std::min(options.samples, size);
      while (chosen.size() < want) chosen.insert(rng.below(size));
      coords.assign(chosen.begin(), chosen.end());
    } else {
      coords.resize(size);
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    }

    ParamReport pr;
    pr.name = params[p].first;
    pr.coords_checked = coords.size();
    Tensor& x = work[p].second;
    for (std::size_t c : coords) {
      const double orig = x.at(c);
      x.set(c, orig + options.eps);
      Tape tp(false);
      std::vector<Var> vs;
      const double up = evaluate(work, tp, vs).second;
      x.set(c, orig - options.eps);
      Tape tm(false);
      const double down = evaluate(work, tm, vs).second;
      x.set(c, orig);
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic.at(c);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > pr.max_rel_error || c == coords.front()) {
        pr.max_rel_error = std::max(pr.max_rel_error, err);
        pr.worst_index = c;
        pr.worst_analytic = a;
        pr.worst_numeric = numeric;
      }
    }
    pr.pass = pr.max_rel_error <= options.tol;
    report.params.push_back(std::move(pr));
  }
  return report;
}

}  // namespace imhsa
