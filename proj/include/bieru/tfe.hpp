#pragma once

// Two-channel feature extractor: an LSTM cell and a single-layer 1-D
// convolution read the same contextual vector p, and their outputs are
// concatenated into e = h ⊕ l.
//
// LSTM gate rows are stacked in the order (i, f, g, o):
//   gates = W_ih p + b_ih + W_hh h_prev + b_hh
//   c = σ(f) ⊙ c_prev + σ(i) ⊙ tanh(g),   h = σ(o) ⊙ tanh(c)
//
// Convolution: each filter slides over p with stride 1 and valid padding,
// adds its bias, applies relu, then max-pools globally. Ties in the pool go
// to the lowest position.

#include <concepts>
#include <sstream>
#include <string>
#include <vector>

#include "bieru/numkit.hpp"

namespace bieru {

struct TfeConfig {
  std::size_t d = 100;
  std::size_t hidden = 100;
  std::size_t filters = 50;
  std::size_t kernel = 3;

  std::size_t output_size() const { return hidden + filters; }

  void validate() const {
    if (hidden < 1) throw Error(ErrorKind::config, "tfe: hidden size must be >= 1");
    if (filters < 1) throw Error(ErrorKind::config, "tfe: filter count must be >= 1");
    if (kernel < 1 || kernel > d) {
      std::ostringstream os;
      os << "tfe: kernel must lie in [1, d] = [1, " << d << "], got " << kernel;
      throw Error(ErrorKind::config, os.str());
    }
  }

  friend bool operator==(const TfeConfig&, const TfeConfig&) = default;
};

struct TfeParams {
  TfeConfig config;
  Mat w_ih;  // 4H×d
  Mat w_hh;  // 4H×H
  Vec b_ih;  // 4H
  Vec b_hh;  // 4H
  Mat conv_w;  // F×K
  Vec conv_b;  // F

  static TfeParams zeros(const TfeConfig& cfg) {
    cfg.validate();
    TfeParams p;
    p.config = cfg;
    const std::size_t g = 4 * cfg.hidden;
    p.w_ih = Mat(g, cfg.d);
    p.w_hh = Mat(g, cfg.hidden);
    p.b_ih = Vec(g, 0.0);
    p.b_hh = Vec(g, 0.0);
    p.conv_w = Mat(cfg.filters, cfg.kernel);
    p.conv_b = Vec(cfg.filters, 0.0);
    return p;
  }

  /// Glorot-uniform weights, zero biases (forget gate bias included).
  static TfeParams init(const TfeConfig& cfg, Rng& rng) {
    TfeParams p = zeros(cfg);
    const std::size_t g = 4 * cfg.hidden;
    p.w_ih = init_params(rng, g, cfg.d, InitScheme::glorot_uniform);
    p.w_hh = init_params(rng, g, cfg.hidden, InitScheme::glorot_uniform);
    p.conv_w = init_params(rng, cfg.filters, cfg.kernel, InitScheme::glorot_uniform);
    return p;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, TfeParams>
void visit_tensors(P& p, F&& fn) {
  const auto& c = p.config;
  const std::size_t g = 4 * c.hidden;
  fn(std::string("lstm.W_ih"), std::span(p.w_ih.data), Shape{g, c.d}, false);
  fn(std::string("lstm.W_hh"), std::span(p.w_hh.data), Shape{g, c.hidden}, false);
  fn(std::string("lstm.b_ih"), std::span(p.b_ih), Shape{g}, true);
  fn(std::string("lstm.b_hh"), std::span(p.b_hh), Shape{g}, true);
  fn(std::string("conv.weight"), std::span(p.conv_w.data), Shape{c.filters, c.kernel}, false);
  fn(std::string("conv.bias"), std::span(p.conv_b), Shape{c.filters}, true);
}

inline std::size_t count_params(const TfeConfig& c) {
  const std::size_t g = 4 * c.hidden;
  return g * c.d + g * c.hidden + 2 * g + c.filters * c.kernel + c.filters;
}

struct TfeState {
  Vec h;
  Vec c;

  static TfeState zeros(std::size_t hidden) { return {Vec(hidden, 0.0), Vec(hidden, 0.0)}; }
};

struct LstmCache {
  Vec x;       // input p
  Vec h_prev;
  Vec c_prev;
  Vec i, f, g, o;  // post-nonlinearity gate values
  Vec c;
  Vec tanh_c;
};

struct LstmOutput {
  Vec h;
  TfeState state;
  LstmCache cache;
};

inline LstmOutput lstm_cell(const TfeParams& params, std::span<const double> p,
                            const TfeState& state) {
  const auto& cfg = params.config;
  const std::size_t hs = cfg.hidden;
  if (p.size() != cfg.d || state.h.size() != hs || state.c.size() != hs) {
    std::ostringstream os;
    os << "lstm_cell: expected input " << cfg.d << " and state " << hs << ", got input "
       << p.size() << ", h " << state.h.size() << ", c " << state.c.size();
    throw Error(ErrorKind::shape, os.str());
  }
  Vec gates = matvec(params.w_ih, p);
  const Vec rec = matvec(params.w_hh, state.h);
  for (std::size_t j = 0; j < gates.size(); ++j) gates[j] += rec[j] + params.b_ih[j] + params.b_hh[j];
  require_finite(gates, "lstm_cell gates");

  LstmOutput out;
  auto& c = out.cache;
  c.x.assign(p.begin(), p.end());
  c.h_prev = state.h;
  c.c_prev = state.c;
  c.i.resize(hs);
  c.f.resize(hs);
  c.g.resize(hs);
  c.o.resize(hs);
  c.c.resize(hs);
  c.tanh_c.resize(hs);
  out.h.resize(hs);
  for (std::size_t j = 0; j < hs; ++j) {
    c.i[j] = sigmoid(gates[j]);
    c.f[j] = sigmoid(gates[hs + j]);
    c.g[j] = std::tanh(gates[2 * hs + j]);
    c.o[j] = sigmoid(gates[3 * hs + j]);
    c.c[j] = c.f[j] * state.c[j] + c.i[j] * c.g[j];
    c.tanh_c[j] = std::tanh(c.c[j]);
    out.h[j] = c.o[j] * c.tanh_c[j];
  }
  out.state = {out.h, c.c};
  return out;
}

struct ConvCache {
  Vec x;
  std::vector<std::size_t> argmax;  // per filter, window start of the pooled response
  Vec pooled_pre;                   // per filter, pre-relu response at argmax
};

struct ConvOutput {
  Vec l;
  ConvCache cache;
};

inline ConvOutput conv_channel(const TfeParams& params, std::span<const double> p) {
  const auto& cfg = params.config;
  if (p.size() != cfg.d) {
    throw Error(ErrorKind::shape, "conv_channel: input length " + std::to_string(p.size()) +
                                      " != d = " + std::to_string(cfg.d));
  }
  if (p.size() < cfg.kernel) {
    throw Error(ErrorKind::shape, "conv_channel: input shorter than kernel");
  }
  const std::size_t positions = p.size() - cfg.kernel + 1;
  ConvOutput out;
  out.l.assign(cfg.filters, 0.0);
  out.cache.x.assign(p.begin(), p.end());
  out.cache.argmax.assign(cfg.filters, 0);
  out.cache.pooled_pre.assign(cfg.filters, 0.0);
  for (std::size_t f = 0; f < cfg.filters; ++f) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_at = 0;
    double best_pre = 0.0;
    for (std::size_t s = 0; s < positions; ++s) {
      double acc = params.conv_b[f];
      for (std::size_t q = 0; q < cfg.kernel; ++q) acc += params.conv_w(f, q) * p[s + q];
      const double act = acc > 0.0 ? acc : 0.0;
      if (act > best) {
        best = act;
        best_at = s;
        best_pre = acc;
      }
    }
    if (!std::isfinite(best)) {
      throw Error(ErrorKind::non_finite, "conv_channel: non-finite response in filter " + std::to_string(f));
    }
    out.l[f] = best;
    out.cache.argmax[f] = best_at;
    out.cache.pooled_pre[f] = best_pre;
  }
  return out;
}

struct TfeCache {
  LstmCache lstm;
  ConvCache conv;
};

struct TfeOutput {
  Vec e;
  TfeState state;
  TfeCache cache;
};

inline TfeOutput tfe_forward(const TfeParams& params, std::span<const double> p,
                             const TfeState& state) {
  auto lstm = lstm_cell(params, p, state);
  auto conv = conv_channel(params, p);
  TfeOutput out;
  out.e = concat(lstm.h, conv.l);
  out.state = std::move(lstm.state);
  out.cache = {std::move(lstm.cache), std::move(conv.cache)};
  return out;
}

struct TfeInputGrads {
  Vec p;
  TfeState state_prev;  // gradients wrt (h_prev, c_prev)
};

/// Accumulates parameter gradients into `grad`. `grad_state_next` carries
/// the gradient arriving at (h_t, c_t) from step t+1; pass zeros at the end
/// of a chain.
inline TfeInputGrads tfe_backward_into(const TfeParams& params, const TfeCache& cache,
                                       std::span<const double> grad_e,
                                       const TfeState& grad_state_next, TfeParams& grad) {
  const auto& cfg = params.config;
  const std::size_t hs = cfg.hidden;
  const auto& lc = cache.lstm;
  const auto& cc = cache.conv;
  if (lc.x.size() != cfg.d || lc.i.size() != hs || cc.argmax.size() != cfg.filters ||
      cc.x.size() != cfg.d) {
    throw Error(ErrorKind::stale_cache, "tfe_backward: cache does not match parameters");
  }
  if (grad_e.size() != cfg.output_size() || grad_state_next.h.size() != hs ||
      grad_state_next.c.size() != hs) {
    throw Error(ErrorKind::shape, "tfe_backward: upstream gradient shape mismatch");
  }
  if (grad.config != cfg) throw Error(ErrorKind::shape, "tfe_backward: gradient buffer config mismatch");

  TfeInputGrads out;
  out.p.assign(cfg.d, 0.0);

  // LSTM branch.
  Vec d_gates(4 * hs, 0.0);
  out.state_prev.c.assign(hs, 0.0);
  for (std::size_t j = 0; j < hs; ++j) {
    const double dh = grad_e[j] + grad_state_next.h[j];
    const double d_o = dh * lc.tanh_c[j];
    const double dc = grad_state_next.c[j] + dh * lc.o[j] * (1.0 - lc.tanh_c[j] * lc.tanh_c[j]);
    const double d_i = dc * lc.g[j];
    const double d_f = dc * lc.c_prev[j];
    const double d_g = dc * lc.i[j];
    out.state_prev.c[j] = dc * lc.f[j];
    d_gates[j] = d_i * lc.i[j] * (1.0 - lc.i[j]);
    d_gates[hs + j] = d_f * lc.f[j] * (1.0 - lc.f[j]);
    d_gates[2 * hs + j] = d_g * (1.0 - lc.g[j] * lc.g[j]);
    d_gates[3 * hs + j] = d_o * lc.o[j] * (1.0 - lc.o[j]);
  }
  add_outer(grad.w_ih, d_gates, lc.x);
  add_outer(grad.w_hh, d_gates, lc.h_prev);
  axpy(1.0, d_gates, grad.b_ih);
  axpy(1.0, d_gates, grad.b_hh);
  out.p = matvec_t(params.w_ih, d_gates);
  out.state_prev.h = matvec_t(params.w_hh, d_gates);

  // Convolution branch: the pooled gradient reaches only the argmax window,
  // and only when the relu there was active.
  for (std::size_t f = 0; f < cfg.filters; ++f) {
    const double gl = grad_e[hs + f];
    if (gl == 0.0 || !(cc.pooled_pre[f] > 0.0)) continue;
    const std::size_t s = cc.argmax[f];
    grad.conv_b[f] += gl;
    for (std::size_t q = 0; q < cfg.kernel; ++q) {
      grad.conv_w(f, q) += gl * cc.x[s + q];
      out.p[s + q] += gl * params.conv_w(f, q);
    }
  }
  return out;
}

struct TfeGrads {
  TfeParams params;
  Vec p;
  TfeState state_prev;
};

inline TfeGrads tfe_backward(const TfeParams& params, const TfeCache& cache,
                             std::span<const double> grad_e, const TfeState& grad_state_next) {
  TfeGrads g;
  g.params = zeros_like(params);
  auto inputs = tfe_backward_into(params, cache, grad_e, grad_state_next, g.params);
  g.p = std::move(inputs.p);
  g.state_prev = std::move(inputs.state_prev);
  return g;
}

}  // namespace bieru
