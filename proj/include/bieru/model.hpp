#pragma once

// Bidirectional emotional recurrent model.
//
// One ERU step is GNTB → dropout → TFE → dropout. Each direction owns its
// own GNTB and TFE parameters and runs over the conversation with:
//   gc: the GNTB context is the direction's previous output p (zero first)
//   lc: the GNTB context is the previously visited utterance (zero first)
// The TFE LSTM state threads through the direction in both variants. The
// per-utterance feature is e_fwd ⊕ e_bwd, re-aligned to original order.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bieru/gntb.hpp"
#include "bieru/heads_loss.hpp"
#include "bieru/numkit.hpp"
#include "bieru/tfe.hpp"

namespace bieru {

enum class Variant { gc, lc };
enum class Ablation { full, gntb_only, tfe_only };

inline std::string_view to_string(Variant v) { return v == Variant::gc ? "gc" : "lc"; }

inline Variant parse_variant(std::string_view s) {
  if (s == "gc") return Variant::gc;
  if (s == "lc") return Variant::lc;
  throw Error(ErrorKind::config, "unknown variant '" + std::string(s) + "'");
}

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::gntb_only: return "gntb-only";
    case Ablation::tfe_only: return "tfe-only";
  }
  return "unknown";
}

inline Ablation parse_ablation(std::string_view s) {
  if (s == "full") return Ablation::full;
  if (s == "gntb-only") return Ablation::gntb_only;
  if (s == "tfe-only") return Ablation::tfe_only;
  throw Error(ErrorKind::config, "unknown ablation '" + std::string(s) + "'");
}

struct ModelConfig {
  GntbConfig gntb;
  TfeConfig tfe;
  Variant variant = Variant::lc;
  Task task = Task::classify;
  std::size_t n_class = 6;
  double dropout = 0.0;
  Ablation ablation = Ablation::full;
  bool head_bias = false;

  std::size_t d() const { return gntb.d; }
  bool uses_gntb() const { return ablation != Ablation::tfe_only; }
  bool uses_tfe() const { return ablation != Ablation::gntb_only; }

  /// Feature length produced by one direction.
  std::size_t direction_size() const { return uses_tfe() ? tfe.output_size() : gntb.d; }
  /// D_e
  std::size_t feature_size() const { return 2 * direction_size(); }
  std::size_t head_outputs() const { return task == Task::classify ? n_class : 1; }

  void validate() const {
    if (tfe.d != gntb.d) {
      std::ostringstream os;
      os << "model: TFE input " << tfe.d << " != GNTB output " << gntb.d;
      throw Error(ErrorKind::config, os.str());
    }
    if (uses_gntb()) gntb.validate();
    if (uses_tfe()) tfe.validate();
    if (task == Task::classify && n_class < 1) throw Error(ErrorKind::config, "model: n_class must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::config, "model: dropout must lie in [0, 1)");
  }
};

struct DirectionParams {
  std::optional<GntbParams> gntb;
  std::optional<TfeParams> tfe;
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, DirectionParams>
void visit_tensors(P& p, F&& fn) {
  if (p.gntb) visit_tensors(*p.gntb, prefixed("gntb.", fn));
  if (p.tfe) visit_tensors(*p.tfe, prefixed("tfe.", fn));
}

struct BieruModel {
  ModelConfig config;
  DirectionParams fwd;
  DirectionParams bwd;
  HeadParams head;

  static BieruModel zeros(const ModelConfig& cfg) {
    cfg.validate();
    BieruModel m;
    m.config = cfg;
    for (auto* dir : {&m.fwd, &m.bwd}) {
      if (cfg.uses_gntb()) dir->gntb = GntbParams::zeros(cfg.gntb);
      if (cfg.uses_tfe()) dir->tfe = TfeParams::zeros(cfg.tfe);
    }
    m.head = HeadParams::zeros(cfg.task, cfg.feature_size(), cfg.head_outputs(), cfg.head_bias);
    return m;
  }

  /// Draw order: fwd GNTB, fwd TFE, bwd GNTB, bwd TFE, head.
  static BieruModel init(const ModelConfig& cfg, Rng& rng) {
    BieruModel m = zeros(cfg);
    for (auto* dir : {&m.fwd, &m.bwd}) {
      if (dir->gntb) dir->gntb = GntbParams::init(cfg.gntb, rng);
      if (dir->tfe) dir->tfe = TfeParams::init(cfg.tfe, rng);
    }
    m.head = HeadParams::init(cfg.task, cfg.feature_size(), cfg.head_outputs(), cfg.head_bias, rng);
    return m;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, BieruModel>
void visit_tensors(P& p, F&& fn) {
  visit_tensors(p.fwd, prefixed("fwd.", fn));
  visit_tensors(p.bwd, prefixed("bwd.", fn));
  visit_tensors(p.head, prefixed("head.", fn));
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout mask: 0 with probability `rate`, 1/(1−rate) otherwise.
inline Vec dropout_mask(Rng& rng, std::size_t n, double rate) {
  Vec mask(n);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

namespace detail {

inline void apply_mask(Vec& x, const Vec& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One step

struct EruCache {
  std::optional<GntbCache> gntb;
  std::optional<TfeCache> tfe;
  Vec p_mask;  // empty when dropout is inactive
  Vec e_mask;
};

struct EruOutput {
  Vec e;
  Vec p;  // GNTB output before dropout; the raw utterance under tfe-only
  TfeState state;
  EruCache cache;
};

/// `rng` is only consulted when train_mode is set and dropout > 0.
inline EruOutput eru_step(const DirectionParams& params, const ModelConfig& cfg,
                          std::span<const double> context, std::span<const double> u,
                          const TfeState& state, bool train_mode, Rng* rng) {
  const bool drop = train_mode && cfg.dropout > 0.0;
  if (drop && rng == nullptr) throw Error(ErrorKind::invalid_argument, "eru_step: dropout needs an RNG");
  EruOutput out;
  if (params.gntb) {
    auto g = gntb_forward(*params.gntb, context, u);
    out.p = std::move(g.p);
    out.cache.gntb = std::move(g.cache);
  } else {
    if (u.size() != cfg.d()) throw Error(ErrorKind::shape, "eru_step: utterance length != d");
    out.p.assign(u.begin(), u.end());
  }

  Vec p_in = out.p;
  if (params.gntb && drop) {
    out.cache.p_mask = dropout_mask(*rng, p_in.size(), cfg.dropout);
    detail::apply_mask(p_in, out.cache.p_mask);
  }

  if (params.tfe) {
    auto t = tfe_forward(*params.tfe, p_in, state);
    out.e = std::move(t.e);
    out.state = std::move(t.state);
    out.cache.tfe = std::move(t.cache);
    if (drop) {
      out.cache.e_mask = dropout_mask(*rng, out.e.size(), cfg.dropout);
      detail::apply_mask(out.e, out.cache.e_mask);
    }
  } else {
    out.e = std::move(p_in);
    out.state = state;
  }
  return out;
}

// ---------------------------------------------------------------------------
// One direction

struct DirectionTrace {
  bool reversed = false;
  std::vector<std::size_t> order;      // original position visited at each step
  std::vector<std::ptrdiff_t> context; // lc: original position used as context, −1 for zero
  std::vector<Vec> p;                  // per step, pre-dropout GNTB output
  std::vector<Vec> e;                  // per step
  std::vector<EruCache> caches;
};

inline DirectionTrace run_direction(const DirectionParams& params, const ModelConfig& cfg,
                                    const std::vector<Vec>& utterances, bool reversed,
                                    bool train_mode, Rng* rng) {
  const std::size_t n = utterances.size();
  if (n == 0) throw Error(ErrorKind::invalid_argument, "run_direction: empty conversation");
  DirectionTrace tr;
  tr.reversed = reversed;
  tr.order.resize(n);
  for (std::size_t s = 0; s < n; ++s) tr.order[s] = reversed ? n - 1 - s : s;

  const Vec zero(cfg.d(), 0.0);
  TfeState state = TfeState::zeros(cfg.tfe.hidden);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t pos = tr.order[s];
    std::span<const double> context = zero;
    std::ptrdiff_t ctx_pos = -1;
    if (s > 0) {
      if (cfg.variant == Variant::gc) {
        context = tr.p[s - 1];
      } else {
        ctx_pos = static_cast<std::ptrdiff_t>(tr.order[s - 1]);
        context = utterances[tr.order[s - 1]];
      }
    }
    auto step = eru_step(params, cfg, context, utterances[pos], state, train_mode, rng);
    tr.context.push_back(ctx_pos);
    tr.p.push_back(std::move(step.p));
    tr.e.push_back(std::move(step.e));
    tr.caches.push_back(std::move(step.cache));
    state = std::move(step.state);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Whole model

struct BieruForward {
  std::vector<Vec> features;  // original order, each of length D_e
  DirectionTrace fwd;
  DirectionTrace bwd;
};

inline void check_conversation(const ModelConfig& cfg, const std::vector<Vec>& utterances) {
  if (utterances.empty()) throw Error(ErrorKind::invalid_argument, "conversation is empty");
  for (std::size_t t = 0; t < utterances.size(); ++t) {
    if (utterances[t].size() != cfg.d()) {
      std::ostringstream os;
      os << "utterance " << t << " has " << utterances[t].size() << " features, model expects " << cfg.d();
      throw Error(ErrorKind::shape, os.str());
    }
    require_finite(utterances[t], "utterance " + std::to_string(t));
  }
}

/// Forward direction draws its dropout masks before the backward direction.
inline BieruForward bieru_forward(const BieruModel& model, const std::vector<Vec>& utterances,
                                  bool train_mode, Rng* rng) {
  check_conversation(model.config, utterances);
  BieruForward out;
  out.fwd = run_direction(model.fwd, model.config, utterances, false, train_mode, rng);
  out.bwd = run_direction(model.bwd, model.config, utterances, true, train_mode, rng);
  const std::size_t n = utterances.size();
  out.features.resize(n);
  for (std::size_t s = 0; s < n; ++s) out.features[out.fwd.order[s]] = out.fwd.e[s];
  for (std::size_t s = 0; s < n; ++s) {
    auto& f = out.features[out.bwd.order[s]];
    f.insert(f.end(), out.bwd.e[s].begin(), out.bwd.e[s].end());
  }
  return out;
}

struct BieruGrads {
  BieruModel params;          // head left at zero
  std::vector<Vec> inputs;    // gradient wrt each utterance vector
};

namespace detail {

inline void direction_backward(const DirectionParams& params, const ModelConfig& cfg,
                               const DirectionTrace& tr, const std::vector<Vec>& grad_features,
                               std::size_t offset, DirectionParams& grad, std::vector<Vec>& grad_inputs) {
  const std::size_t n = tr.order.size();
  if (tr.caches.size() != n || tr.p.size() != n || tr.context.size() != n) {
    throw Error(ErrorKind::stale_cache, "bieru_backward: inconsistent direction trace");
  }
  const std::size_t width = cfg.direction_size();
  TfeState grad_state = TfeState::zeros(cfg.tfe.hidden);
  Vec carry_p(cfg.d(), 0.0);  // gc: gradient reaching p_s through step s+1's context

  for (std::size_t s = n; s-- > 0;) {
    const std::size_t pos = tr.order[s];
    const auto& cache = tr.caches[s];
    Vec g_e(grad_features[pos].begin() + static_cast<std::ptrdiff_t>(offset),
            grad_features[pos].begin() + static_cast<std::ptrdiff_t>(offset + width));

    Vec g_p;
    if (params.tfe) {
      if (!cache.tfe) throw Error(ErrorKind::stale_cache, "bieru_backward: missing TFE cache");
      apply_mask(g_e, cache.e_mask);
      auto tin = tfe_backward_into(*params.tfe, *cache.tfe, g_e, grad_state, *grad.tfe);
      grad_state = std::move(tin.state_prev);
      g_p = std::move(tin.p);
    } else {
      g_p = std::move(g_e);
    }

    if (!params.gntb) {
      axpy(1.0, g_p, grad_inputs[pos]);
      continue;
    }
    if (!cache.gntb) throw Error(ErrorKind::stale_cache, "bieru_backward: missing GNTB cache");
    apply_mask(g_p, cache.p_mask);
    axpy(1.0, carry_p, g_p);
    auto gin = gntb_backward_into(*params.gntb, *cache.gntb, g_p, *grad.gntb);
    axpy(1.0, gin.u, grad_inputs[pos]);
    if (cfg.variant == Variant::gc) {
      carry_p = std::move(gin.p_prev);
    } else if (tr.context[s] >= 0) {
      axpy(1.0, gin.p_prev, grad_inputs[static_cast<std::size_t>(tr.context[s])]);
    }
  }
}

}  // namespace detail

/// Backpropagation through time for both directions. Dropout masks recorded
/// in the traces are replayed.
inline BieruGrads bieru_backward(const BieruModel& model, const BieruForward& fw,
                                 const std::vector<Vec>& grad_features) {
  const auto& cfg = model.config;
  const std::size_t n = fw.features.size();
  if (grad_features.size() != n || fw.fwd.order.size() != n || fw.bwd.order.size() != n) {
    throw Error(ErrorKind::stale_cache, "bieru_backward: gradient count does not match forward pass");
  }
  for (const auto& g : grad_features) {
    if (g.size() != cfg.feature_size()) throw Error(ErrorKind::shape, "bieru_backward: gradient length != D_e");
  }
  BieruGrads out;
  out.params = zeros_like(model);
  out.inputs.assign(n, Vec(cfg.d(), 0.0));
  detail::direction_backward(model.fwd, cfg, fw.fwd, grad_features, 0, out.params.fwd, out.inputs);
  detail::direction_backward(model.bwd, cfg, fw.bwd, grad_features, cfg.direction_size(),
                             out.params.bwd, out.inputs);
  return out;
}

}  // namespace bieru
