#pragma once

// Finite-difference verification of every analytic backward pass.
//
// Each suite builds a small randomized instance, evaluates the analytic
// gradient once, then compares every coordinate against a central
// difference of the same scalar objective. Results are reported per tensor
// as the maximum relative error |a−b| / max(|a|, |b|, 1e-8).
//
// Central differences of an O(1) objective in 64-bit carry about 1e-10 of
// absolute roundoff, so a coordinate whose true gradient is ~1e-5 cannot be
// confirmed to 1e-5 relative. Instances are therefore screened: if any
// analytic coordinate is nonzero but below `min_magnitude`, the instance is
// redrawn from the same stream (up to `max_draws`). Exact zeros pass the
// screen, so a dropped gradient term still shows up against the difference.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bieru/gntb.hpp"
#include "bieru/heads_loss.hpp"
#include "bieru/model.hpp"
#include "bieru/numkit.hpp"
#include "bieru/objective.hpp"
#include "bieru/tfe.hpp"

namespace bieru {

/// Ad-hoc bundle of named vectors, used for input gradients.
struct NamedVectors {
  std::vector<std::pair<std::string, Vec>> items;

  Vec& add(std::string name, Vec v) {
    items.emplace_back(std::move(name), std::move(v));
    return items.back().second;
  }
  const Vec& at(const std::string& name) const {
    for (const auto& [n, v] : items) {
      if (n == name) return v;
    }
    throw Error(ErrorKind::invalid_argument, "NamedVectors: no entry " + name);
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, NamedVectors>
void visit_tensors(P& p, F&& fn) {
  for (auto& [name, v] : p.items) fn(name, std::span(v), Shape{v.size()}, false);
}

struct GradcheckOptions {
  double h = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t seed = 20200429;
  /// Test hook: perturb the analytic gradient of tensors whose qualified
  /// name ("suite/tensor") or bare tensor name equals this string.
  std::string corrupt;
  double min_magnitude = 1e-4;
  std::size_t max_draws = 64;
};

struct TensorCheck {
  std::string suite;
  std::string tensor;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t draws = 1;  // instances drawn before one passed the screen
  bool pass = true;
};

struct GradcheckReport {
  std::vector<TensorCheck> checks;

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const TensorCheck& c) { return c.pass; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, c.max_rel_error);
    return m;
  }
  void append(const std::vector<TensorCheck>& more) { checks.insert(checks.end(), more.begin(), more.end()); }
};

inline nlohmann::json to_json(const TensorCheck& c) {
  return {{"suite", c.suite}, {"tensor", c.tensor}, {"size", c.size}, {"max_rel_error", c.max_rel_error},
          {"max_abs_error", c.max_abs_error}, {"draws", c.draws}, {"pass", c.pass}};
}

/// Compares `analytic` with central differences of `objective` around
/// `point`, tensor by tensor.
template <class P>
std::vector<TensorCheck> compare_gradients(const std::string& suite, const P& point, const P& analytic,
                                           const std::function<double(const P&)>& objective,
                                           const GradcheckOptions& opts) {
  const Vec theta = flatten(point);
  Vec grad_a = flatten(analytic);
  if (grad_a.size() != theta.size()) throw Error(ErrorKind::shape, "compare_gradients: shape mismatch");

  P scratch = point;
  const ScalarFn f = [&](std::span<const double> t) {
    unflatten(scratch, t);
    return objective(scratch);
  };
  const Vec grad_n = finite_diff_grad(f, theta, opts.h);

  std::vector<TensorCheck> out;
  std::size_t off = 0;
  for (const auto& slot : tensor_slots(point)) {
    TensorCheck c;
    c.suite = suite;
    c.tensor = slot.name;
    c.size = slot.data.size();
    const bool corrupt = !opts.corrupt.empty() && (opts.corrupt == slot.name || opts.corrupt == suite + "/" + slot.name);
    for (std::size_t i = 0; i < c.size; ++i) {
      double a = grad_a[off + i];
      if (corrupt) a = 1.1 * a + 1e-3;
      const double b = grad_n[off + i];
      c.max_rel_error = std::max(c.max_rel_error, relative_error(a, b));
      c.max_abs_error = std::max(c.max_abs_error, std::abs(a - b));
    }
    c.pass = c.max_rel_error <= opts.tolerance;
    off += c.size;
    out.push_back(std::move(c));
  }
  return out;
}

namespace detail {

// Entries are drawn with magnitude in [scale/4, scale] and a random sign.
// Keeping them away from zero avoids gradient coordinates that vanish by
// accident (a near-zero input zeroes a whole row of an outer product), which
// central differences cannot resolve to 1e-5 relative in 64-bit.
inline double signed_draw(Rng& rng, double scale) {
  const double mag = rng.uniform(0.25 * scale, scale);
  return rng.uniform() < 0.5 ? -mag : mag;
}

template <class P>
void randomize(P& p, Rng& rng, double scale) {
  visit_tensors(p, [&](const std::string&, auto data, const Shape&, bool) {
    for (auto& x : data) x = signed_draw(rng, scale);
  });
}

inline Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (double& x : v) x = signed_draw(rng, scale);
  return v;
}

}  // namespace detail

namespace detail {

template <class... P>
bool well_conditioned(double min_magnitude, const P&... grads) {
  bool ok = true;
  auto check = [&](const auto& g) {
    for (double a : flatten(g)) {
      if (a != 0.0 && std::abs(a) < min_magnitude) ok = false;
    }
  };
  (check(grads), ...);
  return ok;
}

inline bool last_draw(std::size_t draws, const GradcheckOptions& opts) { return draws >= opts.max_draws; }

inline std::vector<TensorCheck> tag_draws(std::vector<TensorCheck> checks, std::size_t draws) {
  for (auto& c : checks) c.draws = draws;
  return checks;
}

}  // namespace detail

/// Low-rank, full-rank and projected GNTB; objective is w·p.
inline std::vector<TensorCheck> gradcheck_gntb(GntbConfig cfg, const std::string& suite, const GradcheckOptions& opts) {
  Rng rng(opts.seed);
  GntbParams params = GntbParams::zeros(cfg);
  NamedVectors inputs, g_in;
  Vec w;
  GntbGrads g;
  std::size_t draws = 0;
  do {
    ++draws;
    detail::randomize(params, rng, 0.6);
    inputs = {};
    inputs.add("input.p_prev", detail::random_vec(rng, cfg.d));
    inputs.add("input.u", detail::random_vec(rng, cfg.d));
    w = detail::random_vec(rng, cfg.d);
    auto fw = gntb_forward(params, inputs.at("input.p_prev"), inputs.at("input.u"));
    g = gntb_backward(params, fw.cache, w);
    g_in = {};
    g_in.add("input.p_prev", g.p_prev);
    g_in.add("input.u", g.u);
  } while (!detail::well_conditioned(opts.min_magnitude, g.params, g_in) && !detail::last_draw(draws, opts));

  auto run = [&](const GntbParams& p, const NamedVectors& in) {
    return dot(w, gntb_forward(p, in.at("input.p_prev"), in.at("input.u")).p);
  };
  auto out = compare_gradients<GntbParams>(suite, params, g.params,
                                           [&](const GntbParams& p) { return run(p, inputs); }, opts);
  auto more = compare_gradients<NamedVectors>(suite, inputs, g_in,
                                              [&](const NamedVectors& in) { return run(params, in); }, opts);
  out.insert(out.end(), more.begin(), more.end());
  return detail::tag_draws(std::move(out), draws);
}

/// TFE step; objective is w_e·e + w_h·h_t + w_c·c_t so the state gradients
/// arriving from a following step are exercised too.
inline std::vector<TensorCheck> gradcheck_tfe(TfeConfig cfg, const std::string& suite, const GradcheckOptions& opts) {
  Rng rng(opts.seed + 1);
  TfeParams params = TfeParams::zeros(cfg);
  NamedVectors inputs, g_in;
  Vec w_e, w_h, w_c;
  TfeGrads g;
  std::size_t draws = 0;
  do {
    ++draws;
    detail::randomize(params, rng, 0.6);
    inputs = {};
    inputs.add("input.p", detail::random_vec(rng, cfg.d));
    inputs.add("input.h_prev", detail::random_vec(rng, cfg.hidden, 0.8));
    inputs.add("input.c_prev", detail::random_vec(rng, cfg.hidden, 1.5));
    w_e = detail::random_vec(rng, cfg.output_size());
    w_h = detail::random_vec(rng, cfg.hidden);
    w_c = detail::random_vec(rng, cfg.hidden);
    auto fw =
        tfe_forward(params, inputs.at("input.p"), TfeState{inputs.at("input.h_prev"), inputs.at("input.c_prev")});
    g = tfe_backward(params, fw.cache, w_e, TfeState{w_h, w_c});
    g_in = {};
    g_in.add("input.p", g.p);
    g_in.add("input.h_prev", g.state_prev.h);
    g_in.add("input.c_prev", g.state_prev.c);
  } while (!detail::well_conditioned(opts.min_magnitude, g.params, g_in) && !detail::last_draw(draws, opts));

  auto run = [&](const TfeParams& p, const NamedVectors& in) {
    auto o = tfe_forward(p, in.at("input.p"), TfeState{in.at("input.h_prev"), in.at("input.c_prev")});
    return dot(w_e, o.e) + dot(w_h, o.state.h) + dot(w_c, o.state.c);
  };
  auto out = compare_gradients<TfeParams>(suite, params, g.params, [&](const TfeParams& p) { return run(p, inputs); },
                                          opts);
  auto more = compare_gradients<NamedVectors>(suite, inputs, g_in,
                                              [&](const NamedVectors& in) { return run(params, in); }, opts);
  out.insert(out.end(), more.begin(), more.end());
  return detail::tag_draws(std::move(out), draws);
}

/// Heads with their losses and the L2 penalty over the head weights.
inline std::vector<TensorCheck> gradcheck_head(Task task, const LossConfig& loss, const std::string& suite,
                                               const GradcheckOptions& opts) {
  Rng rng(opts.seed + 2);
  const std::size_t features = 4, n = 3;
  const std::size_t n_out = task == Task::classify ? 3 : 1;
  HeadParams head = HeadParams::zeros(task, features, n_out, true);
  NamedVectors inputs, g_in;
  Targets targets;
  HeadLossGrads g;
  std::size_t draws = 0;

  auto feats = [&](const NamedVectors& in) {
    std::vector<Vec> f;
    for (const auto& [name, v] : in.items) f.push_back(v);
    return f;
  };
  do {
    ++draws;
    detail::randomize(head, rng, 0.8);
    inputs = {};
    for (std::size_t t = 0; t < n; ++t) inputs.add("input.e" + std::to_string(t), detail::random_vec(rng, features));
    targets = {};
    for (std::size_t t = 0; t < n; ++t) {
      targets.labels.push_back(static_cast<std::size_t>(rng.below(n_out)));
      targets.intensities.push_back(rng.uniform(-1.0, 1.0));
    }
    auto hf = head_forward(head, feats(inputs));
    g = loss_backward(head, hf.cache, targets.labels, targets.intensities);
    add_penalty_grad(head, g.head, loss);
    g_in = {};
    for (std::size_t t = 0; t < n; ++t) g_in.add("input.e" + std::to_string(t), g.features[t]);
  } while (!detail::well_conditioned(opts.min_magnitude, g.head, g_in) && !detail::last_draw(draws, opts));

  auto run = [&](const HeadParams& h, const NamedVectors& in) {
    auto hf = head_forward(h, feats(in));
    const Vec theta = weight_vector(h);
    if (task == Task::classify) return ce_loss(hf.cache.outputs, targets.labels, theta, loss);
    return mse_loss(hf.intensities, targets.intensities, theta, loss);
  };
  auto out = compare_gradients<HeadParams>(suite, head, g.head, [&](const HeadParams& h) { return run(h, inputs); },
                                           opts);
  auto more = compare_gradients<NamedVectors>(suite, inputs, g_in,
                                              [&](const NamedVectors& in) { return run(head, in); }, opts);
  out.insert(out.end(), more.begin(), more.end());
  return detail::tag_draws(std::move(out), draws);
}

/// Small model configuration used by the model-level suites:
/// d = k = 3, r = 2, H = F = 2, K = 2.
inline ModelConfig gradcheck_model_config(Variant variant, Task task, Ablation ablation) {
  ModelConfig cfg;
  cfg.gntb = {3, 3, 2, task == Task::classify ? Activation::sigmoid : Activation::relu, GntbMode::low_rank};
  cfg.tfe = {3, 2, 2, 2};
  cfg.variant = variant;
  cfg.task = task;
  cfg.n_class = 3;
  cfg.dropout = 0.3;
  cfg.ablation = ablation;
  cfg.head_bias = true;
  return cfg;
}

/// Full model on a 3-utterance conversation, train mode with dropout. The
/// RNG is re-seeded before every evaluation so each one sees the same masks.
inline std::vector<TensorCheck> gradcheck_model(const ModelConfig& cfg, const LossConfig& loss, const std::string& suite,
                                                const GradcheckOptions& opts) {
  Rng rng(opts.seed + 3);
  BieruModel model = BieruModel::zeros(cfg);
  const std::size_t n = 3;
  const std::uint64_t mask_seed = opts.seed + 4;
  NamedVectors inputs, g_in;
  Targets targets;
  ObjectiveResult r;
  std::size_t draws = 0;

  auto utts = [&](const NamedVectors& in) {
    std::vector<Vec> u;
    for (const auto& [name, v] : in.items) u.push_back(v);
    return u;
  };
  do {
    ++draws;
    detail::randomize(model, rng, 0.6);
    inputs = {};
    for (std::size_t t = 0; t < n; ++t) inputs.add("input.u" + std::to_string(t), detail::random_vec(rng, cfg.d()));
    targets = {};
    for (std::size_t t = 0; t < n; ++t) {
      targets.labels.push_back(static_cast<std::size_t>(rng.below(cfg.n_class)));
      targets.intensities.push_back(rng.uniform(-1.0, 1.0));
    }
    Rng masks(mask_seed);
    r = conversation_objective(model, utts(inputs), targets, loss, true, &masks, true);
    g_in = {};
    for (std::size_t t = 0; t < n; ++t) g_in.add("input.u" + std::to_string(t), r.input_grads[t]);
  } while (!detail::well_conditioned(opts.min_magnitude, r.grad, g_in) && !detail::last_draw(draws, opts));

  auto run = [&](const BieruModel& m, const NamedVectors& in) {
    Rng masks(mask_seed);
    return conversation_objective(m, utts(in), targets, loss, true, &masks, false).loss;
  };
  auto out = compare_gradients<BieruModel>(suite, model, r.grad, [&](const BieruModel& m) { return run(m, inputs); },
                                           opts);
  auto more = compare_gradients<NamedVectors>(suite, inputs, g_in,
                                              [&](const NamedVectors& in) { return run(model, in); }, opts);
  out.insert(out.end(), more.begin(), more.end());
  return detail::tag_draws(std::move(out), draws);
}

/// Every suite: GNTB (low-rank, full-rank, projected), TFE, both heads and
/// losses with λ > 0, and the full model for both variants, both tasks and
/// both single-module ablations.
inline GradcheckReport run_gradcheck(const GradcheckOptions& opts = {}) {
  GradcheckReport report;
  report.append(gradcheck_gntb({3, 3, 2, Activation::tanh, GntbMode::low_rank}, "gntb.low-rank", opts));
  report.append(gradcheck_gntb({3, 3, 2, Activation::sigmoid, GntbMode::full_rank}, "gntb.full-rank", opts));
  report.append(gradcheck_gntb({3, 2, 2, Activation::tanh, GntbMode::low_rank}, "gntb.projection", opts));
  report.append(gradcheck_tfe({3, 2, 2, 2}, "tfe", opts));

  LossConfig sq{0.01, L2Form::squared_norm, 1e-12};
  // The unsquared norm spreads λ over ‖θ‖, so it needs a larger λ for the
  // penalty to keep every weight gradient clear of finite-difference noise.
  LossConfig nrm{0.1, L2Form::norm, 1e-12};
  report.append(gradcheck_head(Task::classify, sq, "head.classify.ce", opts));
  report.append(gradcheck_head(Task::regress, sq, "head.regress.mse", opts));
  report.append(gradcheck_head(Task::classify, nrm, "head.classify.ce.norm", opts));

  for (Variant v : {Variant::gc, Variant::lc}) {
    const std::string vs(to_string(v));
    report.append(gradcheck_model(gradcheck_model_config(v, Task::classify, Ablation::full), sq,
                                  "bieru." + vs + ".classify", opts));
    report.append(gradcheck_model(gradcheck_model_config(v, Task::regress, Ablation::full), sq,
                                  "bieru." + vs + ".regress", opts));
    report.append(gradcheck_model(gradcheck_model_config(v, Task::classify, Ablation::gntb_only), nrm,
                                  "bieru." + vs + ".gntb-only", opts));
    report.append(gradcheck_model(gradcheck_model_config(v, Task::classify, Ablation::tfe_only), sq,
                                  "bieru." + vs + ".tfe-only", opts));
  }
  return report;
}

}  // namespace bieru
