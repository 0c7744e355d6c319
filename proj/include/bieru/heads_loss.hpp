#pragma once

// Linear classification / regression heads on top of the emotion features,
// their losses and gradients, and the L2 penalty.

#include <concepts>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bieru/numkit.hpp"

namespace bieru {

enum class Task { classify, regress };

inline std::string_view to_string(Task t) { return t == Task::classify ? "classify" : "regress"; }

inline Task parse_task(std::string_view s) {
  if (s == "classify") return Task::classify;
  if (s == "regress") return Task::regress;
  throw Error(ErrorKind::config, "unknown task '" + std::string(s) + "'");
}

enum class L2Form { squared_norm, norm };

inline std::string_view to_string(L2Form f) { return f == L2Form::squared_norm ? "squared-norm" : "norm"; }

inline L2Form parse_l2_form(std::string_view s) {
  if (s == "squared-norm") return L2Form::squared_norm;
  if (s == "norm") return L2Form::norm;
  throw Error(ErrorKind::config, "unknown l2 form '" + std::string(s) + "'");
}

struct LossConfig {
  double lambda = 0.001;
  L2Form l2_form = L2Form::squared_norm;
  double eps = 1e-12;

  void validate() const {
    if (!(lambda >= 0.0)) throw Error(ErrorKind::config, "loss: lambda must be >= 0");
    if (!(eps > 0.0)) throw Error(ErrorKind::config, "loss: eps must be > 0");
  }
};

/// W is D_e × n_out (n_out = n_class, or 1 for regression).
struct HeadParams {
  Task task = Task::classify;
  Mat W;
  std::optional<Vec> bias;

  std::size_t input_size() const { return W.rows; }
  std::size_t output_size() const { return W.cols; }

  static HeadParams zeros(Task task, std::size_t features, std::size_t n_out, bool with_bias) {
    if (features == 0 || n_out == 0) throw Error(ErrorKind::config, "head: zero dimension");
    if (task == Task::regress && n_out != 1) throw Error(ErrorKind::config, "head: regression has one output");
    HeadParams h;
    h.task = task;
    h.W = Mat(features, n_out);
    if (with_bias) h.bias = Vec(n_out, 0.0);
    return h;
  }

  static HeadParams init(Task task, std::size_t features, std::size_t n_out, bool with_bias, Rng& rng) {
    HeadParams h = zeros(task, features, n_out, with_bias);
    h.W = init_params(rng, features, n_out, InitScheme::glorot_uniform);
    return h;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, HeadParams>
void visit_tensors(P& p, F&& fn) {
  fn(std::string("W"), std::span(p.W.data), Shape{p.W.rows, p.W.cols}, false);
  if (p.bias) fn(std::string("bias"), std::span(*p.bias), Shape{p.bias->size()}, true);
}

namespace detail {

inline Vec head_logits(const HeadParams& head, std::span<const double> e) {
  if (e.size() != head.input_size()) {
    std::ostringstream os;
    os << "head: feature length " << e.size() << " != " << head.input_size();
    throw Error(ErrorKind::shape, os.str());
  }
  Vec z = matvec_t(head.W, e);
  if (head.bias) axpy(1.0, *head.bias, z);
  return z;
}

}  // namespace detail

/// Max-shifted softmax.
inline Vec softmax(std::span<const double> x) {
  Vec out(x.begin(), x.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (double& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

/// First index of the maximum.
inline std::size_t argmax(std::span<const double> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

struct Classification {
  Vec probs;
  std::size_t label = 0;
};

inline Classification classify(const HeadParams& head, std::span<const double> e) {
  const Vec logits = detail::head_logits(head, e);
  Classification c;
  c.probs = softmax(logits);
  c.label = argmax(c.probs);
  return c;
}

inline double regress(const HeadParams& head, std::span<const double> e) {
  if (head.output_size() != 1) throw Error(ErrorKind::shape, "regress: head has more than one output");
  return detail::head_logits(head, e)[0];
}

/// R(θ) over the flattened trainable weights.
inline double l2_penalty(std::span<const double> theta, L2Form form) {
  // Neumaier-compensated: the sum runs over every weight, and plain
  // accumulation noise would otherwise swamp finite-difference checks.
  double sq = 0.0;
  double comp = 0.0;
  for (double t : theta) {
    const double x = t * t;
    const double s = sq + x;
    comp += std::abs(sq) >= std::abs(x) ? (sq - s) + x : (x - s) + sq;
    sq = s;
  }
  sq += comp;
  return form == L2Form::squared_norm ? sq : std::sqrt(sq);
}

/// ∂R/∂θ. The unsquared norm has no gradient at 0; zero is returned there.
inline Vec l2_penalty_grad(std::span<const double> theta, L2Form form) {
  Vec g(theta.size());
  if (form == L2Form::squared_norm) {
    for (std::size_t i = 0; i < theta.size(); ++i) g[i] = 2.0 * theta[i];
    return g;
  }
  const double norm = l2_penalty(theta, L2Form::norm);
  for (std::size_t i = 0; i < theta.size(); ++i) g[i] = norm > 0.0 ? theta[i] / norm : 0.0;
  return g;
}

/// Cross-entropy averaged over the utterances of one dialogue plus λR(θ).
inline double ce_loss(const std::vector<Vec>& probs, std::span<const std::size_t> labels,
                      std::span<const double> theta, const LossConfig& cfg) {
  cfg.validate();
  if (probs.size() != labels.size()) throw Error(ErrorKind::shape, "ce_loss: probability/label count mismatch");
  if (probs.empty()) throw Error(ErrorKind::invalid_argument, "ce_loss: no utterances");
  double data = 0.0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    const auto& s = probs[t];
    if (labels[t] >= s.size()) {
      std::ostringstream os;
      os << "ce_loss: label " << labels[t] << " out of range at utterance " << t;
      throw Error(ErrorKind::invalid_argument, os.str());
    }
    double sum = 0.0;
    for (double v : s) sum += v;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw Error(ErrorKind::invalid_argument, "ce_loss: probabilities at utterance " +
                                                   std::to_string(t) + " do not sum to 1");
    }
    data -= std::log(std::max(s[labels[t]], cfg.eps));
  }
  return data / static_cast<double>(probs.size()) + cfg.lambda * l2_penalty(theta, cfg.l2_form);
}

inline double mse_loss(std::span<const double> predictions, std::span<const double> targets,
                       std::span<const double> theta, const LossConfig& cfg) {
  cfg.validate();
  if (predictions.size() != targets.size()) throw Error(ErrorKind::shape, "mse_loss: length mismatch");
  if (predictions.empty()) throw Error(ErrorKind::invalid_argument, "mse_loss: no utterances");
  double data = 0.0;
  for (std::size_t t = 0; t < predictions.size(); ++t) {
    const double r = predictions[t] - targets[t];
    data += r * r;
  }
  return data / static_cast<double>(predictions.size()) + cfg.lambda * l2_penalty(theta, cfg.l2_form);
}

/// Per-utterance head outputs kept for the backward pass.
struct HeadCache {
  std::vector<Vec> features;
  std::vector<Vec> outputs;  // probabilities (classify) or {q} (regress)
};

struct HeadForward {
  HeadCache cache;
  std::vector<std::size_t> labels;  // classify
  Vec intensities;                  // regress
};

inline HeadForward head_forward(const HeadParams& head, const std::vector<Vec>& features) {
  HeadForward out;
  out.cache.features = features;
  out.cache.outputs.reserve(features.size());
  for (const auto& e : features) {
    if (head.task == Task::classify) {
      auto c = classify(head, e);
      out.labels.push_back(c.label);
      out.cache.outputs.push_back(std::move(c.probs));
    } else {
      const double q = regress(head, e);
      out.intensities.push_back(q);
      out.cache.outputs.push_back(Vec{q});
    }
  }
  return out;
}

struct HeadLossGrads {
  HeadParams head;
  std::vector<Vec> features;
};

/// Gradient of the data term only (the penalty is added at model level).
/// Classification uses the fused softmax/cross-entropy form (S − onehot)/n;
/// regression uses 2(q − z)/n.
inline HeadLossGrads loss_backward(const HeadParams& head, const HeadCache& cache,
                                   std::span<const std::size_t> labels,
                                   std::span<const double> targets) {
  const std::size_t n = cache.features.size();
  if (cache.outputs.size() != n || n == 0) {
    throw Error(ErrorKind::stale_cache, "loss_backward: cache is empty or inconsistent");
  }
  const bool cls = head.task == Task::classify;
  if ((cls && labels.size() != n) || (!cls && targets.size() != n)) {
    throw Error(ErrorKind::shape, "loss_backward: target count != utterance count");
  }
  HeadLossGrads g;
  g.head = zeros_like(head);
  g.features.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& e = cache.features[t];
    const auto& out = cache.outputs[t];
    if (e.size() != head.input_size() || out.size() != head.output_size()) {
      throw Error(ErrorKind::stale_cache, "loss_backward: cache does not match head");
    }
    Vec delta(out.size());
    if (cls) {
      if (labels[t] >= out.size()) {
        throw Error(ErrorKind::invalid_argument, "loss_backward: label out of range at utterance " +
                                                     std::to_string(t));
      }
      for (std::size_t j = 0; j < out.size(); ++j) delta[j] = out[j] * inv_n;
      delta[labels[t]] -= inv_n;
    } else {
      delta[0] = 2.0 * (out[0] - targets[t]) * inv_n;
    }
    add_outer(g.head.W, e, delta);
    if (g.head.bias) axpy(1.0, delta, *g.head.bias);
    g.features[t] = matvec(head.W, delta);
  }
  return g;
}

}  // namespace bieru
