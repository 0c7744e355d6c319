#pragma once

// Adam, the batch-size-1 training loop, evaluation and parameter reports.

#include <cmath>
#include <concepts>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bieru/data.hpp"
#include "bieru/metrics.hpp"
#include "bieru/model.hpp"
#include "bieru/objective.hpp"

namespace bieru {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are stored flat, in the model's tensor visit order.
struct AdamState {
  AdamConfig hp;
  std::uint64_t t = 0;
  Vec m;
  Vec v;

  static AdamState for_size(std::size_t n, const AdamConfig& hp) {
    AdamState s;
    s.hp = hp;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }
};

/// One update. Rejects the whole step (nothing is modified) if any gradient
/// is non-finite; `name_of(i)` names the parameter owning coordinate i.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
                      const std::function<std::string(std::size_t)>& name_of = {}) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    std::ostringstream os;
    os << "adam_step: params " << params.size() << ", grads " << grads.size() << ", moments " << state.m.size();
    throw Error(ErrorKind::shape, os.str());
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream os;
      os << "adam_step: non-finite gradient for " << (name_of ? name_of(i) : "coordinate " + std::to_string(i));
      throw Error(ErrorKind::non_finite, os.str());
    }
  }
  const auto& hp = state.hp;
  ++state.t;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

template <class P>
  requires(!std::convertible_to<P&, std::span<double>>)
void adam_step(AdamState& state, P& params, const P& grads) {
  Vec theta = flatten(params);
  const Vec g = flatten(grads);
  const auto slots = tensor_slots(params);
  auto name_of = [&](std::size_t i) {
    for (const auto& s : slots) {
      if (i < s.data.size()) return s.name + "[" + std::to_string(i) + "]";
      i -= s.data.size();
    }
    return std::string("?");
  };
  adam_step(state, theta, g, name_of);
  unflatten(params, theta);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  LossConfig loss;
  std::size_t patience = 0;  // early stopping on validation loss; 0 disables
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_metric = 0.0;  // train-mode weighted accuracy, or Pearson r
  std::optional<double> val_loss;
  std::optional<double> val_metric;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j{{"epoch", m.epoch}, {"mean_loss", m.mean_loss}, {"train_metric", m.train_metric}};
  if (m.val_loss) j["val_loss"] = *m.val_loss;
  if (m.val_metric) j["val_metric"] = *m.val_metric;
  return j;
}

struct TrainState {
  AdamState adam;
  Rng rng;
  std::size_t epoch = 0;
  std::vector<EpochMetrics> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_without_improvement = 0;

  static TrainState fresh(const BieruModel& model, const TrainConfig& cfg, const Rng& rng) {
    TrainState s;
    s.adam = AdamState::for_size(count_tensors_size(model), AdamConfig{cfg.lr});
    s.rng = rng;
    return s;
  }
};

namespace detail {

inline double task_metric(Task task, const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                          const Vec& q, const Vec& z) {
  if (task == Task::classify) return preds.empty() ? 0.0 : weighted_accuracy(preds, labels);
  try {
    return pearson_r(q, z);
  } catch (const Error&) {
    return 0.0;
  }
}

}  // namespace detail

/// One pass over the dataset in a seeded shuffled order, one Adam step per
/// conversation.
inline EpochMetrics train_epoch(BieruModel& model, const Dataset& data, TrainState& state, const LossConfig& loss) {
  if (data.conversations.empty()) throw Error(ErrorKind::invalid_argument, "train_epoch: empty dataset");
  std::vector<std::size_t> order(data.conversations.size());
  std::iota(order.begin(), order.end(), 0);
  state.rng.shuffle(order);

  double total = 0.0;
  std::vector<std::size_t> preds, labels;
  Vec q, z;
  for (std::size_t idx : order) {
    const auto& conv = data.conversations[idx];
    const auto targets = conv.targets();
    ObjectiveResult r;
    try {
      r = conversation_objective(model, conv.features(), targets, loss, true, &state.rng);
      if (!std::isfinite(r.loss)) throw Error(ErrorKind::non_finite, "loss is not finite");
      adam_step(state.adam, model, r.grad);
    } catch (const Error& e) {
      std::ostringstream os;
      os << "epoch " << state.epoch + 1 << ", conversation '" << conv.id << "': " << e.what();
      throw Error(e.kind(), os.str());
    }
    total += r.loss;
    if (model.config.task == Task::classify) {
      preds.insert(preds.end(), r.head.labels.begin(), r.head.labels.end());
      labels.insert(labels.end(), targets.labels.begin(), targets.labels.end());
    } else {
      q.insert(q.end(), r.head.intensities.begin(), r.head.intensities.end());
      z.insert(z.end(), targets.intensities.begin(), targets.intensities.end());
    }
  }
  ++state.epoch;
  EpochMetrics m;
  m.epoch = state.epoch;
  m.mean_loss = total / static_cast<double>(data.conversations.size());
  m.train_metric = detail::task_metric(model.config.task, preds, labels, q, z);
  return m;
}

struct Evaluation {
  double mean_loss = 0.0;  // mean per-dialogue loss including the penalty
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> labels;
  Vec intensities;
  Vec targets;
  std::vector<Vec> probabilities;
  std::vector<Vec> features;  // emotion features, one per utterance
  std::optional<ClassificationReport> report;
  std::optional<double> pearson;
  std::optional<double> mae;

  double metric() const { return report ? report->weighted_accuracy : pearson.value_or(0.0); }
};

/// Eval-mode pass: no dropout, no RNG.
inline Evaluation evaluate(const BieruModel& model, const Dataset& data, const LossConfig& loss) {
  Evaluation ev;
  for (const auto& conv : data.conversations) {
    const auto targets = conv.targets();
    auto r = conversation_objective(model, conv.features(), targets, loss, false, nullptr, false);
    ev.mean_loss += r.loss;
    for (auto& f : r.features) ev.features.push_back(std::move(f));
    if (model.config.task == Task::classify) {
      ev.predictions.insert(ev.predictions.end(), r.head.labels.begin(), r.head.labels.end());
      ev.labels.insert(ev.labels.end(), targets.labels.begin(), targets.labels.end());
      for (auto& p : r.head.cache.outputs) ev.probabilities.push_back(std::move(p));
    } else {
      ev.intensities.insert(ev.intensities.end(), r.head.intensities.begin(), r.head.intensities.end());
      ev.targets.insert(ev.targets.end(), targets.intensities.begin(), targets.intensities.end());
    }
  }
  if (!data.conversations.empty()) ev.mean_loss /= static_cast<double>(data.conversations.size());
  if (model.config.task == Task::classify) {
    if (!ev.predictions.empty()) ev.report = classification_report(ev.predictions, ev.labels, model.config.n_class);
  } else if (!ev.intensities.empty()) {
    ev.mae = mean_absolute_error(ev.intensities, ev.targets);
    try {
      ev.pearson = pearson_r(ev.intensities, ev.targets);
    } catch (const Error&) {
      ev.pearson.reset();
    }
  }
  return ev;
}

using EpochCallback = std::function<void(const EpochMetrics&, const BieruModel&, const TrainState&)>;

/// Runs epochs until `cfg.epochs` have completed in total (counting epochs
/// already recorded in `state`) or early stopping fires. With a validation
/// set and patience > 0 the best-validation parameters are restored.
inline void fit(BieruModel& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                TrainState& state, const EpochCallback& on_epoch = {}) {
  std::optional<BieruModel> best;
  while (state.epoch < cfg.epochs) {
    auto m = train_epoch(model, train, state, cfg.loss);
    if (val) {
      const auto ev = evaluate(model, *val, cfg.loss);
      m.val_loss = ev.mean_loss;
      m.val_metric = ev.metric();
    }
    state.history.push_back(m);
    if (on_epoch) on_epoch(m, model, state);
    if (val && cfg.patience > 0) {
      if (*m.val_loss < state.best_val_loss) {
        state.best_val_loss = *m.val_loss;
        state.epochs_without_improvement = 0;
        best = model;
      } else if (++state.epochs_without_improvement >= cfg.patience) {
        break;
      }
    }
  }
  if (best) model = std::move(*best);
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamReport {
  std::vector<std::pair<std::string, std::size_t>> tensors;
  std::vector<std::pair<std::string, std::size_t>> modules;  // "fwd.gntb", "bwd.tfe", "head", ...
  std::size_t total = 0;

  std::size_t module(const std::string& name) const {
    for (const auto& [n, c] : modules) {
      if (n == name) return c;
    }
    return 0;
  }
};

inline std::string module_of(const std::string& tensor_name) {
  const auto first = tensor_name.find('.');
  if (first == std::string::npos) return tensor_name;
  if (tensor_name.compare(0, first, "head") == 0) return "head";
  const auto second = tensor_name.find('.', first + 1);
  return tensor_name.substr(0, second);
}

inline ParamReport report_params(const BieruModel& model) {
  ParamReport r;
  for (const auto& slot : tensor_slots(model)) {
    r.tensors.emplace_back(slot.name, slot.data.size());
    const auto mod = module_of(slot.name);
    if (r.modules.empty() || r.modules.back().first != mod) r.modules.emplace_back(mod, 0);
    r.modules.back().second += slot.data.size();
    r.total += slot.data.size();
  }
  return r;
}

inline nlohmann::json to_json(const ParamReport& r) {
  nlohmann::json j;
  j["total"] = r.total;
  for (const auto& [n, c] : r.modules) j["modules"][n] = c;
  j["tensors"] = nlohmann::json::array();
  for (const auto& [n, c] : r.tensors) j["tensors"].push_back({{"name", n}, {"size", c}});
  return j;
}

}  // namespace bieru
