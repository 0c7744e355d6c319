#pragma once

// Per-dialogue training objective: forward pass, head, loss with L2 penalty
// over all non-bias weights, and the full gradient.

#include <vector>

#include "bieru/heads_loss.hpp"
#include "bieru/model.hpp"

namespace bieru {

struct Targets {
  std::vector<std::size_t> labels;  // classify
  Vec intensities;                  // regress
};

/// Flattened non-bias weights, in visit order.
template <class P>
Vec weight_vector(const P& params) {
  Vec out;
  for (const auto& slot : tensor_slots(params)) {
    if (!slot.bias) out.insert(out.end(), slot.data.begin(), slot.data.end());
  }
  return out;
}

/// grad += λ ∂R/∂θ on every non-bias tensor.
template <class P>
void add_penalty_grad(const P& params, P& grad, const LossConfig& cfg) {
  if (cfg.lambda == 0.0) return;
  const Vec theta = weight_vector(params);
  const Vec g = l2_penalty_grad(theta, cfg.l2_form);
  auto slots = tensor_slots(grad);
  std::size_t off = 0;
  for (auto& slot : slots) {
    if (slot.bias) continue;
    for (auto& x : slot.data) x += cfg.lambda * g[off++];
  }
}

struct ObjectiveResult {
  double loss = 0.0;
  double data_loss = 0.0;
  BieruModel grad;
  std::vector<Vec> input_grads;
  HeadForward head;
  std::vector<Vec> features;
};

inline double data_loss(const BieruModel& model, const HeadForward& head, const Targets& targets,
                        const LossConfig& cfg) {
  LossConfig no_penalty = cfg;
  no_penalty.lambda = 0.0;
  if (model.config.task == Task::classify) return ce_loss(head.cache.outputs, targets.labels, {}, no_penalty);
  return mse_loss(head.intensities, targets.intensities, {}, no_penalty);
}

/// Loss (and, when `with_grad`, its gradient) for one dialogue.
inline ObjectiveResult conversation_objective(const BieruModel& model, const std::vector<Vec>& utterances,
                                              const Targets& targets, const LossConfig& cfg,
                                              bool train_mode, Rng* rng, bool with_grad = true) {
  ObjectiveResult r;
  auto fw = bieru_forward(model, utterances, train_mode, rng);
  r.head = head_forward(model.head, fw.features);
  r.data_loss = data_loss(model, r.head, targets, cfg);
  r.loss = r.data_loss;
  if (cfg.lambda > 0.0) r.loss += cfg.lambda * l2_penalty(weight_vector(model), cfg.l2_form);
  if (with_grad) {
    auto hg = loss_backward(model.head, r.head.cache, targets.labels, targets.intensities);
    auto bg = bieru_backward(model, fw, hg.features);
    r.grad = std::move(bg.params);
    r.grad.head = std::move(hg.head);
    r.input_grads = std::move(bg.inputs);
    add_penalty_grad(model, r.grad, cfg);
  }
  r.features = std::move(fw.features);
  return r;
}

}  // namespace bieru
