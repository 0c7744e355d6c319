#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace bieru;
using testutil::max_abs_diff;
using testutil::random_conversation;
using testutil::small_config;

namespace {

BieruModel random_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  BieruModel m = BieruModel::zeros(cfg);
  visit_tensors(m, [&](const std::string&, auto data, const Shape&, bool) {
    for (double& x : data) x = rng.uniform(-0.8, 0.8);
  });
  return m;
}

Vec first_half(const Vec& m) { return Vec(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(m.size() / 2)); }

}  // namespace

TEST(EruStep, NoDropoutTrainEqualsEval) {
  auto cfg = small_config();
  cfg.dropout = 0.0;
  const auto m = random_model(cfg, 1);
  Rng rng(2);
  const auto u = random_conversation(rng, 2, 3);
  Rng r1(5);
  const auto train = eru_step(m.fwd, cfg, u[0], u[1], TfeState::zeros(2), true, &r1);
  const auto eval = eru_step(m.fwd, cfg, u[0], u[1], TfeState::zeros(2), false, nullptr);
  EXPECT_EQ(train.e, eval.e);
  EXPECT_EQ(train.p, eval.p);
  EXPECT_EQ(train.state.h, eval.state.h);
}

TEST(EruStep, DropoutReplaysWithRecordedMasks) {
  auto cfg = small_config();
  cfg.dropout = 0.5;
  const auto m = random_model(cfg, 3);
  Rng rng(4);
  const auto u = random_conversation(rng, 2, 3);
  Rng a(9), b(9);
  const auto o1 = eru_step(m.fwd, cfg, u[0], u[1], TfeState::zeros(2), true, &a);
  const auto o2 = eru_step(m.fwd, cfg, u[0], u[1], TfeState::zeros(2), true, &b);
  EXPECT_EQ(o1.e, o2.e);  // fixed seed, same masks

  // Replay by hand: p ⊙ mask_p → TFE → ⊙ mask_e.
  ASSERT_EQ(o1.cache.p_mask.size(), 3u);
  ASSERT_EQ(o1.cache.e_mask.size(), 4u);
  for (double x : o1.cache.p_mask) EXPECT_TRUE(x == 0.0 || x == 2.0);
  const Vec p = gntb_forward(*m.fwd.gntb, u[0], u[1]).p;
  Vec pin = hadamard(p, o1.cache.p_mask);
  Vec e = hadamard(tfe_forward(*m.fwd.tfe, pin, TfeState::zeros(2)).e, o1.cache.e_mask);
  EXPECT_EQ(o1.e, e);

  // Eval mode: unmasked, unscaled.
  const auto ev = eru_step(m.fwd, cfg, u[0], u[1], TfeState::zeros(2), false, nullptr);
  EXPECT_EQ(ev.e, tfe_forward(*m.fwd.tfe, p, TfeState::zeros(2)).e);
  EXPECT_TRUE(ev.cache.p_mask.empty());
}

TEST(EruStep, TfeOnlyBypassesGntb) {
  auto cfg = small_config();
  cfg.ablation = Ablation::tfe_only;
  const auto m = random_model(cfg, 5);
  EXPECT_FALSE(m.fwd.gntb.has_value());
  Rng rng(6);
  const auto u = random_conversation(rng, 2, 3);
  const TfeState s{Vec{0.1, -0.2}, Vec{0.3, 0.0}};
  const auto out = eru_step(m.fwd, cfg, u[0], u[1], s, false, nullptr);
  EXPECT_EQ(out.e, tfe_forward(*m.fwd.tfe, u[1], s).e);
}

TEST(EruStep, DropoutNeedsRng) {
  auto cfg = small_config();
  cfg.dropout = 0.5;
  const auto m = random_model(cfg, 5);
  EXPECT_THROW(eru_step(m.fwd, cfg, Vec(3, 0.0), Vec(3, 0.0), TfeState::zeros(2), true, nullptr), Error);
}

TEST(RunDirection, SingleUtteranceGc) {
  const auto cfg = small_config(Variant::gc);
  const auto m = random_model(cfg, 7);
  const auto tr = run_direction(m.fwd, cfg, {Vec{0.5, -1, 2}}, false, false, nullptr);
  ASSERT_EQ(tr.e.size(), 1u);
  EXPECT_EQ(first_half(tr.caches[0].gntb->m), Vec(3, 0.0));
}

TEST(RunDirection, EmptyRejected) {
  const auto cfg = small_config();
  const auto m = random_model(cfg, 7);
  EXPECT_THROW(run_direction(m.fwd, cfg, {}, false, false, nullptr), Error);
}

TEST(RunDirection, LocalContextWiring) {
  const auto cfg = small_config(Variant::lc);
  const auto m = random_model(cfg, 8);
  Rng rng(9);
  const auto u = random_conversation(rng, 3, 3);

  const auto fwd = run_direction(m.fwd, cfg, u, false, false, nullptr);
  EXPECT_EQ(fwd.context, (std::vector<std::ptrdiff_t>{-1, 0, 1}));
  EXPECT_EQ(first_half(fwd.caches[0].gntb->m), Vec(3, 0.0));
  EXPECT_EQ(first_half(fwd.caches[1].gntb->m), u[0]);
  EXPECT_EQ(first_half(fwd.caches[2].gntb->m), u[1]);

  const auto bwd = run_direction(m.bwd, cfg, u, true, false, nullptr);
  EXPECT_EQ(bwd.order, (std::vector<std::size_t>{2, 1, 0}));
  EXPECT_EQ(bwd.context, (std::vector<std::ptrdiff_t>{-1, 2, 1}));
  EXPECT_EQ(first_half(bwd.caches[0].gntb->m), Vec(3, 0.0));
  EXPECT_EQ(first_half(bwd.caches[1].gntb->m), u[2]);
  EXPECT_EQ(first_half(bwd.caches[2].gntb->m), u[1]);
}

TEST(RunDirection, GlobalContextEqualsManualSteps) {
  auto cfg = small_config(Variant::gc);
  cfg.dropout = 0.4;
  const auto m = random_model(cfg, 10);
  Rng rng(11);
  const auto u = random_conversation(rng, 2, 3);

  Rng r1(12);
  const auto tr = run_direction(m.fwd, cfg, u, false, true, &r1);

  Rng r2(12);
  const Vec zero(3, 0.0);
  const auto s1 = eru_step(m.fwd, cfg, zero, u[0], TfeState::zeros(2), true, &r2);
  const auto s2 = eru_step(m.fwd, cfg, s1.p, u[1], s1.state, true, &r2);
  EXPECT_EQ(tr.e[0], s1.e);
  EXPECT_EQ(tr.e[1], s2.e);
  EXPECT_EQ(tr.p[1], s2.p);
}

TEST(BieruForward, FeatureLength) {
  ModelConfig cfg = small_config();
  cfg.tfe.hidden = 1;
  cfg.tfe.filters = 1;
  const auto m = random_model(cfg, 13);
  Rng rng(14);
  const auto fw = bieru_forward(m, random_conversation(rng, 5, 3), false, nullptr);
  ASSERT_EQ(fw.features.size(), 5u);
  for (const auto& f : fw.features) EXPECT_EQ(f.size(), 4u);
}

TEST(BieruForward, ZeroParamsZeroFeatures) {
  for (Variant v : {Variant::gc, Variant::lc}) {
    const auto m = BieruModel::zeros(small_config(v));
    Rng rng(15);
    for (const auto& f : bieru_forward(m, random_conversation(rng, 4, 3), false, nullptr).features) {
      EXPECT_EQ(f, Vec(8, 0.0));
    }
  }
}

TEST(BieruForward, EvalModeUsesNoRandomness) {
  auto cfg = small_config();
  cfg.dropout = 0.5;
  const auto m = random_model(cfg, 16);
  Rng rng(17);
  const auto u = random_conversation(rng, 4, 3);
  Rng probe(99);
  const auto before = probe.state();
  const auto a = bieru_forward(m, u, false, &probe);
  EXPECT_EQ(probe.state(), before);
  const auto b = bieru_forward(m, u, false, nullptr);
  EXPECT_EQ(a.features, b.features);
}

TEST(BieruForward, RejectsBadConversation) {
  const auto m = random_model(small_config(), 18);
  EXPECT_THROW(bieru_forward(m, {}, false, nullptr), Error);
  EXPECT_THROW(bieru_forward(m, {Vec{1, 2, 3}, Vec{1, 2}}, false, nullptr), Error);
  EXPECT_THROW(bieru_forward(m, {Vec{1, NAN, 3}}, false, nullptr), Error);
}

TEST(BieruForward, DirectionsAreIndependent) {
  Rng rng(19);
  const auto m = BieruModel::init(small_config(), rng);
  EXPECT_NE(flatten(*m.fwd.gntb), flatten(*m.bwd.gntb));
  EXPECT_NE(flatten(*m.fwd.tfe), flatten(*m.bwd.tfe));
}

// Tied parameters: reversing the conversation swaps the halves and reverses
// time.
TEST(BieruForward, ReversalSymmetry) {
  for (Variant v : {Variant::gc, Variant::lc}) {
    for (Ablation a : {Ablation::full, Ablation::gntb_only, Ablation::tfe_only}) {
      auto cfg = small_config(v);
      cfg.ablation = a;
      auto m = random_model(cfg, 20);
      m.bwd = m.fwd;
      Rng rng(21);
      const auto u = random_conversation(rng, 6, 3);
      const std::vector<Vec> rev(u.rbegin(), u.rend());
      const auto f = bieru_forward(m, u, false, nullptr).features;
      const auto g = bieru_forward(m, rev, false, nullptr).features;
      const std::size_t half = cfg.direction_size();
      for (std::size_t t = 0; t < u.size(); ++t) {
        const auto& x = f[t];
        const auto& y = g[u.size() - 1 - t];
        Vec swapped(y.begin() + static_cast<std::ptrdiff_t>(half), y.end());
        swapped.insert(swapped.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(half));
        EXPECT_LE(max_abs_diff(x, swapped), 1e-12) << to_string(v) << " " << to_string(a) << " t=" << t;
      }
    }
  }
}

TEST(BieruForward, GlobalContextReachesEveryLaterStep) {
  const auto cfg = small_config(Variant::gc);
  const auto m = random_model(cfg, 22);
  Rng rng(23);
  auto u = random_conversation(rng, 6, 3);
  const auto base = bieru_forward(m, u, false, nullptr);
  u[0][1] += 1e-3;
  const auto moved = bieru_forward(m, u, false, nullptr);
  for (std::size_t t = 1; t < u.size(); ++t) {
    EXPECT_GT(max_abs_diff(base.fwd.p[t], moved.fwd.p[t]), 0.0) << "t=" << t;
  }
}

TEST(BieruForward, LocalContextDoesNotChainP) {
  // The lc GNTB output at t depends only on u_{t-1}, u_t.
  const auto cfg = small_config(Variant::lc);
  const auto m = random_model(cfg, 24);
  Rng rng(25);
  auto u = random_conversation(rng, 6, 3);
  const auto base = bieru_forward(m, u, false, nullptr);
  u[0][1] += 1e-3;
  const auto moved = bieru_forward(m, u, false, nullptr);
  EXPECT_GT(max_abs_diff(base.fwd.p[1], moved.fwd.p[1]), 0.0);
  for (std::size_t t = 2; t < u.size(); ++t) EXPECT_EQ(base.fwd.p[t], moved.fwd.p[t]) << "t=" << t;
}

TEST(BieruBackward, ZeroUpstream) {
  auto cfg = small_config(Variant::gc);
  const auto m = random_model(cfg, 26);
  Rng rng(27);
  const auto u = random_conversation(rng, 4, 3);
  const auto fw = bieru_forward(m, u, false, nullptr);
  const auto g = bieru_backward(m, fw, std::vector<Vec>(4, Vec(cfg.feature_size(), 0.0)));
  for (double x : flatten(g.params)) EXPECT_EQ(x, 0.0);
  for (const auto& v : g.inputs) EXPECT_EQ(v, Vec(3, 0.0));
}

TEST(BieruBackward, StaleTraceRejected) {
  const auto cfg = small_config();
  const auto m = random_model(cfg, 28);
  Rng rng(29);
  const auto fw = bieru_forward(m, random_conversation(rng, 3, 3), false, nullptr);
  EXPECT_THROW(bieru_backward(m, fw, std::vector<Vec>(2, Vec(cfg.feature_size(), 1.0))), Error);
}

namespace {

/// Gradient of a loss placed only on position t, wrt every utterance.
std::vector<Vec> input_grads_from(const BieruModel& m, const std::vector<Vec>& u, std::size_t t, std::uint64_t seed) {
  const auto fw = bieru_forward(m, u, false, nullptr);
  std::vector<Vec> g(u.size(), Vec(m.config.feature_size(), 0.0));
  Rng rng(seed);
  for (double& x : g[t]) x = rng.uniform(0.5, 1.0);
  return bieru_backward(m, fw, g).inputs;
}

double norm_inf(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST(BieruBackward, LocalityProbe) {
  auto cfg = small_config(Variant::lc);
  auto m = random_model(cfg, 30);
  for (auto* dir : {&m.fwd, &m.bwd}) {
    std::fill(dir->tfe->w_ih.data.begin(), dir->tfe->w_ih.data.end(), 0.0);
    std::fill(dir->tfe->w_hh.data.begin(), dir->tfe->w_hh.data.end(), 0.0);
  }
  // Keep the conv channel firing so the probe has a signal to carry.
  for (auto* dir : {&m.fwd, &m.bwd}) dir->tfe->conv_b = Vec(cfg.tfe.filters, 1.0);
  Rng rng(31);
  const auto u = random_conversation(rng, 7, 3);
  for (std::size_t t = 0; t < u.size(); ++t) {
    const auto g = input_grads_from(m, u, t, 100 + t);
    double near = 0.0;
    for (std::size_t s = 0; s < u.size(); ++s) {
      const auto dist = s > t ? s - t : t - s;
      if (dist > 1) {
        EXPECT_EQ(norm_inf(g[s]), 0.0) << "t=" << t << " s=" << s;
      } else {
        near = std::max(near, norm_inf(g[s]));
      }
    }
    EXPECT_GT(near, 0.0) << "t=" << t;
  }
}

TEST(BieruBackward, GlobalContextHasNoLocality) {
  // Control for the probe above: gc with the same zeroed LSTM still
  // reaches distant utterances through the p-chain.
  auto cfg = small_config(Variant::gc);
  auto m = random_model(cfg, 30);
  for (auto* dir : {&m.fwd, &m.bwd}) {
    std::fill(dir->tfe->w_ih.data.begin(), dir->tfe->w_ih.data.end(), 0.0);
    std::fill(dir->tfe->w_hh.data.begin(), dir->tfe->w_hh.data.end(), 0.0);
    dir->tfe->conv_b = Vec(cfg.tfe.filters, 1.0);
  }
  Rng rng(31);
  const auto u = random_conversation(rng, 7, 3);
  const auto g = input_grads_from(m, u, 6, 7);
  EXPECT_GT(norm_inf(g[0]), 0.0);
}

struct ModelCase {
  Variant variant;
  Task task;
  Ablation ablation;
};

class ModelGradcheck : public ::testing::TestWithParam<std::tuple<ModelCase, std::uint64_t>> {};

TEST_P(ModelGradcheck, MatchesFiniteDifferences) {
  const auto [c, seed] = GetParam();
  GradcheckOptions opts;
  opts.seed = seed;
  const auto cfg = gradcheck_model_config(c.variant, c.task, c.ablation);
  for (L2Form form : {L2Form::squared_norm, L2Form::norm}) {
    const LossConfig loss{form == L2Form::norm ? 0.1 : 0.01, form, 1e-12};
    for (const auto& r : gradcheck_model(cfg, loss, "model", opts)) {
      EXPECT_LE(r.max_rel_error, 1e-5) << r.tensor << " seed " << seed;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(
    Cases, ModelGradcheck,
    ::testing::Combine(::testing::Values(ModelCase{Variant::gc, Task::classify, Ablation::full},
                                         ModelCase{Variant::lc, Task::classify, Ablation::full},
                                         ModelCase{Variant::gc, Task::regress, Ablation::full},
                                         ModelCase{Variant::lc, Task::regress, Ablation::full},
                                         ModelCase{Variant::gc, Task::classify, Ablation::gntb_only},
                                         ModelCase{Variant::lc, Task::regress, Ablation::gntb_only},
                                         ModelCase{Variant::gc, Task::regress, Ablation::tfe_only},
                                         ModelCase{Variant::lc, Task::classify, Ablation::tfe_only}),
                       ::testing::Values(1, 2, 3, 4, 5)));

TEST(BieruModel, CountIsSumOfComponents) {
  auto cfg = small_config();
  cfg.head_bias = true;
  const auto m = BieruModel::zeros(cfg);
  const std::size_t expect = 2 * (count_params(cfg.gntb) + count_params(cfg.tfe)) + cfg.feature_size() * 3 + 3;
  EXPECT_EQ(count_tensors_size(m), expect);
}
