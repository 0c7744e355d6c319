#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace bieru;

namespace {

TfeParams random_tfe(const TfeConfig& cfg, Rng& rng, double scale = 1.0) {
  TfeParams p = TfeParams::zeros(cfg);
  visit_tensors(p, [&](const std::string&, auto data, const Shape&, bool) {
    for (double& x : data) x = rng.uniform(-scale, scale);
  });
  return p;
}

Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return v;
}

}  // namespace

TEST(LstmCell, AllZero) {
  const auto p = TfeParams::zeros({2, 1, 1, 1});
  const auto out = lstm_cell(p, Vec{0.4, -3}, TfeState::zeros(1));
  EXPECT_EQ(out.state.c, Vec{0});
  EXPECT_EQ(out.h, Vec{0});
}

TEST(LstmCell, CarriedCellGateByGate) {
  const auto p = TfeParams::zeros({1, 1, 1, 1});
  const auto out = lstm_cell(p, Vec{0}, TfeState{Vec{0}, Vec{1}});
  EXPECT_DOUBLE_EQ(out.state.c[0], 0.5);
  EXPECT_DOUBLE_EQ(out.h[0], 0.5 * std::tanh(0.5));
}

TEST(LstmCell, MatchesNaiveLoops) {
  Rng rng(3);
  const TfeConfig cfg{4, 3, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_tfe(cfg, rng);
    const Vec x = random_vec(rng, 4);
    const TfeState s{random_vec(rng, 3), random_vec(rng, 3, 2.0)};
    const auto out = lstm_cell(p, x, s);
    const auto ref = oracle::lstm(p, x, {s.h, s.c});
    EXPECT_LE(testutil::max_abs_diff(out.h, ref.h), 1e-14);
    EXPECT_LE(testutil::max_abs_diff(out.state.c, ref.c), 1e-14);
  }
}

TEST(LstmCell, GateOrderIfgo) {
  // Only the forget-gate block (rows H..2H) is driven: c_t = σ(b_f)·c_{t-1}.
  auto p = TfeParams::zeros({1, 1, 1, 1});
  p.b_ih[1] = 2.0;
  const auto out = lstm_cell(p, Vec{0}, TfeState{Vec{0}, Vec{1}});
  EXPECT_DOUBLE_EQ(out.state.c[0], oracle::sigmoid(2.0));
}

TEST(LstmCell, ShapeMismatch) {
  const auto p = TfeParams::zeros({2, 2, 1, 1});
  EXPECT_THROW(lstm_cell(p, Vec{1, 2, 3}, TfeState::zeros(2)), Error);
  EXPECT_THROW(lstm_cell(p, Vec{1, 2}, TfeState::zeros(3)), Error);
}

TEST(LstmCell, HiddenBoundedCellUnbounded) {
  Rng rng(4);
  const TfeConfig cfg{3, 4, 1, 1};
  const auto p = random_tfe(cfg, rng, 3.0);
  TfeState s = TfeState::zeros(4);
  double max_c = 0.0;
  for (int t = 0; t < 200; ++t) {
    auto out = lstm_cell(p, random_vec(rng, 3, 5.0), s);
    for (double h : out.h) {
      EXPECT_GT(h, -1.0);
      EXPECT_LT(h, 1.0);
    }
    s = out.state;
    for (double c : s.c) max_c = std::max(max_c, std::abs(c));
  }
  EXPECT_GT(max_c, 1.0);  // the cell is free to leave [-1, 1]
}

TEST(ConvChannel, OnesFilter) {
  auto p = TfeParams::zeros({4, 1, 1, 3});
  p.conv_w = Mat::from_rows({{1, 1, 1}});
  const auto out = conv_channel(p, Vec{1, 2, 3, 4});
  EXPECT_EQ(out.l, Vec{9});
  EXPECT_EQ(out.cache.argmax[0], 1u);
}

TEST(ConvChannel, ZeroFilter) {
  const auto p = TfeParams::zeros({4, 1, 1, 2});
  EXPECT_EQ(conv_channel(p, Vec{5, -1, 2, 8}).l, Vec{0});
}

TEST(ConvChannel, ReluClampsNegativeResponses) {
  auto p = TfeParams::zeros({2, 1, 1, 1});
  p.conv_w = Mat::from_rows({{-1}});
  EXPECT_EQ(conv_channel(p, Vec{1, 2}).l, Vec{0});
}

TEST(ConvChannel, InputShorterThanKernel) {
  TfeConfig cfg{2, 1, 1, 3};
  EXPECT_THROW(cfg.validate(), Error);
  auto p = TfeParams::zeros({3, 1, 1, 3});
  EXPECT_THROW(conv_channel(p, Vec{1, 2}), Error);
}

TEST(ConvChannel, MatchesNaiveLoops) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng.below(6);
    const TfeConfig cfg{d, 1, 1 + rng.below(4), 1 + rng.below(d)};
    const auto p = random_tfe(cfg, rng);
    const Vec x = random_vec(rng, d);
    EXPECT_EQ(conv_channel(p, x).l, oracle::conv(p.conv_w, p.conv_b, x));
  }
}

TEST(ConvChannel, OutputNonNegative) {
  Rng rng(13);
  const TfeConfig cfg{6, 1, 8, 3};
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_tfe(cfg, rng, 2.0);
    for (double l : conv_channel(p, random_vec(rng, 6, 3.0)).l) EXPECT_GE(l, 0.0);
  }
}

TEST(TfeForward, Concatenation) {
  Rng rng(18);
  const auto p = random_tfe({3, 1, 1, 2}, rng);
  const Vec x = random_vec(rng, 3);
  const auto out = tfe_forward(p, x, TfeState::zeros(1));
  const Vec h = lstm_cell(p, x, TfeState::zeros(1)).h;
  const Vec l = conv_channel(p, x).l;
  EXPECT_EQ(out.e, (Vec{h[0], l[0]}));
}

TEST(TfeForward, AllZero) {
  const auto p = TfeParams::zeros({5, 3, 4, 2});
  const auto out = tfe_forward(p, Vec{1, -2, 3, 0.5, 9}, TfeState::zeros(3));
  EXPECT_EQ(out.e, Vec(7, 0.0));
}

TEST(TfeForward, LengthIsHPlusF) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.below(5);
    const TfeConfig cfg{d, 1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(d)};
    const auto p = random_tfe(cfg, rng);
    EXPECT_EQ(tfe_forward(p, random_vec(rng, d), TfeState::zeros(cfg.hidden)).e.size(), cfg.hidden + cfg.filters);
  }
}

TEST(TfeBackward, ZeroUpstream) {
  Rng rng(15);
  const TfeConfig cfg{3, 2, 2, 2};
  const auto p = random_tfe(cfg, rng);
  const auto out = tfe_forward(p, random_vec(rng, 3), TfeState{random_vec(rng, 2), random_vec(rng, 2)});
  const auto g = tfe_backward(p, out.cache, Vec(4, 0.0), TfeState::zeros(2));
  for (double x : flatten(g.params)) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(g.p, Vec(3, 0.0));
  EXPECT_EQ(g.state_prev.h, Vec(2, 0.0));
  EXPECT_EQ(g.state_prev.c, Vec(2, 0.0));
}

TEST(TfeBackward, TieRoutesToLowestIndex) {
  // Filter [1], K = 1 over p = [2, 0, 2]: responses tie at positions 0 and 2.
  auto p = TfeParams::zeros({3, 1, 1, 1});
  p.conv_w = Mat::from_rows({{1}});
  const auto out = tfe_forward(p, Vec{2, 0, 2}, TfeState::zeros(1));
  EXPECT_EQ(out.cache.conv.argmax[0], 0u);
  const auto g = tfe_backward(p, out.cache, Vec{0, 1}, TfeState::zeros(1));
  EXPECT_EQ(g.p, (Vec{1, 0, 0}));
  EXPECT_EQ(g.params.conv_w(0, 0), 2.0);
  EXPECT_EQ(g.params.conv_b[0], 1.0);
}

TEST(TfeBackward, StaleCacheRejected) {
  Rng rng(16);
  const auto a = random_tfe({3, 2, 2, 2}, rng);
  const auto b = random_tfe({3, 3, 2, 2}, rng);
  const auto out = tfe_forward(a, random_vec(rng, 3), TfeState::zeros(2));
  try {
    tfe_backward(b, out.cache, Vec(5, 1.0), TfeState::zeros(3));
    FAIL() << "expected stale cache";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::stale_cache);
  }
}

// Scalarized single LSTM step: gradient wrt every parameter by central
// differences, with no harness involved.
TEST(LstmCell, DirectFiniteDifference) {
  Rng rng(17);
  const TfeConfig cfg{3, 2, 1, 1};
  const auto p = random_tfe(cfg, rng, 0.5);
  const Vec x = random_vec(rng, 3);
  const TfeState s{random_vec(rng, 2), random_vec(rng, 2)};
  const Vec wh = random_vec(rng, 2), wc = random_vec(rng, 2);
  auto objective = [&](const TfeParams& q) {
    const auto o = lstm_cell(q, x, s);
    return dot(wh, o.h) + dot(wc, o.state.c);
  };
  const auto out = tfe_forward(p, x, s);
  // e = h ⊕ l: feed wh on h, nothing on l, and wc through the next-state slot.
  Vec ge = wh;
  ge.push_back(0.0);
  const auto g = tfe_backward(p, out.cache, ge, TfeState{Vec(2, 0.0), wc});
  const Vec theta = flatten(p);
  const Vec fd = finite_diff_grad(
      [&](std::span<const double> t) {
        TfeParams q = p;
        unflatten(q, t);
        return objective(q);
      },
      theta);
  const Vec an = flatten(g.params);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_NEAR(an[i], fd[i], 1e-8) << i;
}

class TfeGradcheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(TfeGradcheck, SmallConfigs) {
  GradcheckOptions opts;
  opts.seed = GetParam();
  for (const TfeConfig& cfg : {TfeConfig{3, 2, 2, 2}, TfeConfig{4, 4, 4, 4}, TfeConfig{2, 1, 3, 1}}) {
    for (const auto& c : gradcheck_tfe(cfg, "tfe", opts)) {
      EXPECT_LE(c.max_rel_error, 1e-5) << c.tensor << " seed " << opts.seed;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, TfeGradcheck, ::testing::Values(1, 2, 3, 4, 5));
