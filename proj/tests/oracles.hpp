#pragma once

// Independent reference implementations for the tests. Deliberately naive:
// plain loops over materialized arrays, no shared code with the library
// beyond the parameter structs they read.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "bieru.hpp"

namespace oracle {

using bieru::Mat;
using bieru::Vec;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double act(bieru::Activation a, double x) {
  switch (a) {
    case bieru::Activation::tanh: return std::tanh(x);
    case bieru::Activation::sigmoid: return sigmoid(x);
    case bieru::Activation::relu: return x > 0 ? x : 0.0;
  }
  return 0.0;
}

/// mᵀ T m by double loop.
inline double bilinear(const Mat& t, const Vec& m) {
  double s = 0.0;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = 0; b < m.size(); ++b) s += m[a] * t(a, b) * m[b];
  return s;
}

/// U V + diag(e), by triple loop.
inline Mat slice_from_factors(const Mat& u, const Mat& v, const Vec& e) {
  Mat t(u.rows, v.cols);
  for (std::size_t a = 0; a < u.rows; ++a)
    for (std::size_t b = 0; b < v.cols; ++b) {
      double s = 0.0;
      for (std::size_t l = 0; l < u.cols; ++l) s += u(a, l) * v(l, b);
      t(a, b) = s + (a == b ? e[a] : 0.0);
    }
  return t;
}

/// f(mᵀ T^{[1:k]} m + W m), projected when present; every slice is built
/// from scratch (factors or the stored full matrix).
inline Vec ntn(const bieru::GntbParams& p, const Vec& p_prev, const Vec& u) {
  Vec m = p_prev;
  m.insert(m.end(), u.begin(), u.end());
  const std::size_t k = p.config.k;
  Vec z(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto& s = p.slices[i];
    Mat t = p.config.mode == bieru::GntbMode::low_rank ? slice_from_factors(s.U, s.V, s.e) : s.T;
    double lin = 0.0;
    for (std::size_t j = 0; j < m.size(); ++j) lin += p.W(i, j) * m[j];
    z[i] = bilinear(t, m) + lin;
  }
  Vec pre = z;
  if (p.proj) {
    pre.assign(p.config.d, 0.0);
    for (std::size_t a = 0; a < p.config.d; ++a)
      for (std::size_t i = 0; i < k; ++i) pre[a] += (*p.proj)(a, i) * z[i];
  }
  for (double& x : pre) x = act(p.config.activation, x);
  return pre;
}

/// Valid 1-D correlation, relu, global max-pool.
inline Vec conv(const Mat& w, const Vec& b, const Vec& x) {
  Vec out(w.rows, 0.0);
  for (std::size_t f = 0; f < w.rows; ++f) {
    double best = 0.0;
    for (std::size_t s = 0; s + w.cols <= x.size(); ++s) {
      double r = b[f];
      for (std::size_t q = 0; q < w.cols; ++q) r += w(f, q) * x[s + q];
      best = std::max(best, std::max(r, 0.0));
    }
    out[f] = best;
  }
  return out;
}

struct Lstm {
  Vec h, c;
};

/// Gate order (i, f, g, o) over rows of W_ih / W_hh.
inline Lstm lstm(const bieru::TfeParams& p, const Vec& x, const Lstm& prev) {
  const std::size_t hs = p.config.hidden;
  Lstm out{Vec(hs), Vec(hs)};
  auto gate = [&](std::size_t row) {
    double s = p.b_ih[row] + p.b_hh[row];
    for (std::size_t j = 0; j < x.size(); ++j) s += p.w_ih(row, j) * x[j];
    for (std::size_t j = 0; j < hs; ++j) s += p.w_hh(row, j) * prev.h[j];
    return s;
  };
  for (std::size_t j = 0; j < hs; ++j) {
    const double i = sigmoid(gate(j));
    const double f = sigmoid(gate(hs + j));
    const double g = std::tanh(gate(2 * hs + j));
    const double o = sigmoid(gate(3 * hs + j));
    out.c[j] = f * prev.c[j] + i * g;
    out.h[j] = o * std::tanh(out.c[j]);
  }
  return out;
}

inline double fraction_correct(const std::vector<std::size_t>& p, const std::vector<std::size_t>& y) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(p.size());
}

/// Nearest class mean, means estimated from `train`.
inline double nearest_centroid_accuracy(const bieru::Dataset& train, const bieru::Dataset& test, std::size_t n_class) {
  const std::size_t d = train.manifest.d;
  std::vector<Vec> mean(n_class, Vec(d, 0.0));
  std::vector<double> count(n_class, 0.0);
  for (const auto& c : train.conversations)
    for (const auto& u : c.utterances) {
      for (std::size_t j = 0; j < d; ++j) mean[u.label][j] += u.features[j];
      count[u.label] += 1.0;
    }
  for (std::size_t c = 0; c < n_class; ++c)
    for (double& x : mean[c]) x = count[c] > 0 ? x / count[c] : 1e300;
  std::size_t ok = 0, n = 0;
  for (const auto& c : test.conversations)
    for (const auto& u : c.utterances) {
      std::size_t best = 0;
      double best_d = 1e308;
      for (std::size_t k = 0; k < n_class; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (u.features[j] - mean[k][j]) * (u.features[j] - mean[k][j]);
        if (s < best_d) {
          best_d = s;
          best = k;
        }
      }
      ok += best == u.label;
      ++n;
    }
  return static_cast<double>(ok) / static_cast<double>(n);
}

}  // namespace oracle

namespace testutil {

/// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("bieru_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline bieru::ModelConfig small_config(bieru::Variant v = bieru::Variant::lc,
                                       bieru::Task task = bieru::Task::classify) {
  bieru::ModelConfig c;
  c.gntb = {3, 3, 2, task == bieru::Task::classify ? bieru::Activation::sigmoid : bieru::Activation::relu,
            bieru::GntbMode::low_rank};
  c.tfe = {3, 2, 2, 2};
  c.variant = v;
  c.task = task;
  c.n_class = 3;
  return c;
}

/// The default model (CLI defaults) sized for the synthetic set: k = d,
/// r = 10, H = 100, F = 50, K = 3, sigmoid, dropout 0.8.
inline bieru::ModelConfig default_config(std::size_t d, std::size_t n_class,
                                         bieru::Ablation ablation = bieru::Ablation::full) {
  bieru::ModelConfig c;
  c.gntb = {d, d, 10, bieru::Activation::sigmoid, bieru::GntbMode::low_rank};
  c.tfe = {d, 100, 50, 3};
  c.variant = bieru::Variant::lc;
  c.n_class = n_class;
  c.dropout = 0.8;
  c.ablation = ablation;
  return c;
}

/// 20 train and 20 test conversations from one generator.
struct SynthSplit {
  bieru::Dataset train, test;
};

inline SynthSplit synth_split(std::uint64_t seed, double separation = 5.0, std::size_t n = 20) {
  bieru::Rng rng(seed);
  bieru::SynthOptions so;
  so.separation = separation;
  bieru::SyntheticGenerator gen(so, rng);
  SynthSplit s;
  s.train = gen.generate(n, "train-");
  s.test = gen.generate(n, "test-");
  return s;
}

inline std::vector<bieru::Vec> random_conversation(bieru::Rng& rng, std::size_t n, std::size_t d) {
  std::vector<bieru::Vec> u(n, bieru::Vec(d));
  for (auto& v : u)
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return u;
}

inline double max_abs_diff(const bieru::Vec& a, const bieru::Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : 1e300;
}

}  // namespace testutil
