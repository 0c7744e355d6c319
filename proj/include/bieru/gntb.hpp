#pragma once

// Generalized neural tensor block.
//
//   m   = p_prev ⊕ u                               (length 2d)
//   b_i = mᵀ T_i m,   T_i = U_i V_i + diag(e_i)     (one per slice, k slices)
//   z   = b + W m                                  (length k)
//   p   = f(z)        when k == d
//   p   = f(P z)      when k != d, P is a learned d×k projection
//
// In low-rank mode the bilinear term is evaluated as (V_i m)ᵀ(U_iᵀ m) +
// Σ_j e_ij m_j², so T_i is never formed. materialize_slice() exists for
// oracles and for converting a low-rank block into a full-rank one.

#include <concepts>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bieru/numkit.hpp"

namespace bieru {

enum class GntbMode { low_rank, full_rank };

inline std::string_view to_string(GntbMode m) {
  return m == GntbMode::low_rank ? "low-rank" : "full-rank";
}

inline GntbMode parse_gntb_mode(std::string_view s) {
  if (s == "low-rank") return GntbMode::low_rank;
  if (s == "full-rank") return GntbMode::full_rank;
  throw Error(ErrorKind::config, "unknown GNTB mode '" + std::string(s) + "'");
}

struct GntbConfig {
  std::size_t d = 100;
  std::size_t k = 100;
  std::size_t rank = 10;
  Activation activation = Activation::sigmoid;
  GntbMode mode = GntbMode::low_rank;

  bool has_projection() const { return k != d; }

  void validate() const {
    if (d < 1) throw Error(ErrorKind::config, "gntb: d must be >= 1");
    if (k < 1) throw Error(ErrorKind::config, "gntb: k must be >= 1");
    if (mode == GntbMode::low_rank && (rank < 1 || rank > 2 * d)) {
      std::ostringstream os;
      os << "gntb: rank must lie in [1, 2d] = [1, " << 2 * d << "], got " << rank;
      throw Error(ErrorKind::config, os.str());
    }
  }

  friend bool operator==(const GntbConfig&, const GntbConfig&) = default;
};

struct GntbSlice {
  Mat U;  // 2d×r   (low-rank)
  Mat V;  // r×2d   (low-rank)
  Vec e;  // 2d     (low-rank)
  Mat T;  // 2d×2d  (full-rank)
};

struct GntbParams {
  GntbConfig config;
  std::vector<GntbSlice> slices;
  Mat W;                    // k×2d
  std::optional<Mat> proj;  // d×k, present iff k != d

  static GntbParams zeros(const GntbConfig& cfg) {
    cfg.validate();
    GntbParams p;
    p.config = cfg;
    const std::size_t n = 2 * cfg.d;
    p.slices.resize(cfg.k);
    for (auto& s : p.slices) {
      if (cfg.mode == GntbMode::low_rank) {
        s.U = Mat(n, cfg.rank);
        s.V = Mat(cfg.rank, n);
        s.e = Vec(n, 0.0);
      } else {
        s.T = Mat(n, n);
      }
    }
    p.W = Mat(cfg.k, n);
    if (cfg.has_projection()) p.proj = Mat(cfg.d, cfg.k);
    return p;
  }

  /// Glorot-uniform for every array, the diagonal e included.
  static GntbParams init(const GntbConfig& cfg, Rng& rng) {
    GntbParams p = zeros(cfg);
    const std::size_t n = 2 * cfg.d;
    for (auto& s : p.slices) {
      if (cfg.mode == GntbMode::low_rank) {
        s.U = init_params(rng, n, cfg.rank, InitScheme::glorot_uniform);
        s.V = init_params(rng, cfg.rank, n, InitScheme::glorot_uniform);
        s.e = init_vector(rng, n, InitScheme::glorot_uniform);
      } else {
        s.T = init_params(rng, n, n, InitScheme::glorot_uniform);
      }
    }
    p.W = init_params(rng, cfg.k, n, InitScheme::glorot_uniform);
    if (p.proj) *p.proj = init_params(rng, cfg.d, cfg.k, InitScheme::glorot_uniform);
    return p;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, GntbParams>
void visit_tensors(P& p, F&& fn) {
  const std::size_t n = 2 * p.config.d;
  for (std::size_t i = 0; i < p.slices.size(); ++i) {
    auto& s = p.slices[i];
    const std::string base = "slice" + std::to_string(i) + ".";
    if (p.config.mode == GntbMode::low_rank) {
      fn(base + "U", std::span(s.U.data), Shape{n, p.config.rank}, false);
      fn(base + "V", std::span(s.V.data), Shape{p.config.rank, n}, false);
      fn(base + "e", std::span(s.e), Shape{n}, false);
    } else {
      fn(base + "T", std::span(s.T.data), Shape{n, n}, false);
    }
  }
  fn(std::string("W"), std::span(p.W.data), Shape{p.config.k, n}, false);
  if (p.proj) fn(std::string("proj"), std::span(p.proj->data), Shape{p.config.d, p.config.k}, false);
}

/// Closed-form parameter count; equals the length of flatten(params).
inline std::size_t count_params(const GntbConfig& cfg) {
  const std::size_t n = 2 * cfg.d;
  std::size_t per_slice = cfg.mode == GntbMode::low_rank ? n * cfg.rank + cfg.rank * n + n : n * n;
  std::size_t total = cfg.k * per_slice + cfg.k * n;
  if (cfg.has_projection()) total += cfg.d * cfg.k;
  return total;
}

inline Mat materialize_slice(const GntbParams& params, std::size_t i) {
  if (params.config.mode != GntbMode::low_rank) {
    throw Error(ErrorKind::invalid_argument, "materialize_slice: block is not in low-rank mode");
  }
  if (i >= params.slices.size()) {
    std::ostringstream os;
    os << "materialize_slice: index " << i << " out of range (k = " << params.slices.size() << ")";
    throw Error(ErrorKind::invalid_argument, os.str());
  }
  const auto& s = params.slices[i];
  const std::size_t n = 2 * params.config.d;
  Mat t(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      double acc = 0.0;
      for (std::size_t l = 0; l < params.config.rank; ++l) acc += s.U(a, l) * s.V(l, b);
      t(a, b) = acc;
    }
    t(a, a) += s.e[a];
  }
  return t;
}

/// Full-rank block whose slices are the materialized low-rank slices.
inline GntbParams to_full_rank(const GntbParams& params) {
  GntbConfig cfg = params.config;
  cfg.mode = GntbMode::full_rank;
  GntbParams out = GntbParams::zeros(cfg);
  for (std::size_t i = 0; i < params.slices.size(); ++i) out.slices[i].T = materialize_slice(params, i);
  out.W = params.W;
  out.proj = params.proj;
  return out;
}

struct GntbCache {
  Vec m;                 // 2d
  std::vector<Vec> ut_m; // per slice, U_iᵀ m (low-rank)
  std::vector<Vec> v_m;  // per slice, V_i m  (low-rank)
  std::vector<Vec> t_m;  // per slice, T_i m  (full-rank)
  Vec bilinear;          // k
  Vec z;                 // k, bilinear + W m
  Vec pre;               // d, activation input
};

struct GntbOutput {
  Vec p;
  GntbCache cache;
};

inline GntbOutput gntb_forward(const GntbParams& params, std::span<const double> p_prev,
                               std::span<const double> u) {
  const auto& cfg = params.config;
  if (p_prev.size() != cfg.d || u.size() != cfg.d) {
    std::ostringstream os;
    os << "gntb_forward: expected inputs of length " << cfg.d << ", got p_prev " << p_prev.size()
       << " and u " << u.size();
    throw Error(ErrorKind::shape, os.str());
  }
  GntbOutput out;
  auto& c = out.cache;
  c.m = concat(p_prev, u);
  c.bilinear.assign(cfg.k, 0.0);
  const bool low = cfg.mode == GntbMode::low_rank;
  if (low) {
    c.ut_m.resize(cfg.k);
    c.v_m.resize(cfg.k);
  } else {
    c.t_m.resize(cfg.k);
  }
  for (std::size_t i = 0; i < cfg.k; ++i) {
    const auto& s = params.slices[i];
    double b;
    if (low) {
      c.ut_m[i] = matvec_t(s.U, c.m);
      c.v_m[i] = matvec(s.V, c.m);
      b = dot(c.v_m[i], c.ut_m[i]);
      for (std::size_t j = 0; j < c.m.size(); ++j) b += s.e[j] * c.m[j] * c.m[j];
    } else {
      c.t_m[i] = matvec(s.T, c.m);
      b = dot(c.m, c.t_m[i]);
    }
    if (!std::isfinite(b)) {
      std::ostringstream os;
      os << "gntb_forward: non-finite bilinear term in slice " << i;
      throw Error(ErrorKind::non_finite, os.str());
    }
    c.bilinear[i] = b;
  }
  c.z = matvec(params.W, c.m);
  for (std::size_t i = 0; i < cfg.k; ++i) c.z[i] += c.bilinear[i];
  c.pre = params.proj ? matvec(*params.proj, c.z) : c.z;
  for (std::size_t i = 0; i < c.pre.size(); ++i) {
    if (!std::isfinite(c.pre[i])) {
      std::ostringstream os;
      os << "gntb_forward: non-finite pre-activation at output " << i;
      if (!params.proj) os << " (slice " << i << ")";
      throw Error(ErrorKind::non_finite, os.str());
    }
  }
  out.p = activation(cfg.activation, c.pre);
  return out;
}

struct GntbInputGrads {
  Vec p_prev;
  Vec u;
};

namespace detail {

inline void check_gntb_cache(const GntbParams& params, const GntbCache& c) {
  const auto& cfg = params.config;
  const bool low = cfg.mode == GntbMode::low_rank;
  bool ok = c.m.size() == 2 * cfg.d && c.z.size() == cfg.k && c.bilinear.size() == cfg.k &&
            c.pre.size() == cfg.d;
  if (ok && low) {
    ok = c.ut_m.size() == cfg.k && c.v_m.size() == cfg.k;
    for (std::size_t i = 0; ok && i < cfg.k; ++i) {
      ok = c.ut_m[i].size() == cfg.rank && c.v_m[i].size() == cfg.rank;
    }
  } else if (ok) {
    ok = c.t_m.size() == cfg.k;
  }
  if (!ok) throw Error(ErrorKind::stale_cache, "gntb_backward: cache does not match parameters");
}

}  // namespace detail

/// Accumulates parameter gradients into `grad` and returns the input
/// gradients.
inline GntbInputGrads gntb_backward_into(const GntbParams& params, const GntbCache& c,
                                         std::span<const double> grad_p, GntbParams& grad) {
  const auto& cfg = params.config;
  detail::check_gntb_cache(params, c);
  if (grad_p.size() != cfg.d) throw Error(ErrorKind::shape, "gntb_backward: upstream length != d");
  if (grad.config != cfg) throw Error(ErrorKind::shape, "gntb_backward: gradient buffer config mismatch");

  Vec g_pre(cfg.d);
  for (std::size_t i = 0; i < cfg.d; ++i) g_pre[i] = grad_p[i] * activate_grad(cfg.activation, c.pre[i]);

  Vec g_z;
  if (params.proj) {
    add_outer(*grad.proj, g_pre, c.z);
    g_z = matvec_t(*params.proj, g_pre);
  } else {
    g_z = g_pre;
  }

  add_outer(grad.W, g_z, c.m);
  Vec g_m = matvec_t(params.W, g_z);

  const std::size_t n = c.m.size();
  for (std::size_t i = 0; i < cfg.k; ++i) {
    const double gi = g_z[i];
    if (gi == 0.0) continue;
    const auto& s = params.slices[i];
    auto& gs = grad.slices[i];
    if (cfg.mode == GntbMode::low_rank) {
      // b = (Uᵀm)·(Vm) + Σ e_j m_j²
      add_outer(gs.U, c.m, c.v_m[i], gi);
      add_outer(gs.V, c.ut_m[i], c.m, gi);
      const Vec u_vm = matvec(s.U, c.v_m[i]);
      const Vec vt_utm = matvec_t(s.V, c.ut_m[i]);
      for (std::size_t j = 0; j < n; ++j) {
        gs.e[j] += gi * c.m[j] * c.m[j];
        g_m[j] += gi * (u_vm[j] + vt_utm[j] + 2.0 * s.e[j] * c.m[j]);
      }
    } else {
      // b = mᵀ T m, ∂b/∂m = (T + Tᵀ) m
      add_outer(gs.T, c.m, c.m, gi);
      const Vec tt_m = matvec_t(s.T, c.m);
      for (std::size_t j = 0; j < n; ++j) g_m[j] += gi * (c.t_m[i][j] + tt_m[j]);
    }
  }

  GntbInputGrads out;
  out.p_prev.assign(g_m.begin(), g_m.begin() + static_cast<std::ptrdiff_t>(cfg.d));
  out.u.assign(g_m.begin() + static_cast<std::ptrdiff_t>(cfg.d), g_m.end());
  return out;
}

struct GntbGrads {
  GntbParams params;
  Vec p_prev;
  Vec u;
};

inline GntbGrads gntb_backward(const GntbParams& params, const GntbCache& cache,
                               std::span<const double> grad_p) {
  GntbGrads g;
  g.params = zeros_like(params);
  auto inputs = gntb_backward_into(params, cache, grad_p, g.params);
  g.p_prev = std::move(inputs.p_prev);
  g.u = std::move(inputs.u);
  return g;
}

}  // namespace bieru
