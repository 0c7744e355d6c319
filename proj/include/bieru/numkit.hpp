#pragma once

// Dense 64-bit numeric kernel shared by every other module: vectors,
// row-major matrices, a reproducible RNG, initializers, activations and a
// central-difference gradient oracle.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace bieru {

enum class ErrorKind {
  shape,
  non_finite,
  invalid_argument,
  stale_cache,
  data,
  checkpoint_header,
  checkpoint_version,
  checkpoint_shape,
  checkpoint_truncated,
  io,
  config,
  degenerate,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::non_finite: return "non-finite";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::stale_cache: return "stale-cache";
    case ErrorKind::data: return "data";
    case ErrorKind::checkpoint_header: return "checkpoint-header";
    case ErrorKind::checkpoint_version: return "checkpoint-version";
    case ErrorKind::checkpoint_shape: return "checkpoint-shape";
    case ErrorKind::checkpoint_truncated: return "checkpoint-truncated";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::degenerate: return "degenerate";
  }
  return "unknown";
}

/// Every failure raised by the library carries a category so the CLI can
/// print a one-line categorized error.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

using Vec = std::vector<double>;

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows_in) {
    Mat m(rows_in.size(), rows_in.size() ? rows_in.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& row : rows_in) {
      if (row.size() != m.cols) {
        throw Error(ErrorKind::shape, "ragged matrix literal");
      }
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  friend bool operator==(const Mat&, const Mat&) = default;
};

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace detail

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> xs, std::string_view what) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i])) {
      std::ostringstream os;
      os << what << ": non-finite value at index " << i;
      throw Error(ErrorKind::non_finite, os.str());
    }
  }
}

inline Vec matvec(const Mat& m, std::span<const double> v) {
  if (m.cols != v.size()) {
    std::ostringstream os;
    os << "matvec: matrix " << detail::shape_str(m.rows, m.cols)
       << " vs vector of length " << v.size();
    throw Error(ErrorKind::shape, os.str());
  }
  Vec out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.data.data() + i * m.cols;
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * v[j];
    out[i] = acc;
  }
  return out;
}

/// mᵀ v
inline Vec matvec_t(const Mat& m, std::span<const double> v) {
  if (m.rows != v.size()) {
    std::ostringstream os;
    os << "matvec_t: matrix " << detail::shape_str(m.rows, m.cols)
       << " (transposed) vs vector of length " << v.size();
    throw Error(ErrorKind::shape, os.str());
  }
  Vec out(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.data.data() + i * m.cols;
    const double vi = v[i];
    if (vi == 0.0) continue;
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += row[j] * vi;
  }
  return out;
}

/// m += scale · a bᵀ
inline void add_outer(Mat& m, std::span<const double> a, std::span<const double> b,
                      double scale = 1.0) {
  if (m.rows != a.size() || m.cols != b.size()) {
    std::ostringstream os;
    os << "add_outer: matrix " << detail::shape_str(m.rows, m.cols) << " vs outer "
       << detail::shape_str(a.size(), b.size());
    throw Error(ErrorKind::shape, os.str());
  }
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double ai = scale * a[i];
    if (ai == 0.0) continue;
    double* row = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) row[j] += ai * b[j];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    std::ostringstream os;
    os << "dot: lengths " << a.size() << " and " << b.size();
    throw Error(ErrorKind::shape, os.str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// y += alpha · x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) {
    std::ostringstream os;
    os << "axpy: lengths " << x.size() << " and " << y.size();
    throw Error(ErrorKind::shape, os.str());
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec concat(std::span<const double> a, std::span<const double> b) {
  Vec out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline Vec hadamard(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::shape, "hadamard: length mismatch");
  }
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { tanh, sigmoid, relu };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "unknown";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "relu") return Activation::relu;
  throw Error(ErrorKind::config, "unknown activation '" + std::string(s) + "'");
}

inline double sigmoid(double x) {
  // Split on sign so exp never overflows.
  if (x >= 0.0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

inline double activate(Activation kind, double x) {
  switch (kind) {
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

/// Derivative evaluated at the pre-activation x. relu'(0) is taken as 0.
inline double activate_grad(Activation kind, double x) {
  switch (kind) {
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

inline Vec activation(Activation kind, std::span<const double> x) {
  require_finite(x, "activation input");
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activate(kind, x[i]);
  return out;
}

inline Vec activation_grad(Activation kind, std::span<const double> x) {
  require_finite(x, "activation_grad input");
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activate_grad(kind, x[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers

/// xoshiro256** seeded through SplitMix64. Every derived draw (uniform
/// doubles, bounded integers, normals) is computed here from raw 64-bit
/// outputs so sequences are identical on every platform and toolchain.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorKind::invalid_argument, "Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two raw draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

  const State& state() const noexcept { return state_; }
  void set_state(const State& s) noexcept { state_ = s; }

  friend bool operator==(const Rng& a, const Rng& b) { return a.state_ == b.state_; }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  State state_{};
};

enum class InitScheme { glorot_uniform, zeros };

inline Mat init_params(Rng& rng, std::size_t rows, std::size_t cols, InitScheme scheme) {
  if (rows == 0 || cols == 0) {
    throw Error(ErrorKind::invalid_argument, "init_params: zero dimension");
  }
  Mat m(rows, cols);
  if (scheme == InitScheme::glorot_uniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (double& x : m.data) x = rng.uniform(-bound, bound);
  }
  return m;
}

inline Vec init_vector(Rng& rng, std::size_t n, InitScheme scheme) {
  return init_params(rng, n, 1, scheme).data;
}

// ---------------------------------------------------------------------------
// Finite differences

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central-difference gradient of f at theta, one coordinate at a time.
inline Vec finite_diff_grad(const ScalarFn& f, std::span<const double> theta, double h = 1e-6) {
  if (!(h > 0.0)) throw Error(ErrorKind::invalid_argument, "finite_diff_grad: h must be > 0");
  Vec work(theta.begin(), theta.end());
  Vec grad(theta.size(), 0.0);
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double orig = work[i];
    const double hi = orig + h;
    const double lo = orig - h;
    work[i] = hi;
    const double up = f(work);
    work[i] = lo;
    const double down = f(work);
    work[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream os;
      os << "finite_diff_grad: non-finite objective at coordinate " << i;
      throw Error(ErrorKind::non_finite, os.str());
    }
    grad[i] = (up - down) / (hi - lo);  // the step actually taken
  }
  return grad;
}

/// |a-b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-8) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

// ---------------------------------------------------------------------------
// Named tensors
//
// Parameter containers expose `visit_tensors(p, fn)` free functions that call
// fn(name, span, shape, is_bias) for every trainable array in a fixed order.
// Flattening, optimizer state, checkpoints and gradient checks all walk that
// order.

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  return os.str();
}

template <class M>
inline auto mat_span(M& m) {
  return std::span(m.data);
}

template <class P>
std::size_t count_tensors_size(const P& p) {
  std::size_t n = 0;
  visit_tensors(p, [&](const std::string&, auto data, const Shape&, bool) { n += data.size(); });
  return n;
}

template <class P>
Vec flatten(const P& p) {
  Vec out;
  visit_tensors(p, [&](const std::string&, auto data, const Shape&, bool) {
    out.insert(out.end(), data.begin(), data.end());
  });
  return out;
}

template <class P>
void unflatten(P& p, std::span<const double> flat) {
  std::size_t off = 0;
  visit_tensors(p, [&](const std::string& name, auto data, const Shape&, bool) {
    if (off + data.size() > flat.size()) {
      throw Error(ErrorKind::shape, "unflatten: flat vector too short at " + name);
    }
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), data.size(), data.begin());
    off += data.size();
  });
  if (off != flat.size()) throw Error(ErrorKind::shape, "unflatten: flat vector too long");
}

template <class P>
void fill_zero(P& p) {
  visit_tensors(p, [](const std::string&, auto data, const Shape&, bool) {
    std::fill(data.begin(), data.end(), 0.0);
  });
}

template <class P>
P zeros_like(const P& p) {
  P out = p;
  fill_zero(out);
  return out;
}

template <class T>
struct TensorSlot {
  std::string name;
  std::span<T> data;
  Shape shape;
  bool bias = false;
};

/// Materialized visit order; mutable spans for non-const P.
template <class P>
auto tensor_slots(P& p) {
  using T = std::conditional_t<std::is_const_v<P>, const double, double>;
  std::vector<TensorSlot<T>> out;
  visit_tensors(p, [&](const std::string& name, auto data, const Shape& shape, bool bias) {
    out.push_back({name, std::span<T>(data), shape, bias});
  });
  return out;
}

/// Prefix every tensor name produced by an inner visit.
template <class F>
auto prefixed(std::string prefix, F& fn) {
  return [prefix = std::move(prefix), &fn](const std::string& name, auto data, const Shape& shape,
                                           bool bias) { fn(prefix + name, data, shape, bias); };
}

}  // namespace bieru
