#pragma once

// Evaluation metrics: support-weighted accuracy and F1, Pearson r, MAE and
// the confusion matrix (rows = true class, columns = predicted class).

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "bieru/numkit.hpp"

namespace bieru {

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

namespace detail {

inline void check_pair(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                       std::string_view who) {
  if (preds.size() != labels.size()) {
    std::ostringstream os;
    os << who << ": " << preds.size() << " predictions vs " << labels.size() << " labels";
    throw Error(ErrorKind::shape, os.str());
  }
  if (preds.empty()) throw Error(ErrorKind::invalid_argument, std::string(who) + ": empty input");
}

inline std::size_t implied_classes(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  std::size_t n = 0;
  for (auto p : preds) n = std::max(n, p + 1);
  for (auto l : labels) n = std::max(n, l + 1);
  return n;
}

}  // namespace detail

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> preds,
                                        std::span<const std::size_t> labels, std::size_t n_class) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::shape, "confusion_matrix: length mismatch");
  ConfusionMatrix cm(n_class, std::vector<std::size_t>(n_class, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= n_class || labels[i] >= n_class) {
      std::ostringstream os;
      os << "confusion_matrix: label out of range at index " << i << " (pred " << preds[i] << ", true "
         << labels[i] << ", n_class " << n_class << ")";
      throw Error(ErrorKind::invalid_argument, os.str());
    }
    ++cm[labels[i]][preds[i]];
  }
  return cm;
}

struct ClassScore {
  std::size_t support = 0;
  std::size_t predicted = 0;
  std::size_t true_positive = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClassificationReport {
  double weighted_accuracy = 0.0;
  double weighted_f1 = 0.0;
  double macro_accuracy = 0.0;  // unweighted mean recall over classes with support
  std::vector<ClassScore> per_class;
  ConfusionMatrix confusion;
};

/// Undefined precision/recall/F1 count as 0.
inline ClassificationReport classification_report(std::span<const std::size_t> preds,
                                                  std::span<const std::size_t> labels,
                                                  std::size_t n_class) {
  detail::check_pair(preds, labels, "classification_report");
  ClassificationReport r;
  r.confusion = confusion_matrix(preds, labels, n_class);
  r.per_class.resize(n_class);
  const double total = static_cast<double>(preds.size());
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_class; ++c) {
    auto& s = r.per_class[c];
    s.true_positive = r.confusion[c][c];
    for (std::size_t j = 0; j < n_class; ++j) {
      s.support += r.confusion[c][j];
      s.predicted += r.confusion[j][c];
    }
    s.precision = s.predicted ? static_cast<double>(s.true_positive) / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.support ? static_cast<double>(s.true_positive) / static_cast<double>(s.support) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    const double w = static_cast<double>(s.support) / total;
    r.weighted_accuracy += w * s.recall;
    r.weighted_f1 += w * s.f1;
    if (s.support) {
      r.macro_accuracy += s.recall;
      ++present;
    }
  }
  if (present) r.macro_accuracy /= static_cast<double>(present);
  return r;
}

/// Σ_c (support_c / N) · recall_c, identical to the overall fraction correct.
inline double weighted_accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  detail::check_pair(preds, labels, "weighted_accuracy");
  return classification_report(preds, labels, detail::implied_classes(preds, labels)).weighted_accuracy;
}

inline double weighted_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  detail::check_pair(preds, labels, "weighted_f1");
  return classification_report(preds, labels, detail::implied_classes(preds, labels)).weighted_f1;
}

inline double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::shape, "pearson_r: length mismatch");
  if (x.size() < 2) throw Error(ErrorKind::invalid_argument, "pearson_r: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorKind::degenerate, "pearson_r: zero variance");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

inline double mean_absolute_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw Error(ErrorKind::shape, "mae: length mismatch");
  if (pred.empty()) throw Error(ErrorKind::invalid_argument, "mae: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

/// Header row of label names, then one row of counts per true class.
inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& label_names) {
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t c = 0; c < cm.size(); ++c) {
    os << ',' << (c < label_names.size() ? label_names[c] : std::to_string(c));
  }
  os << '\n';
  for (std::size_t r = 0; r < cm.size(); ++r) {
    os << (r < label_names.size() ? label_names[r] : std::to_string(r));
    for (auto v : cm[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace bieru
