// SPDX-License-Identifier: Apache-2.0
#pragma once

// Counterfactual evaluation metrics: PEHE, MAPE over ATE, MISE, MAPE over the
// dosage ATE, and counterfactual RMSE.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hici/dataset.hpp"
#include "hici/error.hpp"
#include "hici/ndnet.hpp"

namespace hici {

inline constexpr double kDegenerateAte = 1e-12;

// Square root of the PEHE averaged over all C(K,2) unordered treatment pairs.
inline double pehe(const Matrix& y_full, const Matrix& y_pred) {
  if (y_full.rows() != y_pred.rows() || y_full.cols() != y_pred.cols()) {
    throw ShapeError("pehe: " + shape_str(y_full) + " vs " + shape_str(y_pred));
  }
  const Index k = y_full.cols();
  if (k < 2) throw DomainError("pehe needs K >= 2");
  const Index n = y_full.rows();
  if (n == 0) throw DomainError("pehe of an empty sample");
  double total = 0.0;
  for (Index m = 0; m < k; ++m) {
    for (Index r = 0; r < m; ++r) {
      double pair = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double d = (y_full(i, m) - y_full(i, r)) - (y_pred(i, m) - y_pred(i, r));
        pair += d * d;
      }
      total += pair / static_cast<double>(n);
    }
  }
  const double pairs = static_cast<double>(k) * static_cast<double>(k - 1) / 2.0;
  return std::sqrt(total / pairs);
}

// Per-treatment MAPE of the average effect of k against the mean of the other
// K - 1 treatments, and its mean over the non-degenerate k.
struct AteError {
  std::optional<double> value;
  std::vector<std::optional<double>> per_k;
};

namespace detail {

// (1/N) sum_n (y(n, k) - (1/(K-1)) sum_{l != k} y(n, l)) for one dosage level.
template <class Get>
double ate_at(Get&& y, std::size_t n, std::size_t k_count, std::size_t k) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double others = 0.0;
    for (std::size_t l = 0; l < k_count; ++l) {
      if (l != k) others += y(i, l);
    }
    acc += y(i, k) - others / static_cast<double>(k_count - 1);
  }
  return acc / static_cast<double>(n);
}

inline AteError summarize_ate(const std::vector<double>& actual, const std::vector<double>& predicted) {
  AteError out;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < actual.size(); ++k) {
    if (std::abs(actual[k]) < kDegenerateAte) {
      out.per_k.emplace_back(std::nullopt);
      continue;
    }
    const double v = std::abs((actual[k] - predicted[k]) / actual[k]);
    out.per_k.emplace_back(v);
    sum += v;
    ++used;
  }
  if (used > 0) out.value = sum / static_cast<double>(used);
  return out;
}

}  // namespace detail

inline AteError mape_ate(const Matrix& y_full, const Matrix& y_pred) {
  if (y_full.rows() != y_pred.rows() || y_full.cols() != y_pred.cols()) {
    throw ShapeError("mape_ate: " + shape_str(y_full) + " vs " + shape_str(y_pred));
  }
  if (y_full.cols() < 2) throw DomainError("mape_ate needs K >= 2");
  if (y_full.rows() == 0) throw DomainError("mape_ate of an empty sample");
  const auto n = static_cast<std::size_t>(y_full.rows());
  const auto k_count = static_cast<std::size_t>(y_full.cols());
  std::vector<double> actual(k_count);
  std::vector<double> predicted(k_count);
  auto truth = [&](std::size_t i, std::size_t l) { return y_full(static_cast<Index>(i), static_cast<Index>(l)); };
  auto pred = [&](std::size_t i, std::size_t l) { return y_pred(static_cast<Index>(i), static_cast<Index>(l)); };
  for (std::size_t k = 0; k < k_count; ++k) {
    actual[k] = detail::ate_at(truth, n, k_count, k);
    predicted[k] = detail::ate_at(pred, n, k_count, k);
  }
  return detail::summarize_ate(actual, predicted);
}

inline void check_same_shape(const OutcomeTensor& a, const OutcomeTensor& b, const char* what) {
  if (a.samples() != b.samples() || a.treatments() != b.treatments() || a.levels() != b.levels()) {
    throw ShapeError(std::string(what) + ": outcome tensors differ in shape");
  }
}

// Dosage ATE averaged over levels; N_E is taken as every sample at level e,
// which is all N for a fully simulated counterfactual table.
inline AteError mape_ate_dos(const OutcomeTensor& y_full, const OutcomeTensor& y_pred) {
  check_same_shape(y_full, y_pred, "mape_ate_dos");
  const std::size_t n = y_full.samples();
  const std::size_t k_count = y_full.treatments();
  const std::size_t levels = y_full.levels();
  if (k_count < 2) throw DomainError("mape_ate_dos needs K >= 2");
  if (levels < 1 || n == 0) throw DomainError("mape_ate_dos of an empty table");
  std::vector<double> actual(k_count);
  std::vector<double> predicted(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    double acc_a = 0.0;
    double acc_p = 0.0;
    for (std::size_t e = 0; e < levels; ++e) {
      acc_a += detail::ate_at([&](std::size_t i, std::size_t l) { return y_full(i, l, e); }, n, k_count, k);
      acc_p += detail::ate_at([&](std::size_t i, std::size_t l) { return y_pred(i, l, e); }, n, k_count, k);
    }
    actual[k] = acc_a / static_cast<double>(levels);
    predicted[k] = acc_p / static_cast<double>(levels);
  }
  return detail::summarize_ate(actual, predicted);
}

// sqrt of (1/(NK)) sum_n sum_k integral (y - y_hat)^2 dd, trapezoid rule over the grid.
inline double mise(const OutcomeTensor& y_full, const OutcomeTensor& y_pred, std::span<const double> grid) {
  check_same_shape(y_full, y_pred, "mise");
  const std::size_t levels = y_full.levels();
  if (levels < 2) throw DomainError("mise needs E >= 2");
  if (grid.size() != levels) throw ShapeError("mise: dosage grid length differs from E");
  const std::size_t n = y_full.samples();
  const std::size_t k_count = y_full.treatments();
  if (n == 0 || k_count == 0) throw DomainError("mise of an empty table");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < k_count; ++k) {
      double integral = 0.0;
      for (std::size_t e = 0; e + 1 < levels; ++e) {
        const double a = y_full(i, k, e) - y_pred(i, k, e);
        const double b = y_full(i, k, e + 1) - y_pred(i, k, e + 1);
        integral += 0.5 * (grid[e + 1] - grid[e]) * (a * a + b * b);
      }
      total += integral;
    }
  }
  return std::sqrt(total / (static_cast<double>(n) * static_cast<double>(k_count)));
}

// RMSE over every cell except each sample's factual (t_n, e_n).
inline double cf_rmse(const OutcomeTensor& y_full, const OutcomeTensor& y_pred, std::span<const int> t,
                      std::span<const int> e) {
  check_same_shape(y_full, y_pred, "cf_rmse");
  const std::size_t n = y_full.samples();
  if (t.size() != n || e.size() != n) throw ShapeError("cf_rmse: factual mask length differs from N");
  double acc = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < y_full.treatments(); ++k) {
      for (std::size_t lvl = 0; lvl < y_full.levels(); ++lvl) {
        if (static_cast<int>(k) == t[i] && static_cast<int>(lvl) == e[i]) continue;
        const double d = y_full(i, k, lvl) - y_pred(i, k, lvl);
        acc += d * d;
        ++cells;
      }
    }
  }
  if (cells == 0) throw DomainError("cf_rmse: no counterfactual cells (K = E = 1)");
  return std::sqrt(acc / static_cast<double>(cells));
}

struct MetricsReport {
  struct Unavailable {
    std::string metric;
    std::string reason;
  };

  std::optional<double> pehe_sqrt;
  std::optional<double> mape_ate;
  std::vector<std::optional<double>> mape_ate_per_k;
  std::optional<double> mise_sqrt;
  std::optional<double> mape_ate_dos;
  std::optional<double> cf_rmse;
  std::vector<Unavailable> unavailable;

  void mark(std::string metric, std::string reason) {
    unavailable.push_back({std::move(metric), std::move(reason)});
  }

  nlohmann::ordered_json to_json() const {
    auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
      return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["pehe_sqrt"] = opt(pehe_sqrt);
    j["mape_ate"] = opt(mape_ate);
    auto per_k = nlohmann::ordered_json::array();
    for (const auto& v : mape_ate_per_k) per_k.push_back(opt(v));
    j["mape_ate_per_k"] = per_k;
    j["mise_sqrt"] = opt(mise_sqrt);
    j["mape_ate_dos"] = opt(mape_ate_dos);
    j["cf_rmse"] = opt(cf_rmse);
    auto un = nlohmann::ordered_json::array();
    for (const auto& u : unavailable) un.push_back({{"metric", u.metric}, {"reason", u.reason}});
    j["unavailable"] = un;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    auto opt = [&](const char* key) -> std::optional<double> {
      if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
      return j.at(key).get<double>();
    };
    MetricsReport r;
    r.pehe_sqrt = opt("pehe_sqrt");
    r.mape_ate = opt("mape_ate");
    if (j.contains("mape_ate_per_k")) {
      for (const auto& v : j.at("mape_ate_per_k")) {
        r.mape_ate_per_k.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      }
    }
    r.mise_sqrt = opt("mise_sqrt");
    r.mape_ate_dos = opt("mape_ate_dos");
    r.cf_rmse = opt("cf_rmse");
    if (j.contains("unavailable")) {
      for (const auto& u : j.at("unavailable")) {
        r.mark(u.at("metric").get<std::string>(), u.at("reason").get<std::string>());
      }
    }
    return r;
  }
};

// Every metric that the data supports; the rest are listed as unavailable.
inline MetricsReport evaluate_metrics(const Dataset& d, const OutcomeTensor& pred) {
  MetricsReport r;
  if (!d.y_full) {
    for (const char* m : {"pehe_sqrt", "mape_ate", "mise_sqrt", "mape_ate_dos", "cf_rmse"}) {
      r.mark(m, "counterfactual outcomes absent");
    }
    return r;
  }
  const auto& truth = *d.y_full;
  const std::size_t k = d.meta.k;
  const std::size_t levels = d.meta.e_levels;

  if (levels == 1) {
    if (k >= 2) {
      const Matrix yt = truth.level(0);
      const Matrix yp = pred.level(0);
      r.pehe_sqrt = pehe(yt, yp);
      const auto ate = mape_ate(yt, yp);
      r.mape_ate_per_k = ate.per_k;
      if (ate.value) {
        r.mape_ate = ate.value;
      } else {
        r.mark("mape_ate", "degenerate ATE");
      }
    } else {
      r.mark("pehe_sqrt", "needs K >= 2");
      r.mark("mape_ate", "needs K >= 2");
    }
    r.mark("mise_sqrt", "defined for E > 1");
    r.mark("mape_ate_dos", "defined for E > 1");
  } else {
    r.mark("pehe_sqrt", "defined for E = 1");
    r.mark("mape_ate", "defined for E = 1");
    r.mise_sqrt = mise(truth, pred, d.meta.dosage_grid);
    if (k >= 2) {
      const auto ate = mape_ate_dos(truth, pred);
      if (ate.value) {
        r.mape_ate_dos = ate.value;
      } else {
        r.mark("mape_ate_dos", "degenerate ATE");
      }
    } else {
      r.mark("mape_ate_dos", "needs K >= 2");
    }
  }
  if (k * levels > 1) {
    r.cf_rmse = cf_rmse(truth, pred, d.t, d.e);
  } else {
    r.mark("cf_rmse", "no counterfactual cells");
  }
  return r;
}

}  // namespace hici
