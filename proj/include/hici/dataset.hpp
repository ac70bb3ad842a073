// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hici/error.hpp"
#include "hici/ndnet.hpp"
#include "hici/random.hpp"

namespace hici {

enum class DataSource { syn, news_like, external };

inline const char* to_string(DataSource s) {
  switch (s) {
    case DataSource::syn: return "syn";
    case DataSource::news_like: return "news-like";
    case DataSource::external: return "external";
  }
  return "?";
}

inline DataSource parse_source(const std::string& s) {
  if (s == "syn") return DataSource::syn;
  if (s == "news-like" || s == "news") return DataSource::news_like;
  if (s == "external") return DataSource::external;
  throw ConfigError("unknown data source '" + s + "'");
}

// E levels on [0, 1]; a single level sits at 0, where every dose curve is 1.
inline std::vector<double> uniform_dosage_grid(std::size_t levels) {
  if (levels <= 1) return {0.0};
  std::vector<double> grid(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    grid[i] = static_cast<double>(i) / static_cast<double>(levels - 1);
  }
  return grid;
}

struct DatasetMeta {
  std::size_t n = 1000;
  std::size_t p = 10;
  std::size_t k = 4;
  std::size_t e_levels = 1;
  std::size_t n_confounders = 5;
  double kappa = 1.0;
  double sigma = 0.1;
  std::uint64_t seed = 1;
  DataSource source = DataSource::syn;
  std::vector<double> dosage_grid{0.0};

  // Generator knobs beyond the core fields.
  double sparsity = 0.9;       // news-like: target fraction of zero counts
  double nonlinearity = 1.0;   // scale of the tanh outcome term; 0 gives a linear DGP
  bool confound_dosage = false;

  std::string base_name() const {
    switch (source) {
      case DataSource::syn: return "Syn";
      case DataSource::news_like: return "NEWS";
      case DataSource::external: return "Ext";
    }
    return "Data";
  }

  // "<base><K>", e.g. Syn35.
  std::string name() const { return base_name() + std::to_string(k); }

  void validate() const {
    if (n < 1) throw ConfigError("n must be >= 1");
    if (p < 1) throw ConfigError("p must be >= 1");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (e_levels < 1) throw ConfigError("e_levels must be >= 1");
    if (n_confounders > p) throw ConfigError("n_confounders must not exceed p");
    if (source != DataSource::external && n_confounders < 1) {
      throw ConfigError("generated data needs at least one confounder");
    }
    if (!std::isfinite(kappa) || kappa < 0.0) throw ConfigError("kappa must be >= 0");
    if (!std::isfinite(sigma) || sigma < 0.0) throw ConfigError("sigma must be >= 0");
    if (dosage_grid.size() != e_levels) {
      throw ConfigError("dosage_grid has " + std::to_string(dosage_grid.size()) +
                        " entries for " + std::to_string(e_levels) + " levels");
    }
    for (std::size_t i = 0; i < dosage_grid.size(); ++i) {
      if (dosage_grid[i] < 0.0 || dosage_grid[i] > 1.0) {
        throw ConfigError("dosage_grid entries must lie in [0, 1]");
      }
      if (i > 0 && !(dosage_grid[i] > dosage_grid[i - 1])) {
        throw ConfigError("dosage_grid must be strictly increasing");
      }
    }
    if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ConfigError("sparsity must lie in [0, 1)");
    if (!std::isfinite(nonlinearity) || nonlinearity < 0.0) {
      throw ConfigError("nonlinearity must be >= 0");
    }
  }
};

// All potential outcomes y_n(k, e), indexed zero-based.
class OutcomeTensor {
 public:
  OutcomeTensor() = default;
  OutcomeTensor(std::size_t n, std::size_t k, std::size_t e, double fill = 0.0)
      : n_(n), k_(k), e_(e), data_(n * k * e, fill) {}

  std::size_t samples() const { return n_; }
  std::size_t treatments() const { return k_; }
  std::size_t levels() const { return e_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t n, std::size_t k, std::size_t e) { return data_[(n * k_ + k) * e_ + e]; }
  double operator()(std::size_t n, std::size_t k, std::size_t e) const {
    return data_[(n * k_ + k) * e_ + e];
  }

  // N x K slice at dosage level e.
  Matrix level(std::size_t e) const {
    Matrix out(static_cast<Index>(n_), static_cast<Index>(k_));
    for (std::size_t n = 0; n < n_; ++n) {
      for (std::size_t k = 0; k < k_; ++k) out(static_cast<Index>(n), static_cast<Index>(k)) = (*this)(n, k, e);
    }
    return out;
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool operator==(const OutcomeTensor&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t k_ = 0;
  std::size_t e_ = 0;
  std::vector<double> data_;
};

// Treatment and dosage indices are zero-based in memory and one-based on disk.
struct Dataset {
  Matrix x;
  std::vector<int> t;
  std::vector<int> e;
  std::vector<double> y;
  std::optional<OutcomeTensor> y_full;
  DatasetMeta meta;

  std::size_t size() const { return y.size(); }

  void validate() const {
    const auto n = static_cast<std::size_t>(x.rows());
    if (t.size() != n || e.size() != n || y.size() != n) {
      throw ConsistencyError("dataset columns disagree on N");
    }
    if (meta.n != n || meta.p != static_cast<std::size_t>(x.cols())) {
      throw ConsistencyError("dataset shape disagrees with metadata");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i] < 0 || static_cast<std::size_t>(t[i]) >= meta.k) {
        throw ConsistencyError("treatment " + std::to_string(t[i] + 1) + " at sample " +
                               std::to_string(i + 1) + " outside [1, " + std::to_string(meta.k) + "]");
      }
      if (e[i] < 0 || static_cast<std::size_t>(e[i]) >= meta.e_levels) {
        throw ConsistencyError("dosage level " + std::to_string(e[i] + 1) + " at sample " +
                               std::to_string(i + 1) + " outside [1, " +
                               std::to_string(meta.e_levels) + "]");
      }
    }
    if (y_full) {
      if (y_full->samples() != n || y_full->treatments() != meta.k || y_full->levels() != meta.e_levels) {
        throw ConsistencyError("counterfactual tensor shape disagrees with metadata");
      }
      for (std::size_t i = 0; i < n; ++i) {
        if ((*y_full)(i, static_cast<std::size_t>(t[i]), static_cast<std::size_t>(e[i])) != y[i]) {
          throw ConsistencyError("factual outcome of sample " + std::to_string(i + 1) +
                                 " differs from its counterfactual-table entry");
        }
      }
    }
  }
};

// Rows `idx` of `d`, in the given order.
inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out;
  out.meta = d.meta;
  out.meta.n = idx.size();
  out.x.resize(static_cast<Index>(idx.size()), d.x.cols());
  out.t.reserve(idx.size());
  out.e.reserve(idx.size());
  out.y.reserve(idx.size());
  if (d.y_full) out.y_full = OutcomeTensor(idx.size(), d.meta.k, d.meta.e_levels);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t i = idx[r];
    if (i >= d.size()) throw DomainError("subset index out of range");
    out.x.row(static_cast<Index>(r)) = d.x.row(static_cast<Index>(i));
    out.t.push_back(d.t[i]);
    out.e.push_back(d.e[i]);
    out.y.push_back(d.y[i]);
    if (d.y_full) {
      for (std::size_t k = 0; k < d.meta.k; ++k) {
        for (std::size_t e = 0; e < d.meta.e_levels; ++e) (*out.y_full)(r, k, e) = (*d.y_full)(i, k, e);
      }
    }
  }
  return out;
}

inline std::size_t num_unique_treatments(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<std::uint8_t> seen(d.meta.k, 0);
  std::size_t count = 0;
  for (std::size_t i : idx) {
    auto& s = seen[static_cast<std::size_t>(d.t[i])];
    if (!s) {
      s = 1;
      ++count;
    }
  }
  return count;
}

// p_hat(T_k) = (1/|subset|) sum 1(t_n = k).
inline std::vector<double> empirical_treatment_marginal(const Dataset& d,
                                                        std::span<const std::size_t> idx) {
  if (idx.empty()) throw DomainError("treatment marginal of an empty subset");
  std::vector<double> counts(d.meta.k, 0.0);
  for (std::size_t i : idx) counts[static_cast<std::size_t>(d.t[i])] += 1.0;
  for (auto& c : counts) c /= static_cast<double>(idx.size());
  return counts;
}

inline std::vector<double> empirical_treatment_marginal(const Dataset& d) {
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return empirical_treatment_marginal(d, all);
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

using SplitRatios = std::array<double, 3>;
inline constexpr SplitRatios kDefaultRatios{0.6, 0.2, 0.2};
inline constexpr std::size_t kMaxSplitAttempts = 1000;

inline void validate_ratios(const SplitRatios& ratios) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

// Random train/validation/test partition, redrawn until the train part holds
// every treatment.
inline Split split_dataset(const Dataset& d, SplitRatios ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  const std::size_t n = d.size();
  const std::size_t k = d.meta.k;
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
  if (n < k || n_train < k) {
    throw InfeasibleError("cannot place all " + std::to_string(k) + " treatments in a train partition of " +
                          std::to_string(n_train) + " samples");
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (num_unique_treatments(d, order) < k) {
    throw InfeasibleError("some treatment in [1, " + std::to_string(k) + "] never occurs in the data");
  }

  Rng rng = Rng::stream(seed, Stream::split);
  for (std::size_t attempt = 0; attempt < kMaxSplitAttempts; ++attempt) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    const std::span<const std::size_t> train(order.data(), n_train);
    if (num_unique_treatments(d, train) < k) continue;
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
  }
  throw InfeasibleError("no split with all " + std::to_string(k) + " treatments in the train partition after " +
                        std::to_string(kMaxSplitAttempts) + " redraws; some treatment is too rare");
}

}  // namespace hici
