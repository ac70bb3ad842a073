// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic observational data with known potential outcomes.
//
// Both generators share one outcome model over a C-dimensional confounder
// score z_n:
//
//   y_n(k, e) = (alpha_k . z_n + s_k tanh(u_k . z_n) + c_k) * r_k(d_e) + sigma * eps
//   r_k(d)    = 1 + a_k d - b_k d^2
//
// and assign treatments from softmax(kappa * score_k(z_n)). With kappa = 0 the
// assignment is uniform; dosage is uniform unless confound_dosage is set.

#include <algorithm>
#include <cmath>
#include <vector>

#include "hici/dataset.hpp"
#include "hici/random.hpp"

namespace hici {

namespace detail {

struct OutcomeModel {
  Matrix alpha;  // K x C
  Matrix u;      // K x C
  Vector scale;  // s_k
  Vector shift;  // c_k
  Vector dose_a;
  Vector dose_b;

  static OutcomeModel draw(Rng& rng, std::size_t k, std::size_t c, double nonlinearity) {
    OutcomeModel m;
    const auto ki = static_cast<Index>(k);
    const auto ci = static_cast<Index>(c);
    const double inv = 1.0 / std::sqrt(static_cast<double>(c));
    m.alpha.resize(ki, ci);
    m.u.resize(ki, ci);
    m.scale.resize(ki);
    m.shift.resize(ki);
    m.dose_a.resize(ki);
    m.dose_b.resize(ki);
    for (Index j = 0; j < ki; ++j) {
      for (Index q = 0; q < ci; ++q) m.alpha(j, q) = 2.0 * inv * rng.normal();
      for (Index q = 0; q < ci; ++q) m.u(j, q) = 2.0 * inv * rng.normal();
      m.scale(j) = nonlinearity * rng.uniform(1.0, 2.0);
      m.shift(j) = 2.0 * rng.normal();
      m.dose_a(j) = rng.uniform(0.5, 2.0);
      m.dose_b(j) = rng.uniform(0.5, 2.0);
    }
    return m;
  }

  double base(std::size_t k, const Vector& z) const {
    const auto j = static_cast<Index>(k);
    const double lin = alpha.row(j).dot(z);
    const double bend = scale(j) == 0.0 ? 0.0 : scale(j) * std::tanh(u.row(j).dot(z));
    return lin + bend + shift(j);
  }

  double dose(std::size_t k, double d) const {
    const auto j = static_cast<Index>(k);
    return 1.0 + dose_a(j) * d - dose_b(j) * d * d;
  }
};

inline std::vector<double> softmax_weights(const Vector& logits) {
  const double m = logits.maxCoeff();
  std::vector<double> w(static_cast<std::size_t>(logits.size()));
  for (Index i = 0; i < logits.size(); ++i) w[static_cast<std::size_t>(i)] = std::exp(logits(i) - m);
  return w;
}

// Draws assignments and fills every potential outcome given confounder scores
// z (N x C) and treatment logits (N x K, before kappa).
inline void assign_and_simulate(Dataset& d, const Matrix& z, const Matrix& treat_scores, Rng& rng) {
  const auto& meta = d.meta;
  const std::size_t n = meta.n;
  const std::size_t k = meta.k;
  const std::size_t levels = meta.e_levels;
  const std::size_t c = static_cast<std::size_t>(z.cols());

  const OutcomeModel outcome = OutcomeModel::draw(rng, k, c, meta.nonlinearity);
  Matrix dose_w(static_cast<Index>(levels), static_cast<Index>(c));
  for (Index i = 0; i < dose_w.size(); ++i) dose_w.data()[i] = rng.normal() / std::sqrt(static_cast<double>(c));

  d.t.resize(n);
  d.e.resize(n);
  d.y.resize(n);
  d.y_full = OutcomeTensor(n, k, levels);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Index>(i);
    const Vector zi = z.row(row).transpose();
    const Vector logits = meta.kappa * treat_scores.row(row).transpose();
    d.t[i] = static_cast<int>(rng.categorical(softmax_weights(logits)));
    if (meta.confound_dosage && levels > 1) {
      const Vector dl = meta.kappa * (dose_w * zi);
      d.e[i] = static_cast<int>(rng.categorical(softmax_weights(dl)));
    } else {
      d.e[i] = static_cast<int>(rng.below(levels));
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double b = outcome.base(j, zi);
      for (std::size_t lvl = 0; lvl < levels; ++lvl) {
        (*d.y_full)(i, j, lvl) = b * outcome.dose(j, meta.dosage_grid[lvl]) + meta.sigma * rng.normal();
      }
    }
    d.y[i] = (*d.y_full)(i, static_cast<std::size_t>(d.t[i]), static_cast<std::size_t>(d.e[i]));
  }
}

}  // namespace detail

// Gaussian covariates; the first n_confounders columns drive both treatment
// and outcome, the rest are noise.
inline Dataset gen_syn(const DatasetMeta& meta) {
  if (meta.source != DataSource::syn) throw ConfigError("gen_syn needs source = syn");
  meta.validate();
  Rng rng = Rng::stream(meta.seed, Stream::data);
  Dataset d;
  d.meta = meta;
  const auto n = static_cast<Index>(meta.n);
  const auto p = static_cast<Index>(meta.p);
  const auto c = static_cast<Index>(meta.n_confounders);
  const auto k = static_cast<Index>(meta.k);

  d.x.resize(n, p);
  for (Index i = 0; i < d.x.size(); ++i) d.x.data()[i] = rng.normal();

  Matrix assign_w(k, c);
  for (Index i = 0; i < assign_w.size(); ++i) assign_w.data()[i] = rng.normal() / std::sqrt(static_cast<double>(c));
  const Matrix z = d.x.leftCols(c);
  const Matrix scores = z * assign_w.transpose();
  detail::assign_and_simulate(d, z, scores, rng);
  return d;
}

// Bag-of-words counts from a topic mixture: n_confounders topics over a
// vocabulary of P words. Treatments prefer documents close to their topic
// centroid; outcomes depend on the centred topic proportions.
inline Dataset gen_news_like(const DatasetMeta& meta) {
  if (meta.source != DataSource::news_like) throw ConfigError("gen_news_like needs source = news-like");
  meta.validate();
  Rng rng = Rng::stream(meta.seed, Stream::data);
  Dataset d;
  d.meta = meta;
  const std::size_t n = meta.n;
  const std::size_t p = meta.p;
  const std::size_t topics = meta.n_confounders;
  const std::size_t k = meta.k;

  // Cumulative topic-word distributions for O(log P) word draws.
  std::vector<std::vector<double>> word_cdf(topics);
  for (auto& cdf : word_cdf) {
    cdf = rng.dirichlet(p, 0.05);
    for (std::size_t w = 1; w < p; ++w) cdf[w] += cdf[w - 1];
  }
  Matrix centroids(static_cast<Index>(k), static_cast<Index>(topics));
  for (std::size_t j = 0; j < k; ++j) {
    const auto mu = rng.dirichlet(topics, 0.3);
    for (std::size_t q = 0; q < topics; ++q) centroids(static_cast<Index>(j), static_cast<Index>(q)) = mu[q];
  }

  const double mean_len = std::max(1.0, (1.0 - meta.sparsity) * static_cast<double>(p));
  d.x = Matrix::Zero(static_cast<Index>(n), static_cast<Index>(p));
  Matrix mix(static_cast<Index>(n), static_cast<Index>(topics));
  for (std::size_t i = 0; i < n; ++i) {
    const auto theta = rng.dirichlet(topics, 0.3);
    for (std::size_t q = 0; q < topics; ++q) mix(static_cast<Index>(i), static_cast<Index>(q)) = theta[q];
    const auto len = 1 + rng.poisson(mean_len);
    for (std::uint64_t w = 0; w < len; ++w) {
      const std::size_t topic = rng.categorical(theta);
      const auto& cdf = word_cdf[topic];
      const double target = rng.uniform() * cdf.back();
      auto it = std::upper_bound(cdf.begin(), cdf.end(), target);
      const auto word = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), p - 1);
      d.x(static_cast<Index>(i), static_cast<Index>(word)) += 1.0;
    }
  }

  // Cosine similarity to the treatment centroids, scaled to O(kappa) logits.
  Matrix scores(static_cast<Index>(n), static_cast<Index>(k));
  for (Index i = 0; i < scores.rows(); ++i) {
    const double mn = mix.row(i).norm();
    for (Index j = 0; j < scores.cols(); ++j) {
      scores(i, j) = 4.0 * mix.row(i).dot(centroids.row(j)) / (mn * centroids.row(j).norm());
    }
  }
  const double centre = 1.0 / static_cast<double>(topics);
  const Matrix z = ((mix.array() - centre) * static_cast<double>(topics)).matrix();
  detail::assign_and_simulate(d, z, scores, rng);
  return d;
}

inline Dataset generate(const DatasetMeta& meta) {
  switch (meta.source) {
    case DataSource::syn: return gen_syn(meta);
    case DataSource::news_like: return gen_news_like(meta);
    case DataSource::external: break;
  }
  throw ConfigError("external datasets are loaded, not generated");
}

}  // namespace hici
