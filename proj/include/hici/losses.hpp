// SPDX-License-Identifier: Apache-2.0
#pragma once

// Loss terms of the decorrelating objective and the outcome regression, each
// with a value-only form and a form returning gradients w.r.t. its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hici/error.hpp"
#include "hici/ndnet.hpp"

namespace hici {

struct LossWeights {
  double beta = 1.0;    // autoencoder reconstruction
  double gamma = 1.0;   // mixed-norm mean-difference regularizer
  double lambda = 1.0;  // outcome RMSE

  void validate() const {
    for (double w : {beta, gamma, lambda}) {
      if (!std::isfinite(w) || w < 0.0) {
        throw ConfigError("loss weights must be finite and non-negative");
      }
    }
  }
};

// One logistic weight vector per treatment, stored as the rows of theta (K x L).
struct PropensityModel {
  Matrix theta;

  Index treatments() const { return theta.rows(); }
  Index rep_dim() const { return theta.cols(); }
};

namespace detail {

inline void check_treatments(std::span<const int> t, Index rows, Index k) {
  if (static_cast<Index>(t.size()) != rows) {
    throw ShapeError("treatment vector has " + std::to_string(t.size()) + " entries for " +
                     std::to_string(rows) + " rows");
  }
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (t[n] < 0 || t[n] >= k) {
      throw DomainError("treatment index " + std::to_string(t[n]) + " at row " +
                        std::to_string(n) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}

inline Matrix logits(const PropensityModel& model, const Matrix& rep) {
  if (rep.cols() != model.rep_dim()) {
    throw ShapeError("representation has " + std::to_string(rep.cols()) +
                     " columns, propensity model expects " + std::to_string(model.rep_dim()));
  }
  return rep * model.theta.transpose();
}

inline Vector row_logsumexp(const Matrix& s) {
  Vector out(s.rows());
  for (Index n = 0; n < s.rows(); ++n) {
    const double m = s.row(n).maxCoeff();
    out(n) = m + std::log((s.row(n).array() - m).exp().sum());
  }
  return out;
}

inline Matrix row_softmax(const Matrix& s) {
  Matrix p(s.rows(), s.cols());
  for (Index n = 0; n < s.rows(); ++n) {
    const double m = s.row(n).maxCoeff();
    p.row(n) = (s.row(n).array() - m).exp().matrix();
    p.row(n) /= p.row(n).sum();
  }
  return p;
}

inline double marginal_sum(std::span<const double> marginal) {
  double s = 0.0;
  for (double v : marginal) s += v;
  return s;
}

}  // namespace detail

// Row n is softmax_k(theta_k . rep_n).
inline Matrix propensity_probs(const PropensityModel& model, const Matrix& rep) {
  return detail::row_softmax(detail::logits(model, rep));
}

inline std::vector<int> predict_treatment(const PropensityModel& model, const Matrix& rep) {
  const Matrix s = detail::logits(model, rep);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Index n = 0; n < s.rows(); ++n) {
    Index best = 0;
    s.row(n).maxCoeff(&best);
    out[static_cast<std::size_t>(n)] = static_cast<int>(best);
  }
  return out;
}

inline double classification_accuracy(const PropensityModel& model, const Matrix& rep,
                                      std::span<const int> t) {
  const auto pred = predict_treatment(model, rep);
  if (pred.size() != t.size()) throw ShapeError("accuracy: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t n = 0; n < t.size(); ++n) hits += pred[n] == t[n] ? 1 : 0;
  return t.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(t.size());
}

struct PropensityFitOptions {
  double grad_tol = 1e-6;
  std::size_t max_iter = 500;
};

// Mean multinomial log-likelihood minus (reg/2)|theta|^2, no intercept.
inline double propensity_objective(const PropensityModel& model, const Matrix& rep,
                                   std::span<const int> t, double reg) {
  const Matrix s = detail::logits(model, rep);
  const Vector lse = detail::row_logsumexp(s);
  double ll = 0.0;
  for (Index n = 0; n < s.rows(); ++n) ll += s(n, t[static_cast<std::size_t>(n)]) - lse(n);
  return ll / static_cast<double>(s.rows()) - 0.5 * reg * model.theta.squaredNorm();
}

// Maximizes propensity_objective by Nesterov-accelerated gradient ascent from
// theta = 0, with a 1/Lipschitz step and gradient-based momentum restarts.
// Stops when the gradient norm drops below opts.grad_tol or after
// opts.max_iter iterations.
inline PropensityModel fit_propensity(const Matrix& rep, std::span<const int> t, Index k,
                                      double reg, PropensityFitOptions opts = {}) {
  if (k < 2) throw DomainError("fit_propensity: need at least two treatments");
  if (!(reg >= 0.0) || !std::isfinite(reg)) throw ConfigError("regularization must be >= 0");
  if (rep.rows() == 0) throw DomainError("fit_propensity: empty representation");
  detail::check_treatments(t, rep.rows(), k);
  std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
  for (int v : t) ++counts[static_cast<std::size_t>(v)];
  for (Index j = 0; j < k; ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) {
      throw DomainError("fit_propensity: treatment " + std::to_string(j + 1) + " has no samples");
    }
  }

  const auto n = static_cast<double>(rep.rows());
  const Index dim = rep.cols();
  Matrix onehot = Matrix::Zero(rep.rows(), k);
  for (Index i = 0; i < rep.rows(); ++i) onehot(i, t[static_cast<std::size_t>(i)]) = 1.0;

  // Power iteration for the largest eigenvalue of rep^T rep / N; the softmax
  // Hessian is bounded by I/2.
  const Matrix gram = rep.transpose() * rep / n;
  Vector v = Vector::Ones(dim) / std::sqrt(static_cast<double>(dim));
  double top = 0.0;
  for (int it = 0; it < 100; ++it) {
    Vector w = gram * v;
    const double norm = w.norm();
    if (norm == 0.0) break;
    top = norm;
    v = w / norm;
  }
  const double lipschitz = 0.5 * top * 1.05 + reg;
  const double step = lipschitz > 0.0 ? 1.0 / lipschitz : 1.0;

  auto gradient = [&](const Matrix& theta) {
    const Matrix p = detail::row_softmax(rep * theta.transpose());
    // Gradient of the negated objective.
    Matrix g = (p - onehot).transpose() * rep / n;
    g += reg * theta;
    return g;
  };

  PropensityModel model;
  model.theta = Matrix::Zero(k, dim);
  Matrix look = model.theta;
  double momentum = 1.0;
  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    const Matrix g = gradient(look);
    if (g.norm() < opts.grad_tol) {
      model.theta = look;
      break;
    }
    Matrix next = look - step * g;
    // Restart the momentum when the step points against it.
    if ((g.array() * (next - model.theta).array()).sum() > 0.0) {
      momentum = 1.0;
      look = next;
    } else {
      const double next_momentum = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
      look = next + ((momentum - 1.0) / next_momentum) * (next - model.theta);
      momentum = next_momentum;
    }
    model.theta = std::move(next);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Cross-entropy between the empirical treatment marginal and the propensity
// model: -(1/N) sum_n sum_k p_k [theta_k . rep_n - logsumexp_l(theta_l . rep_n)].

struct CeGrad {
  double value = 0.0;
  Matrix rep;    // N x L
  Matrix theta;  // K x L
};

inline double loss_ce(const Matrix& rep, const PropensityModel& model,
                      std::span<const double> marginal) {
  if (static_cast<Index>(marginal.size()) != model.treatments()) {
    throw ShapeError("marginal has " + std::to_string(marginal.size()) + " entries for " +
                     std::to_string(model.treatments()) + " treatments");
  }
  if (std::abs(detail::marginal_sum(marginal) - 1.0) > 1e-9) {
    throw DomainError("treatment marginal must sum to 1");
  }
  if (rep.rows() == 0) return 0.0;
  const Matrix s = detail::logits(model, rep);
  const Vector lse = detail::row_logsumexp(s);
  double total = 0.0;
  for (Index n = 0; n < s.rows(); ++n) {
    double inner = 0.0;
    for (Index k = 0; k < s.cols(); ++k) inner += marginal[static_cast<std::size_t>(k)] * (s(n, k) - lse(n));
    total += inner;
  }
  return -total / static_cast<double>(s.rows());
}

inline CeGrad loss_ce_with_grad(const Matrix& rep, const PropensityModel& model,
                                std::span<const double> marginal) {
  CeGrad out;
  out.value = loss_ce(rep, model, marginal);
  out.rep = Matrix::Zero(rep.rows(), rep.cols());
  out.theta = Matrix::Zero(model.theta.rows(), model.theta.cols());
  if (rep.rows() == 0) return out;
  const double mass = detail::marginal_sum(marginal);
  Matrix g = detail::row_softmax(detail::logits(model, rep)) * mass;
  for (Index k = 0; k < g.cols(); ++k) g.col(k).array() -= marginal[static_cast<std::size_t>(k)];
  g /= static_cast<double>(rep.rows());
  out.rep = g * model.theta;
  out.theta = g.transpose() * rep;
  return out;
}

// ---------------------------------------------------------------------------
// Autoencoder reconstruction: (1/(PN)) sum (x - x_hat)^2.

struct AeGrad {
  double value = 0.0;
  Matrix x_hat;
};

inline double loss_ae(const Matrix& x, const Matrix& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols()) {
    throw ShapeError("loss_ae: " + shape_str(x) + " vs " + shape_str(x_hat));
  }
  if (x.size() == 0) return 0.0;
  return (x - x_hat).squaredNorm() / static_cast<double>(x.size());
}

inline AeGrad loss_ae_with_grad(const Matrix& x, const Matrix& x_hat) {
  AeGrad out;
  out.value = loss_ae(x, x_hat);
  out.x_hat = x.size() == 0 ? Matrix(x_hat.rows(), x_hat.cols())
                            : Matrix(2.0 * (x_hat - x) / static_cast<double>(x.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Scaled pairwise differences of per-treatment mean representations.

class MeanDiffMatrix {
 public:
  MeanDiffMatrix(Index rep_dim, Index treatments)
      : k_(treatments), columns_(Matrix::Zero(rep_dim, treatments * (treatments - 1))) {}

  Index treatments() const { return k_; }
  Index rep_dim() const { return columns_.rows(); }
  Index column_count() const { return columns_.cols(); }

  // Column index of the ordered pair (i, j), i != j, zero-based.
  Index pair_index(Index i, Index j) const { return i * (k_ - 1) + (j < i ? j : j - 1); }

  auto column(Index i, Index j) const { return columns_.col(pair_index(i, j)); }
  auto column(Index i, Index j) { return columns_.col(pair_index(i, j)); }

  const Matrix& columns() const { return columns_; }

  // Treatments with no samples in the batch; their pairs are zero columns.
  std::vector<int> absent;

 private:
  Index k_;
  Matrix columns_;
};

namespace detail {

struct GroupMeans {
  Matrix means;                     // K x L
  std::vector<std::size_t> counts;  // per treatment
};

inline GroupMeans group_means(const Matrix& rep, std::span<const int> t, Index k) {
  check_treatments(t, rep.rows(), k);
  GroupMeans g;
  g.means = Matrix::Zero(k, rep.cols());
  g.counts.assign(static_cast<std::size_t>(k), 0);
  for (Index n = 0; n < rep.rows(); ++n) {
    const auto j = t[static_cast<std::size_t>(n)];
    g.means.row(j) += rep.row(n);
    ++g.counts[static_cast<std::size_t>(j)];
  }
  for (Index j = 0; j < k; ++j) {
    if (g.counts[static_cast<std::size_t>(j)] > 0) {
      g.means.row(j) /= static_cast<double>(g.counts[static_cast<std::size_t>(j)]);
    }
  }
  return g;
}

inline double pair_scale(Index rep_dim, Index k) {
  return 1.0 / (static_cast<double>(rep_dim) * static_cast<double>(k) * static_cast<double>(k - 1));
}

}  // namespace detail

// column(i, j) = (mu_i - mu_j) / (L K (K - 1)).
inline MeanDiffMatrix mean_diff_matrix(const Matrix& rep, std::span<const int> t, Index k) {
  if (k < 2) throw DomainError("mean_diff_matrix: need at least two treatments");
  const auto g = detail::group_means(rep, t, k);
  MeanDiffMatrix m(rep.cols(), k);
  for (Index j = 0; j < k; ++j) {
    if (g.counts[static_cast<std::size_t>(j)] == 0) m.absent.push_back(static_cast<int>(j));
  }
  const double scale = detail::pair_scale(rep.cols(), k);
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < k; ++j) {
      if (i == j) continue;
      if (g.counts[static_cast<std::size_t>(i)] == 0 || g.counts[static_cast<std::size_t>(j)] == 0) {
        continue;
      }
      m.column(i, j) = scale * (g.means.row(i) - g.means.row(j)).transpose();
    }
  }
  return m;
}

// Sum of the Euclidean norms of the K(K-1) pair columns.
inline double loss_21(const MeanDiffMatrix& m) {
  double total = 0.0;
  for (Index c = 0; c < m.column_count(); ++c) total += m.columns().col(c).norm();
  return total;
}

struct L21Grad {
  double value = 0.0;
  Matrix rep;
  std::vector<int> absent;
};

// Value and gradient of loss_21(mean_diff_matrix(rep, t, k)) w.r.t. rep. Zero
// columns contribute a zero subgradient.
inline L21Grad loss_21_with_grad(const Matrix& rep, std::span<const int> t, Index k) {
  const MeanDiffMatrix m = mean_diff_matrix(rep, t, k);
  L21Grad out;
  out.value = loss_21(m);
  out.absent = m.absent;
  out.rep = Matrix::Zero(rep.rows(), rep.cols());
  const double scale = detail::pair_scale(rep.cols(), k);
  // d/d mu_i = scale * sum_{j != i} [u(i,j) - u(j,i)] = 2 scale sum_j u(i,j).
  Matrix mean_grad = Matrix::Zero(k, rep.cols());
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < k; ++j) {
      if (i == j) continue;
      const auto col = m.column(i, j);
      const double norm = col.norm();
      if (norm == 0.0) continue;
      mean_grad.row(i) += 2.0 * scale * col.transpose() / norm;
    }
  }
  std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
  for (int v : t) ++counts[static_cast<std::size_t>(v)];
  for (Index n = 0; n < rep.rows(); ++n) {
    const auto j = t[static_cast<std::size_t>(n)];
    out.rep.row(n) = mean_grad.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outcome regression.

struct RmseGrad {
  double value = 0.0;
  std::vector<double> y_hat;
};

inline double loss_rmse(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw ShapeError("loss_rmse: " + std::to_string(y.size()) + " targets vs " +
                     std::to_string(y_hat.size()) + " predictions");
  }
  if (y.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t n = 0; n < y.size(); ++n) {
    const double d = y[n] - y_hat[n];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(y.size()));
}

inline RmseGrad loss_rmse_with_grad(std::span<const double> y, std::span<const double> y_hat) {
  RmseGrad out;
  out.value = loss_rmse(y, y_hat);
  out.y_hat.assign(y.size(), 0.0);
  if (out.value == 0.0) return out;
  const double denom = static_cast<double>(y.size()) * out.value;
  for (std::size_t n = 0; n < y.size(); ++n) out.y_hat[n] = (y_hat[n] - y[n]) / denom;
  return out;
}

// Dosage-labelled outcomes: an N x E table where only observed cells count.
struct DosageOutcomes {
  Matrix values;                      // N x E
  std::vector<std::uint8_t> observed;  // row-major N x E

  bool is_observed(Index n, Index e) const {
    return observed[static_cast<std::size_t>(n * values.cols() + e)] != 0;
  }
};

// Places factual outcome y[n] at column e[n].
inline DosageOutcomes factual_dosage_outcomes(std::span<const double> y, std::span<const int> e,
                                              Index levels) {
  if (y.size() != e.size()) throw ShapeError("dosage outcomes: length mismatch");
  if (levels < 1) throw DomainError("dosage outcomes: need E >= 1");
  DosageOutcomes out;
  const auto n = static_cast<Index>(y.size());
  out.values = Matrix::Zero(n, levels);
  out.observed.assign(static_cast<std::size_t>(n * levels), 0);
  for (Index i = 0; i < n; ++i) {
    const int lvl = e[static_cast<std::size_t>(i)];
    if (lvl < 0 || lvl >= levels) throw DomainError("dosage level out of range");
    out.values(i, lvl) = y[static_cast<std::size_t>(i)];
    out.observed[static_cast<std::size_t>(i * levels + lvl)] = 1;
  }
  return out;
}

struct RmseDosageGrad {
  double value = 0.0;
  Matrix y_hat;
};

// sqrt((1/N) sum_n sum_e observed(n,e) (y_ne - y_hat_ne)^2).
inline double loss_rmse_dosage(const DosageOutcomes& y, const Matrix& y_hat) {
  if (y.values.rows() != y_hat.rows() || y.values.cols() != y_hat.cols()) {
    throw ShapeError("loss_rmse_dosage: " + shape_str(y.values) + " vs " + shape_str(y_hat));
  }
  if (y.values.cols() < 1) throw DomainError("loss_rmse_dosage: need E >= 1");
  if (y.values.rows() == 0) return 0.0;
  double acc = 0.0;
  for (Index n = 0; n < y.values.rows(); ++n) {
    for (Index e = 0; e < y.values.cols(); ++e) {
      if (!y.is_observed(n, e)) continue;
      const double d = y.values(n, e) - y_hat(n, e);
      acc += d * d;
    }
  }
  return std::sqrt(acc / static_cast<double>(y.values.rows()));
}

inline RmseDosageGrad loss_rmse_dosage_with_grad(const DosageOutcomes& y, const Matrix& y_hat) {
  RmseDosageGrad out;
  out.value = loss_rmse_dosage(y, y_hat);
  out.y_hat = Matrix::Zero(y_hat.rows(), y_hat.cols());
  if (out.value == 0.0) return out;
  const double denom = static_cast<double>(y.values.rows()) * out.value;
  for (Index n = 0; n < y.values.rows(); ++n) {
    for (Index e = 0; e < y.values.cols(); ++e) {
      if (y.is_observed(n, e)) out.y_hat(n, e) = (y_hat(n, e) - y.values(n, e)) / denom;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composition.

struct DecorrLoss {
  double ce = 0.0;
  double ae = 0.0;
  double l21 = 0.0;
  double value = 0.0;
};

// L_D = L_ce + beta L_ae + gamma L_21.
inline DecorrLoss loss_decorr(double ce, double ae, double l21, const LossWeights& w) {
  return {ce, ae, l21, ce + w.beta * ae + w.gamma * l21};
}

struct TotalLoss {
  DecorrLoss decorr;
  double rmse = 0.0;
  double value = 0.0;
};

// L = L_D + lambda L_RMSE.
inline TotalLoss loss_total(const DecorrLoss& d, double rmse, const LossWeights& w) {
  return {d, rmse, d.value + w.lambda * rmse};
}

}  // namespace hici
