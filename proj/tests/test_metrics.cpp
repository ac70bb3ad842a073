// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hici/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace hici {
namespace {

using testing::from_matrix;
using testing::oracle_cf_rmse;
using testing::oracle_mape;
using testing::oracle_mape_dos;
using testing::oracle_mise;
using testing::oracle_pehe;
using testing::random_grid;
using testing::random_matrix;
using testing::random_tensor;

// ---------------------------------------------------------------------------
// PEHE.

TEST(Pehe, HandExample) {
  Matrix y(1, 2);
  y << 1, 3;
  Matrix yp(1, 2);
  yp << 1, 2;
  EXPECT_DOUBLE_EQ(pehe(y, yp), 1.0);
}

TEST(Pehe, ZeroAtTruthAndConstantShiftInvariant) {
  Rng rng(1);
  const Matrix y = random_matrix(6, 4, rng);
  EXPECT_EQ(pehe(y, y), 0.0);
  Matrix yp = random_matrix(6, 4, rng);
  const double base = pehe(y, yp);
  for (Index i = 0; i < 6; ++i) yp.row(i).array() += rng.normal(0.0, 5.0);
  EXPECT_NEAR(pehe(y, yp), base, 1e-12);
}

TEST(Pehe, NeedsTwoTreatments) {
  EXPECT_THROW(pehe(Matrix::Zero(3, 1), Matrix::Zero(3, 1)), DomainError);
  EXPECT_THROW(pehe(Matrix::Zero(3, 2), Matrix::Zero(3, 3)), ShapeError);
}

TEST(Pehe, MatchesOracle) {
  Rng rng(2);
  const Matrix y = random_matrix(6, 4, rng);
  const Matrix yp = random_matrix(6, 4, rng);
  EXPECT_NEAR(pehe(y, yp), oracle_pehe(y, yp), 1e-12);
}

// ---------------------------------------------------------------------------
// MAPE of the ATE.

TEST(MapeAte, HandExample) {
  Matrix y(1, 2);
  y << 2, 1;
  Matrix yp(1, 2);
  yp << 2, 1.5;
  const AteError a = mape_ate(y, yp);
  ASSERT_TRUE(a.per_k[0]);
  EXPECT_DOUBLE_EQ(*a.per_k[0], 0.5);
  EXPECT_DOUBLE_EQ(*a.value, 0.5);  // k = 2 has ATE -1 vs -0.5, also 0.5
}

TEST(MapeAte, ZeroAtTruthAndScaleInvariant) {
  Rng rng(3);
  const Matrix y = random_matrix(8, 3, rng);
  const Matrix yp = random_matrix(8, 3, rng);
  EXPECT_EQ(*mape_ate(y, y).value, 0.0);
  EXPECT_NEAR(*mape_ate(-3.5 * y, -3.5 * yp).value, *mape_ate(y, yp).value, 1e-12);
}

TEST(MapeAte, DegenerateAteIsUnavailable) {
  const Matrix y = Matrix::Constant(4, 3, 2.0);
  Matrix yp = y;
  yp(0, 0) = 5.0;
  const AteError a = mape_ate(y, yp);
  EXPECT_FALSE(a.value.has_value());
  for (const auto& v : a.per_k) EXPECT_FALSE(v.has_value());

  Dataset d;
  d.meta.k = 3;
  d.meta.e_levels = 1;
  d.t = {0, 1, 2, 0};
  d.e = {0, 0, 0, 0};
  d.y_full = from_matrix(y);
  const MetricsReport r = evaluate_metrics(d, from_matrix(yp));
  EXPECT_FALSE(r.mape_ate.has_value());
  EXPECT_TRUE(std::any_of(r.unavailable.begin(), r.unavailable.end(), [](const auto& u) {
    return u.metric == "mape_ate" && u.reason == "degenerate ATE";
  }));
}

// ---------------------------------------------------------------------------
// MISE.

TEST(Mise, ConstantErrorOnUnitGrid) {
  Rng rng(4);
  const OutcomeTensor y = random_tensor(3, 2, 5, rng);
  OutcomeTensor yp = y;
  for (double& v : yp.data()) v -= 0.37;
  const auto grid = uniform_dosage_grid(5);
  EXPECT_NEAR(mise(y, yp, grid), 0.37, 1e-12);
  EXPECT_EQ(mise(y, y, grid), 0.0);
}

TEST(Mise, NeedsTwoLevels) {
  Rng rng(5);
  const OutcomeTensor y = random_tensor(3, 2, 1, rng);
  EXPECT_THROW(mise(y, y, std::vector<double>{0.0}), DomainError);
}

TEST(Mise, MatchesOracle) {
  Rng rng(6);
  const OutcomeTensor y = random_tensor(3, 2, 5, rng);
  const OutcomeTensor yp = random_tensor(3, 2, 5, rng);
  const auto grid = random_grid(5, rng);
  EXPECT_NEAR(mise(y, yp, grid), oracle_mise(y, yp, grid), 1e-12);
}

// ---------------------------------------------------------------------------
// Dosage MAPE of the ATE.

TEST(MapeAteDos, SingleLevelEqualsMapeAteExactly) {
  Rng rng(7);
  const Matrix y = random_matrix(5, 4, rng);
  const Matrix yp = random_matrix(5, 4, rng);
  EXPECT_EQ(*mape_ate_dos(from_matrix(y), from_matrix(yp)).value, *mape_ate(y, yp).value);
}

TEST(MapeAteDos, ZeroAtTruthAndMatchesOracle) {
  Rng rng(8);
  const OutcomeTensor y = random_tensor(4, 3, 2, rng);
  const OutcomeTensor yp = random_tensor(4, 3, 2, rng);
  EXPECT_EQ(*mape_ate_dos(y, y).value, 0.0);
  EXPECT_NEAR(*mape_ate_dos(y, yp).value, oracle_mape_dos(y, yp), 1e-12);
}

// ---------------------------------------------------------------------------
// Counterfactual RMSE.

TEST(CfRmse, FactualCellsAreIgnored) {
  Rng rng(9);
  const OutcomeTensor y = random_tensor(5, 3, 2, rng);
  OutcomeTensor yp = y;
  const std::vector<int> t{0, 1, 2, 1, 0};
  const std::vector<int> e{1, 0, 1, 1, 0};
  for (std::size_t i = 0; i < 5; ++i) {
    yp(i, static_cast<std::size_t>(t[i]), static_cast<std::size_t>(e[i])) += 100.0;
  }
  EXPECT_EQ(cf_rmse(y, yp, t, e), 0.0);
}

TEST(CfRmse, SingleCellHandExample) {
  OutcomeTensor y(1, 2, 1);
  y(0, 0, 0) = 1.0;
  y(0, 1, 0) = 4.0;
  OutcomeTensor yp(1, 2, 1);
  yp(0, 0, 0) = 1.0;
  yp(0, 1, 0) = 1.0;
  EXPECT_DOUBLE_EQ(cf_rmse(y, yp, std::vector<int>{0}, std::vector<int>{0}), 3.0);
}

TEST(CfRmse, NoCounterfactualCellsIsUnavailable) {
  OutcomeTensor y(3, 1, 1, 1.0);
  EXPECT_THROW(cf_rmse(y, y, std::vector<int>(3, 0), std::vector<int>(3, 0)), DomainError);
  Dataset d;
  d.meta.k = 1;
  d.meta.e_levels = 1;
  d.t = {0, 0, 0};
  d.e = {0, 0, 0};
  d.y_full = y;
  const MetricsReport r = evaluate_metrics(d, y);
  EXPECT_FALSE(r.cf_rmse.has_value());
  EXPECT_FALSE(r.pehe_sqrt.has_value());
}

// ---------------------------------------------------------------------------
// Properties over random instances.

TEST(MetricProperties, EveryMetricMatchesItsOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::size_t k = 2 + rng.below(4);
    const std::size_t levels = 1 + rng.below(4);
    const OutcomeTensor y = random_tensor(n, k, levels, rng);
    const OutcomeTensor yp = random_tensor(n, k, levels, rng);
    std::vector<int> t(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<int>(rng.below(k));
      e[i] = static_cast<int>(rng.below(levels));
    }
    const Matrix y0 = y.level(0);
    const Matrix yp0 = yp.level(0);
    EXPECT_NEAR(pehe(y0, yp0), oracle_pehe(y0, yp0), 1e-12);
    EXPECT_NEAR(*mape_ate(y0, yp0).value, oracle_mape(y0, yp0), 1e-12 * std::max(1.0, oracle_mape(y0, yp0)));
    const double dos = oracle_mape_dos(y, yp);
    EXPECT_NEAR(*mape_ate_dos(y, yp).value, dos, 1e-12 * std::max(1.0, dos));
    EXPECT_NEAR(cf_rmse(y, yp, t, e), oracle_cf_rmse(y, yp, t, e), 1e-12);
    if (levels >= 2) {
      const auto grid = random_grid(levels, rng);
      EXPECT_NEAR(mise(y, yp, grid), oracle_mise(y, yp, grid), 1e-12);
    }
  }
}

TEST(MetricProperties, ZeroAtTruthEverywhere) {
  Rng rng(11);
  for (std::size_t levels : {1u, 3u}) {
    Dataset d;
    d.meta.k = 4;
    d.meta.e_levels = levels;
    d.meta.dosage_grid = uniform_dosage_grid(levels);
    d.y_full = random_tensor(6, 4, levels, rng);
    for (std::size_t i = 0; i < 6; ++i) {
      d.t.push_back(static_cast<int>(i % 4));
      d.e.push_back(static_cast<int>(i % levels));
    }
    const MetricsReport r = evaluate_metrics(d, *d.y_full);
    for (const auto* v : {&r.pehe_sqrt, &r.mape_ate, &r.mise_sqrt, &r.mape_ate_dos, &r.cf_rmse}) {
      if (v->has_value()) {
        EXPECT_EQ(**v, 0.0);
      }
    }
    EXPECT_TRUE(r.cf_rmse.has_value());
    EXPECT_EQ(levels == 1, r.pehe_sqrt.has_value());
    EXPECT_EQ(levels > 1, r.mise_sqrt.has_value());
  }
}

TEST(MetricProperties, MonotoneDegradationWithNoiseScale) {
  Rng rng(12);
  const OutcomeTensor y = random_tensor(50, 4, 1, rng);
  std::vector<int> t(50);
  for (std::size_t i = 0; i < 50; ++i) t[i] = static_cast<int>(i % 4);
  const std::vector<int> e(50, 0);
  double prev_pehe = -1.0;
  double prev_cf = -1.0;
  for (double scale : {0.0, 0.05, 0.2, 0.5, 1.0, 3.0}) {
    std::vector<double> pehes;
    std::vector<double> cfs;
    for (int trial = 0; trial < 20; ++trial) {
      OutcomeTensor yp = y;
      for (double& v : yp.data()) v += scale * rng.normal();
      pehes.push_back(pehe(y.level(0), yp.level(0)));
      cfs.push_back(cf_rmse(y, yp, t, e));
    }
    std::nth_element(pehes.begin(), pehes.begin() + 10, pehes.end());
    std::nth_element(cfs.begin(), cfs.begin() + 10, cfs.end());
    EXPECT_GE(pehes[10], prev_pehe) << "scale " << scale;
    EXPECT_GE(cfs[10], prev_cf) << "scale " << scale;
    prev_pehe = pehes[10];
    prev_cf = cfs[10];
  }
}

TEST(MetricsReport, MissingCounterfactualsMarkEverythingUnavailable) {
  Dataset d;
  d.meta.k = 3;
  const MetricsReport r = evaluate_metrics(d, OutcomeTensor(0, 3, 1));
  EXPECT_EQ(r.unavailable.size(), 5u);
  const auto j = r.to_json();
  EXPECT_TRUE(j.at("pehe_sqrt").is_null());
  EXPECT_EQ(j.at("unavailable")[0].at("reason"), "counterfactual outcomes absent");
}

TEST(MetricsReport, JsonRoundTrip) {
  MetricsReport r;
  r.pehe_sqrt = 1.25;
  r.mape_ate = 0.5;
  r.mape_ate_per_k = {0.25, std::nullopt};
  r.cf_rmse = 2.0;
  r.mark("mise_sqrt", "defined for E > 1");
  EXPECT_EQ(MetricsReport::from_json(r.to_json()).to_json(), r.to_json());
}

}  // namespace
}  // namespace hici
