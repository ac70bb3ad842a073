// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "hici/checkpoint.hpp"
#include "hici/datagen.hpp"
#include "hici/model.hpp"
#include "hici/trainer.hpp"
#include "test_util.hpp"

namespace hici {
namespace {

using testing::max_fd_error;
using testing::random_matrix;
using testing::TempDir;

HyperConfig small_config() {
  HyperConfig c;
  c.batch_size = 16;
  c.total_epochs = 4;
  c.learning_rate = 0.01;
  c.encoder_layers = 1;
  c.encoder_width = 5;
  c.decoder_layers = 1;
  c.decoder_width = 5;
  c.outcome_layers = 1;
  c.outcome_width = 5;
  c.rep_dim = 3;
  c.embed_dim = 4;
  c.seed = 3;
  return c;
}

Dataset small_data(std::size_t n, std::size_t k, std::size_t e, std::uint64_t seed) {
  DatasetMeta m;
  m.n = n;
  m.p = 6;
  m.k = k;
  m.e_levels = e;
  m.dosage_grid = uniform_dosage_grid(e);
  m.n_confounders = 3;
  m.kappa = 1.0;
  m.seed = seed;
  return gen_syn(m);
}

// Gradient tensors in the same order as for_each_tensor visits parameters.
std::vector<std::span<const double>> grad_spans(const HiCiGrad& g) {
  std::vector<std::span<const double>> out;
  auto net = [&](const MlpGrad& mg) {
    for (const auto& l : mg.layers) {
      out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
  };
  net(g.encoder);
  net(g.decoder);
  out.emplace_back(g.theta.data(), static_cast<std::size_t>(g.theta.size()));
  for (const auto& t : g.treat_embed) out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  for (const auto& h : g.heads) net(h);
  return out;
}

double grad_norm(const MlpGrad& g) {
  double s = 0.0;
  for (const auto& l : g.layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return std::sqrt(s);
}

std::vector<double> flatten(const HiCiParams& w) {
  std::vector<double> out;
  for_each_tensor(w, [&](const std::string&, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); });
  return out;
}

// ---------------------------------------------------------------------------
// Prediction.

TEST(PredictOutcome, IdenticalInputsGiveIdenticalPredictions) {
  const HiCiParams w = init_hici(small_config(), 6, 3, 1);
  Rng rng(1);
  Matrix x = random_matrix(4, 6, rng);
  x.row(3) = x.row(1);
  const std::vector<int> t{0, 2, 1, 2};
  const std::vector<int> e(4, 0);
  const auto y = predict_outcome(w, x, t, e);
  EXPECT_EQ(y[1], y[3]);
}

TEST(PredictOutcome, LookupEqualsOneHotProduct) {
  HyperConfig c = small_config();
  const HiCiParams w = init_hici(c, 6, 5, 1);
  Rng rng(2);
  const Matrix x = random_matrix(10, 6, rng);
  std::vector<int> t(10);
  for (std::size_t i = 0; i < 10; ++i) t[i] = static_cast<int>(i % 5);
  const std::vector<int> e(10, 0);
  const auto y = predict_outcome(w, x, t, e);

  Matrix onehot = Matrix::Zero(10, 5);
  for (Index i = 0; i < 10; ++i) onehot(i, t[static_cast<std::size_t>(i)]) = 1.0;
  Matrix in(10, c.rep_dim + c.embed_dim);
  in << forward(w.encoder, x), onehot * w.treat_embed[0];
  const Matrix oracle = forward(w.heads[0], in);
  for (Index i = 0; i < 10; ++i) EXPECT_NEAR(y[static_cast<std::size_t>(i)], oracle(i, 0), 1e-12);
}

TEST(PredictOutcome, DosageLevelSelectsHead) {
  const HiCiParams w = init_hici(small_config(), 6, 3, 2);
  Rng rng(3);
  const Matrix x = random_matrix(1, 6, rng);
  const std::vector<int> t{1};
  const auto a = predict_outcome(w, x, t, std::vector<int>{0});
  const auto b = predict_outcome(w, x, t, std::vector<int>{1});
  EXPECT_NE(a[0], b[0]);
}

TEST(PredictOutcome, OutOfRangeAssignmentsThrow) {
  const HiCiParams w = init_hici(small_config(), 6, 3, 2);
  const Matrix x = Matrix::Zero(1, 6);
  EXPECT_THROW(predict_outcome(w, x, std::vector<int>{3}, std::vector<int>{0}), DomainError);
  EXPECT_THROW(predict_outcome(w, x, std::vector<int>{0}, std::vector<int>{2}), DomainError);
}

TEST(PredictAll, ShapeCountsEveryCell) {
  const HiCiParams w = init_hici(small_config(), 6, 3, 2);
  Rng rng(4);
  const OutcomeTensor y = predict_all_counterfactuals(w, random_matrix(5, 6, rng));
  EXPECT_EQ(y.samples(), 5u);
  EXPECT_EQ(y.treatments(), 3u);
  EXPECT_EQ(y.levels(), 2u);
  EXPECT_EQ(y.size(), 30u);
}

TEST(PredictAll, FactualSliceEqualsFactualPredictionExactly) {
  const HiCiParams w = init_hici(small_config(), 6, 4, 3);
  Rng rng(5);
  const Matrix x = random_matrix(40, 6, rng);
  std::vector<int> t(40);
  std::vector<int> e(40);
  for (std::size_t i = 0; i < 40; ++i) {
    t[i] = static_cast<int>(rng.below(4));
    e[i] = static_cast<int>(rng.below(3));
  }
  const auto y = predict_outcome(w, x, t, e);
  const OutcomeTensor all = predict_all_counterfactuals(w, x);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(all(i, static_cast<std::size_t>(t[i]), static_cast<std::size_t>(e[i])), y[i]);
  }
}

TEST(PredictAll, SingleTreatmentSingleLevelEqualsFactual) {
  const HiCiParams w = init_hici(small_config(), 6, 1, 1);
  Rng rng(6);
  const Matrix x = random_matrix(7, 6, rng);
  const std::vector<int> zeros(7, 0);
  const auto y = predict_outcome(w, x, zeros, zeros);
  const OutcomeTensor all = predict_all_counterfactuals(w, x);
  EXPECT_EQ(std::vector<double>(all.data().begin(), all.data().end()), y);
}

// ---------------------------------------------------------------------------
// Parameters and configuration.

TEST(InitHici, DeterministicAndShaped) {
  const HyperConfig c = small_config();
  const HiCiParams a = init_hici(c, 6, 4, 2);
  const HiCiParams b = init_hici(c, 6, 4, 2);
  EXPECT_EQ(flatten(a), flatten(b));
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.levels(), 2u);
  EXPECT_EQ(a.treatments(), 4);
  EXPECT_TRUE((a.propensity.theta.array() == 0.0).all());
  HyperConfig onn = c;
  onn.variant = Variant::onn;
  EXPECT_EQ(init_hici(onn, 6, 4, 2).heads[0].in_dim(), 6 + 4);
}

TEST(InitHici, RepresentationMustBeNarrowerThanCovariates) {
  HyperConfig c = small_config();
  c.rep_dim = 6;
  EXPECT_THROW(init_hici(c, 6, 3, 1), ConfigError);
}

TEST(Config, JsonRoundTripAndUnknownKey) {
  HyperConfig c = small_config();
  c.variant = Variant::l21_ae;
  c.weights = {0.1, 10.0, 1.0};
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_THROW(config_from_json(nlohmann::json{{"learning_rat", 0.1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"batch_size", -1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"variant", "bogus"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"beta", "high"}}), ConfigError);
}

TEST(Variant, ParseAndAssembly) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("dragonnet"), ConfigError);
  const LossWeights w{2.0, 3.0, 4.0};
  const auto onn = apply_variant(Variant::onn, w);
  EXPECT_TRUE(onn.head_on_raw);
  EXPECT_FALSE(onn.use_ce || onn.use_ae || onn.use_l21);
  const auto dtp = apply_variant(Variant::deeptreat_plus, w);
  EXPECT_EQ(dtp.w_l21, 0.0);
  EXPECT_EQ(dtp.w_ae, 2.0);
  const auto l21 = apply_variant(Variant::l21_ae, w);
  EXPECT_FALSE(l21.use_ce);
  EXPECT_EQ(l21.w_l21, 3.0);
}

// ---------------------------------------------------------------------------
// Losses and gradients.

struct Fixture {
  Dataset d;
  HiCiParams w;
  std::vector<double> marginal;
};

Fixture fixture(Variant v, std::size_t e_levels, Activation act = Activation::tanh) {
  HyperConfig c = small_config();
  c.variant = v;
  c.hidden_activation = act;
  c.weights = {0.7, 1.3, 0.9};
  Fixture f;
  f.d = small_data(16, 3, e_levels, 11);
  f.w = init_hici(c, 6, 3, e_levels);
  // Perturb every tensor so biases and theta are generic.
  Rng rng(12);
  for_each_tensor(f.w, [&](const std::string&, std::span<double> v) {
    for (double& x : v) x += 0.3 * rng.normal();
  });
  f.marginal = empirical_treatment_marginal(f.d);
  return f;
}

TEST(LossAndGrad, MatchesFiniteDifferencesForEveryVariant) {
  for (Variant v : kAllVariants) {
    for (std::size_t levels : {1u, 2u}) {
      Fixture f = fixture(v, levels);
      const LossAssembly a = apply_variant(v, {0.7, 1.3, 0.9});
      const Batch b = full_batch(f.d);
      const LossAndGrad lg = loss_and_grad(f.w, b, f.marginal, a);
      EXPECT_EQ(lg.loss.total, evaluate_loss(f.w, b, f.marginal, a).total);
      const auto grads = grad_spans(lg.grad);
      std::size_t idx = 0;
      auto loss = [&] { return evaluate_loss(f.w, b, f.marginal, a).total; };
      for_each_tensor(f.w, [&](const std::string& name, std::span<double> values) {
        EXPECT_LT(max_fd_error(values, grads[idx], loss), 1e-4) << to_string(v) << " E=" << levels << " " << name;
        ++idx;
      });
    }
  }
}

TEST(LossAndGrad, BreakdownComposesWithVariantWeights) {
  Fixture f = fixture(Variant::hici, 2);
  const LossAssembly a = apply_variant(Variant::hici, {0.7, 1.3, 0.9});
  const LossBreakdown l = evaluate_loss(f.w, full_batch(f.d), f.marginal, a);
  EXPECT_NEAR(l.total, l.ce + 0.7 * l.ae + 1.3 * l.l21 + 0.9 * l.rmse, 1e-12);
  EXPECT_NEAR(l.decorr, l.ce + 0.7 * l.ae + 1.3 * l.l21, 1e-12);
}

TEST(LossAndGrad, HiciWithoutMixedNormEqualsDeepTreatPlus) {
  Fixture f = fixture(Variant::hici, 1, Activation::relu);
  const LossWeights w{0.7, 0.0, 0.9};
  const Batch b = full_batch(f.d);
  const auto hici = loss_and_grad(f.w, b, f.marginal, apply_variant(Variant::hici, w));
  const auto dtp = loss_and_grad(f.w, b, f.marginal, apply_variant(Variant::deeptreat_plus, w));
  EXPECT_EQ(hici.loss.total, dtp.loss.total);
  EXPECT_EQ(hici.loss.decorr, dtp.loss.decorr);
  const auto gh = grad_spans(hici.grad);
  const auto gd = grad_spans(dtp.grad);
  for (std::size_t i = 0; i < gh.size(); ++i) {
    EXPECT_TRUE(std::equal(gh[i].begin(), gh[i].end(), gd[i].begin()));
  }
}

TEST(LossAndGrad, OnnLeavesDecoderAndEncoderUntouched) {
  Fixture f = fixture(Variant::onn, 1);
  const auto lg = loss_and_grad(f.w, full_batch(f.d), f.marginal, apply_variant(Variant::onn, {1, 1, 1}));
  EXPECT_EQ(grad_norm(lg.grad.decoder), 0.0);
  EXPECT_EQ(grad_norm(lg.grad.encoder), 0.0);
  EXPECT_GT(grad_norm(lg.grad.heads[0]), 0.0);
  EXPECT_EQ(lg.loss.ce, 0.0);
  EXPECT_EQ(lg.loss.ae, 0.0);
}

TEST(LossAndGrad, MixedNormVariantIgnoresPropensity) {
  Fixture f = fixture(Variant::l21_ae, 1);
  const LossAssembly a = apply_variant(Variant::l21_ae, {1, 1, 1});
  const Batch b = full_batch(f.d);
  const double before = evaluate_loss(f.w, b, f.marginal, a).total;
  f.w.propensity.theta.array() += 2.5;
  EXPECT_EQ(evaluate_loss(f.w, b, f.marginal, a).total, before);
  f.w.propensity.theta(0, 0) = -40.0;
  EXPECT_EQ(evaluate_loss(f.w, b, f.marginal, a).total, before);
}

TEST(LossAndGrad, EncoderReceivesGradientFromBothObjectives) {
  Fixture f = fixture(Variant::hici, 1, Activation::relu);
  const Batch b = full_batch(f.d);
  const LossAssembly decorr_only{true, true, true, false, 1.0, 1.0, 1.0, 0.0};
  const LossAssembly outcome_only{false, false, false, false, 0.0, 0.0, 0.0, 1.0};
  EXPECT_GT(grad_norm(loss_and_grad(f.w, b, f.marginal, decorr_only).grad.encoder), 0.0);
  EXPECT_GT(grad_norm(loss_and_grad(f.w, b, f.marginal, outcome_only).grad.encoder), 0.0);
}

TEST(L2Penalty, MatchesHalfSquaredWeightsOfUsedNets) {
  Fixture f = fixture(Variant::onn, 1);
  const LossAssembly onn = apply_variant(Variant::onn, {1, 1, 1});
  double expected = f.w.treat_embed[0].squaredNorm() + weight_sq_norm(f.w.heads[0]);
  EXPECT_NEAR(l2_penalty(f.w, onn, 0.2), 0.1 * expected, 1e-12);
  const LossAssembly full = apply_variant(Variant::hici, {1, 1, 1});
  f.w.head_on_raw = false;
  expected += weight_sq_norm(f.w.encoder) + weight_sq_norm(f.w.decoder);
  EXPECT_NEAR(l2_penalty(f.w, full, 0.2), 0.1 * expected, 1e-12);
}

// ---------------------------------------------------------------------------
// Training.

TEST(Train, OneEpochWithZeroPatience) {
  HyperConfig c = small_config();
  c.patience = 0;
  c.total_epochs = 1;
  const Dataset d = small_data(80, 3, 1, 2);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const TrainResult r = train(c, subset(d, s.train), subset(d, s.val));
  EXPECT_EQ(r.curve.size(), 1u);
  EXPECT_EQ(r.convergence_epoch, 1u);
}

TEST(Train, PatienceStopsEarly) {
  HyperConfig c = small_config();
  c.total_epochs = 200;
  c.patience = 3;
  c.min_delta = 1e9;  // no improvement ever counts
  const Dataset d = small_data(80, 3, 1, 2);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const TrainResult r = train(c, subset(d, s.train), subset(d, s.val));
  EXPECT_EQ(r.curve.size(), 4u);
}

TEST(Train, RerunIsBitIdentical) {
  HyperConfig c = small_config();
  c.total_epochs = 6;
  const Dataset d = small_data(90, 3, 2, 4);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const Dataset tr = subset(d, s.train);
  const Dataset va = subset(d, s.val);
  const TrainResult a = train(c, tr, va);
  const TrainResult b = train(c, tr, va);
  EXPECT_EQ(flatten(a.params), flatten(b.params));
  EXPECT_EQ(a.best_val_loss, b.best_val_loss);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].train.total, b.curve[i].train.total);
    EXPECT_EQ(a.curve[i].val.total, b.curve[i].val.total);
    EXPECT_EQ(a.curve[i].cf_rmse, b.curve[i].cf_rmse);
  }
}

TEST(Train, BestParamsReproduceBestValidationLoss) {
  HyperConfig c = small_config();
  c.total_epochs = 15;
  const Dataset d = small_data(120, 3, 1, 5);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const Dataset va = subset(d, s.val);
  const TrainResult r = train(c, subset(d, s.train), va);
  double min_val = std::numeric_limits<double>::infinity();
  for (const auto& e : r.curve) min_val = std::min(min_val, e.val.total);
  EXPECT_EQ(r.best_val_loss, min_val);
  EXPECT_EQ(evaluate_loss(r.params, full_batch(va), r.marginal, apply_variant(c)).total, r.best_val_loss);
}

TEST(Train, SingleLevelDosagePathMatchesDiscretePathBitForBit) {
  HyperConfig c = small_config();
  c.total_epochs = 5;
  const Dataset d = small_data(90, 3, 1, 6);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const Dataset tr = subset(d, s.train);
  const Dataset va = subset(d, s.val);
  TrainOptions discrete;
  discrete.rmse_form = RmseForm::discrete;
  TrainOptions dosage;
  dosage.rmse_form = RmseForm::dosage;
  const TrainResult a = train(c, tr, va, discrete);
  const TrainResult b = train(c, tr, va, dosage);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].train.total, b.curve[i].train.total);
    EXPECT_EQ(a.curve[i].val.rmse, b.curve[i].val.rmse);
  }
  EXPECT_EQ(flatten(a.params), flatten(b.params));
}

TEST(Train, HiciWithoutMixedNormTrainsLikeDeepTreatPlus) {
  HyperConfig c = small_config();
  c.total_epochs = 4;
  c.weights.gamma = 0.0;
  const Dataset d = small_data(90, 3, 1, 7);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const Dataset tr = subset(d, s.train);
  const Dataset va = subset(d, s.val);
  const TrainResult a = train(c, tr, va);
  c.variant = Variant::deeptreat_plus;
  const TrainResult b = train(c, tr, va);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].val.total, b.curve[i].val.total);
}

TEST(Train, RejectsTrainSetMissingATreatment) {
  Dataset d = small_data(40, 3, 1, 8);
  for (auto& t : d.t) t = t == 2 ? 1 : t;
  d.y_full.reset();
  EXPECT_THROW(train(small_config(), d, d), DomainError);
}

TEST(Train, LossLogHasHeaderAndOneRowPerEpoch) {
  HyperConfig c = small_config();
  c.total_epochs = 3;
  const Dataset d = small_data(60, 2, 1, 9);
  const Split s = split_dataset(d, kDefaultRatios, c.seed);
  const TrainResult r = train(c, subset(d, s.train), subset(d, s.val));
  std::ostringstream os;
  write_loss_log(os, r.curve);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,L_ce,L_ae,L_21,L_rmse,L_total,lr");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, r.curve.size());
}

// ---------------------------------------------------------------------------
// Checkpoints.

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir("ckpt");
  Fixture f = fixture(Variant::hici, 2);
  Checkpoint c{small_config(), f.w, 6, 3, 2, 7, {{"note", "x"}}};
  save_checkpoint(c, dir.path() / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir.path() / "a.ckpt");
  EXPECT_EQ(flatten(back.params), flatten(f.w));
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.extra.at("note"), "x");
  EXPECT_EQ(config_to_json(back.config), config_to_json(c.config));
}

TEST(Checkpoint, TruncatedPayloadIsRejected) {
  TempDir dir("ckpt-bad");
  Fixture f = fixture(Variant::hici, 1);
  save_checkpoint({small_config(), f.w, 6, 3, 1, 1, {}}, dir.path() / "a.ckpt");
  const auto size = std::filesystem::file_size(dir.path() / "a.ckpt");
  std::filesystem::resize_file(dir.path() / "a.ckpt", size - 8);
  EXPECT_THROW(load_checkpoint(dir.path() / "a.ckpt"), ParseError);
}

}  // namespace
}  // namespace hici
