// SPDX-License-Identifier: Apache-2.0
#pragma once

// Joint training loop: per-epoch propensity refit, shuffled mini-batches with
// Adam, validation-loss early stopping.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hici/dataset.hpp"
#include "hici/metrics.hpp"
#include "hici/model.hpp"

namespace hici {

struct EpochLog {
  std::size_t epoch = 0;        // 1-based
  LossBreakdown train;          // batch-size weighted mean over the epoch
  LossBreakdown val;
  std::optional<double> cf_rmse;  // on the validation set, when Y_full is known
  double lr = 0.0;
};

struct TrainResult {
  HiCiParams params;              // snapshot at the best validation loss
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t convergence_epoch = 0;
  std::vector<EpochLog> curve;
  std::vector<double> marginal;   // treatment marginal of the train set
};

struct TrainOptions {
  RmseForm rmse_form = RmseForm::automatic;
  bool track_cf_rmse = true;
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline void check_finite(const LossBreakdown& l, std::size_t epoch, const char* where) {
  const std::pair<const char*, double> parts[] = {
      {"L_ce", l.ce}, {"L_ae", l.ae}, {"L_21", l.l21}, {"L_rmse", l.rmse}, {"L_total", l.total}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(name) + " is not finite (" + where + ", epoch " + std::to_string(epoch) + ")");
    }
  }
}

inline void accumulate(LossBreakdown& acc, const LossBreakdown& l, double weight) {
  acc.ce += weight * l.ce;
  acc.ae += weight * l.ae;
  acc.l21 += weight * l.l21;
  acc.rmse += weight * l.rmse;
  acc.decorr += weight * l.decorr;
  acc.total += weight * l.total;
}

}  // namespace detail

// Trains on `train`, selecting the epoch with the lowest validation loss.
inline TrainResult train(const HyperConfig& config, const Dataset& train_set, const Dataset& val_set,
                         const TrainOptions& opts = {}) {
  config.validate_for(train_set.meta.p);
  if (train_set.size() == 0 || val_set.size() == 0) throw DomainError("train and validation sets must be non-empty");
  if (val_set.x.cols() != train_set.x.cols()) throw ShapeError("train and validation covariates differ in width");
  const std::size_t k = train_set.meta.k;
  {
    std::vector<std::size_t> all(train_set.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    if (num_unique_treatments(train_set, all) < k) {
      throw DomainError("train set does not cover all " + std::to_string(k) + " treatments");
    }
  }

  const LossAssembly assembly = apply_variant(config);
  HiCiParams w = init_hici(config, train_set.meta.p, k, train_set.meta.e_levels);
  TrainResult result;
  result.marginal = empirical_treatment_marginal(train_set);
  const LrSchedule schedule = config.schedule();
  AdamState adam;
  Rng batch_rng = Rng::stream(config.seed, Stream::batches);

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  double reference = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;

  for (std::size_t epoch = 1; epoch <= config.total_epochs; ++epoch) {
    if (assembly.use_ce && k >= 2) {
      const Matrix rep = forward(w.encoder, train_set.x);
      w.propensity = fit_propensity(rep, train_set.t, static_cast<Index>(k), config.propensity_reg);
    }
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    batch_rng.shuffle(order);
    const double lr = lr_at(schedule, epoch - 1);

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::size_t m = stop - start;
      Matrix bx(static_cast<Index>(m), train_set.x.cols());
      std::vector<int> bt(m);
      std::vector<int> be(m);
      std::vector<double> by(m);
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t i = order[start + r];
        bx.row(static_cast<Index>(r)) = train_set.x.row(static_cast<Index>(i));
        bt[r] = train_set.t[i];
        be[r] = train_set.e[i];
        by[r] = train_set.y[i];
      }
      LossAndGrad lg = loss_and_grad(w, Batch{bx, bt, be, by}, result.marginal, assembly, opts.rmse_form);
      detail::check_finite(lg.loss, epoch, "training batch");
      add_l2_grad(w, assembly, config.l2, lg.grad);
      const auto blocks = trainable_blocks(w, lg.grad);
      adam_step(blocks, adam, lr);
      detail::accumulate(log.train, lg.loss, static_cast<double>(m) / static_cast<double>(n));
    }

    log.val = evaluate_loss(w, full_batch(val_set), result.marginal, assembly, opts.rmse_form);
    detail::check_finite(log.val, epoch, "validation");
    if (opts.track_cf_rmse && val_set.y_full && k * train_set.meta.e_levels > 1) {
      log.cf_rmse = cf_rmse(*val_set.y_full, predict_all_counterfactuals(w, val_set.x), val_set.t, val_set.e);
    }
    if (opts.on_epoch) opts.on_epoch(log);
    result.curve.push_back(log);

    if (log.val.total < result.best_val_loss) {
      result.best_val_loss = log.val.total;
      result.convergence_epoch = epoch;
      result.params = w;
    }
    if (log.val.total < reference - config.min_delta) {
      reference = log.val.total;
      wait = 0;
    } else if (++wait >= config.patience) {
      break;
    }
  }
  return result;
}

// Per-epoch loss components: epoch, L_ce, L_ae, L_21, L_rmse, L_total, lr.
inline void write_loss_log(std::ostream& os, const std::vector<EpochLog>& curve) {
  os << "epoch,L_ce,L_ae,L_21,L_rmse,L_total,lr\n";
  os.precision(17);
  for (const auto& e : curve) {
    os << e.epoch << ',' << e.train.ce << ',' << e.train.ae << ',' << e.train.l21 << ',' << e.train.rmse << ','
       << e.train.total << ',' << e.lr << '\n';
  }
}

}  // namespace hici
