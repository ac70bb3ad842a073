// SPDX-License-Identifier: Apache-2.0
#pragma once

// The Hi-CI network: an encoder/decoder pair producing a decorrelated
// representation, a propensity model on that representation, and one outcome
// head per dosage level fed with [representation, treatment embedding].

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hici/dataset.hpp"
#include "hici/error.hpp"
#include "hici/losses.hpp"
#include "hici/ndnet.hpp"
#include "hici/random.hpp"

namespace hici {

enum class Variant { hici, onn, deeptreat_plus, l21_ae };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::hici: return "hici";
    case Variant::onn: return "onn";
    case Variant::deeptreat_plus: return "deeptreat_plus";
    case Variant::l21_ae: return "l21_ae";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "hici") return Variant::hici;
  if (s == "onn") return Variant::onn;
  if (s == "deeptreat_plus") return Variant::deeptreat_plus;
  if (s == "l21_ae") return Variant::l21_ae;
  throw ConfigError("unknown variant '" + s + "' (expected hici, onn, deeptreat_plus or l21_ae)");
}

inline constexpr Variant kAllVariants[] = {Variant::hici, Variant::onn, Variant::deeptreat_plus,
                                           Variant::l21_ae};

// One training configuration. Layer counts are numbers of hidden layers.
struct HyperConfig {
  std::size_t batch_size = 128;
  std::size_t total_epochs = 300;
  double learning_rate = 0.005;
  double lr_decay = 0.75;
  std::size_t iterations_per_decay = 50;
  std::size_t encoder_layers = 2;
  std::size_t encoder_width = 64;
  std::size_t decoder_layers = 2;
  std::size_t decoder_width = 64;
  std::size_t outcome_layers = 2;
  std::size_t outcome_width = 64;
  std::size_t rep_dim = 4;
  std::size_t embed_dim = 16;
  double l2 = 1e-4;
  LossWeights weights;
  Variant variant = Variant::hici;
  std::uint64_t seed = 1;
  std::size_t patience = 20;
  double min_delta = 1e-4;
  double propensity_reg = 1e-3;
  Activation hidden_activation = Activation::relu;

  LrSchedule schedule() const { return {learning_rate, lr_decay, iterations_per_decay}; }

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
    schedule().validate();
    if (encoder_width < 1 || decoder_width < 1 || outcome_width < 1) {
      throw ConfigError("layer widths must be >= 1");
    }
    if (rep_dim < 1) throw ConfigError("rep_dim must be >= 1");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (!std::isfinite(l2) || l2 < 0.0) throw ConfigError("l2 must be >= 0");
    weights.validate();
    if (!std::isfinite(min_delta) || min_delta < 0.0) throw ConfigError("min_delta must be >= 0");
    if (!std::isfinite(propensity_reg) || propensity_reg < 0.0) {
      throw ConfigError("propensity_reg must be >= 0");
    }
  }

  // The representation must be narrower than the covariates.
  void validate_for(std::size_t covariates) const {
    validate();
    if (rep_dim >= covariates) {
      throw ConfigError("rep_dim " + std::to_string(rep_dim) + " must be smaller than P = " +
                        std::to_string(covariates));
    }
  }
};

inline nlohmann::ordered_json config_to_json(const HyperConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["total_epochs"] = c.total_epochs;
  j["learning_rate"] = c.learning_rate;
  j["lr_decay"] = c.lr_decay;
  j["iterations_per_decay"] = c.iterations_per_decay;
  j["encoder_layers"] = c.encoder_layers;
  j["encoder_width"] = c.encoder_width;
  j["decoder_layers"] = c.decoder_layers;
  j["decoder_width"] = c.decoder_width;
  j["outcome_layers"] = c.outcome_layers;
  j["outcome_width"] = c.outcome_width;
  j["rep_dim"] = c.rep_dim;
  j["embed_dim"] = c.embed_dim;
  j["l2"] = c.l2;
  j["beta"] = c.weights.beta;
  j["gamma"] = c.weights.gamma;
  j["lambda"] = c.weights.lambda;
  j["variant"] = to_string(c.variant);
  j["seed"] = c.seed;
  j["patience"] = c.patience;
  j["min_delta"] = c.min_delta;
  j["propensity_reg"] = c.propensity_reg;
  j["hidden_activation"] = to_string(c.hidden_activation);
  return j;
}

namespace detail {

template <class T>
T config_value(const nlohmann::json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
      return v.get<T>();
    } else {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
      if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError("");
      return v.get<T>();
    }
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type or sign");
  }
}

}  // namespace detail

// Applies the keys of `j` on top of `base`; unknown keys are errors.
inline HyperConfig config_from_json(const nlohmann::json& j, HyperConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  HyperConfig c = std::move(base);
  for (const auto& [key, v] : j.items()) {
    using detail::config_value;
    if (key == "batch_size") c.batch_size = config_value<std::size_t>(v, key);
    else if (key == "total_epochs") c.total_epochs = config_value<std::size_t>(v, key);
    else if (key == "learning_rate") c.learning_rate = config_value<double>(v, key);
    else if (key == "lr_decay") c.lr_decay = config_value<double>(v, key);
    else if (key == "iterations_per_decay") c.iterations_per_decay = config_value<std::size_t>(v, key);
    else if (key == "encoder_layers") c.encoder_layers = config_value<std::size_t>(v, key);
    else if (key == "encoder_width") c.encoder_width = config_value<std::size_t>(v, key);
    else if (key == "decoder_layers") c.decoder_layers = config_value<std::size_t>(v, key);
    else if (key == "decoder_width") c.decoder_width = config_value<std::size_t>(v, key);
    else if (key == "outcome_layers") c.outcome_layers = config_value<std::size_t>(v, key);
    else if (key == "outcome_width") c.outcome_width = config_value<std::size_t>(v, key);
    else if (key == "rep_dim") c.rep_dim = config_value<std::size_t>(v, key);
    else if (key == "embed_dim") c.embed_dim = config_value<std::size_t>(v, key);
    else if (key == "l2") c.l2 = config_value<double>(v, key);
    else if (key == "beta") c.weights.beta = config_value<double>(v, key);
    else if (key == "gamma") c.weights.gamma = config_value<double>(v, key);
    else if (key == "lambda") c.weights.lambda = config_value<double>(v, key);
    else if (key == "variant") c.variant = parse_variant(config_value<std::string>(v, key));
    else if (key == "seed") c.seed = config_value<std::uint64_t>(v, key);
    else if (key == "patience") c.patience = config_value<std::size_t>(v, key);
    else if (key == "min_delta") c.min_delta = config_value<double>(v, key);
    else if (key == "propensity_reg") c.propensity_reg = config_value<double>(v, key);
    else if (key == "hidden_activation") c.hidden_activation = parse_activation(config_value<std::string>(v, key));
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Loss assembly per variant.

struct LossAssembly {
  bool use_ce = true;
  bool use_ae = true;
  bool use_l21 = true;
  bool head_on_raw = false;  // outcome heads read X instead of the representation
  double w_ce = 1.0;
  double w_ae = 1.0;
  double w_l21 = 1.0;
  double w_rmse = 1.0;
};

inline LossAssembly apply_variant(Variant v, const LossWeights& w) {
  w.validate();
  switch (v) {
    case Variant::hici: return {true, true, true, false, 1.0, w.beta, w.gamma, w.lambda};
    case Variant::onn: return {false, false, false, true, 0.0, 0.0, 0.0, w.lambda};
    case Variant::deeptreat_plus: return {true, true, false, false, 1.0, w.beta, 0.0, w.lambda};
    case Variant::l21_ae: return {false, true, true, false, 0.0, w.beta, w.gamma, w.lambda};
  }
  throw ConfigError("unknown variant");
}

inline LossAssembly apply_variant(const HyperConfig& c) { return apply_variant(c.variant, c.weights); }

// ---------------------------------------------------------------------------
// Parameters.

struct HiCiParams {
  Mlp encoder;
  Mlp decoder;
  PropensityModel propensity;
  std::vector<Matrix> treat_embed;  // E tables, K x d_t
  std::vector<Mlp> heads;           // E heads, (L or P) + d_t -> 1
  bool head_on_raw = false;

  Index covariates() const { return encoder.in_dim(); }
  Index rep_dim() const { return encoder.out_dim(); }
  Index treatments() const { return treat_embed.empty() ? 0 : treat_embed.front().rows(); }
  Index embed_dim() const { return treat_embed.empty() ? 0 : treat_embed.front().cols(); }
  std::size_t levels() const { return heads.size(); }
  Index head_feature_dim() const { return head_on_raw ? covariates() : rep_dim(); }

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (decoder.in_dim() != rep_dim() || decoder.out_dim() != covariates()) {
      throw ShapeError("decoder does not invert the encoder shape");
    }
    if (propensity.theta.rows() != treatments() || propensity.theta.cols() != rep_dim()) {
      throw ShapeError("propensity weights are " + shape_str(propensity.theta) + ", expected " +
                       std::to_string(treatments()) + "x" + std::to_string(rep_dim()));
    }
    if (heads.empty() || heads.size() != treat_embed.size()) {
      throw ShapeError("need one embedding table per outcome head");
    }
    for (std::size_t e = 0; e < heads.size(); ++e) {
      heads[e].validate();
      if (treat_embed[e].rows() != treatments() || treat_embed[e].cols() != embed_dim()) {
        throw ShapeError("embedding table " + std::to_string(e) + " has inconsistent shape");
      }
      if (heads[e].in_dim() != head_feature_dim() + embed_dim() || heads[e].out_dim() != 1) {
        throw ShapeError("outcome head " + std::to_string(e) + " has inconsistent shape");
      }
    }
  }
};

inline std::vector<Index> layer_dims(Index in, std::size_t hidden, std::size_t width, Index out) {
  std::vector<Index> dims{in};
  for (std::size_t i = 0; i < hidden; ++i) dims.push_back(static_cast<Index>(width));
  dims.push_back(out);
  return dims;
}

// Normal(0, 0.1^2) weights and zero biases from the run's init stream; theta starts at 0.
inline HiCiParams init_hici(const HyperConfig& c, std::size_t covariates, std::size_t treatments,
                            std::size_t levels) {
  c.validate_for(covariates);
  if (treatments < 1) throw ConfigError("need at least one treatment");
  if (levels < 1) throw ConfigError("need at least one dosage level");
  Rng rng = Rng::stream(c.seed, Stream::init);
  const auto p = static_cast<Index>(covariates);
  const auto l = static_cast<Index>(c.rep_dim);
  const auto k = static_cast<Index>(treatments);
  const auto dt = static_cast<Index>(c.embed_dim);
  const auto act = c.hidden_activation;

  HiCiParams w;
  w.head_on_raw = apply_variant(c).head_on_raw;
  w.encoder = init_params(layer_dims(p, c.encoder_layers, c.encoder_width, l), rng, act);
  w.decoder = init_params(layer_dims(l, c.decoder_layers, c.decoder_width, p), rng, act);
  w.propensity.theta = Matrix::Zero(k, l);
  for (std::size_t e = 0; e < levels; ++e) {
    Matrix table(k, dt);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = kInitSigma * rng.normal();
    w.treat_embed.push_back(std::move(table));
  }
  const Index head_in = (w.head_on_raw ? p : l) + dt;
  for (std::size_t e = 0; e < levels; ++e) {
    w.heads.push_back(init_params(layer_dims(head_in, c.outcome_layers, c.outcome_width, 1), rng, act));
  }
  return w;
}

// Every tensor in declaration order: encoder, decoder, propensity, embeddings,
// heads. `fn(name, span)` sees each weight and bias as a flat row-major block.
template <class Params, class Fn>
void for_each_tensor(Params& w, Fn&& fn) {
  auto net = [&](auto& mlp, const std::string& prefix) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
      auto& layer = mlp.layers[i];
      const std::string base = prefix + "." + std::to_string(i);
      fn(base + ".weight", std::span(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
      fn(base + ".bias", std::span(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
    }
  };
  net(w.encoder, "encoder");
  net(w.decoder, "decoder");
  fn(std::string("propensity.theta"),
     std::span(w.propensity.theta.data(), static_cast<std::size_t>(w.propensity.theta.size())));
  for (std::size_t e = 0; e < w.treat_embed.size(); ++e) {
    auto& table = w.treat_embed[e];
    fn("embed." + std::to_string(e), std::span(table.data(), static_cast<std::size_t>(table.size())));
  }
  for (std::size_t e = 0; e < w.heads.size(); ++e) net(w.heads[e], "head." + std::to_string(e));
}

// ---------------------------------------------------------------------------
// Gradients.

struct HiCiGrad {
  MlpGrad encoder;
  MlpGrad decoder;
  Matrix theta;
  std::vector<Matrix> treat_embed;
  std::vector<MlpGrad> heads;
};

namespace detail {

inline MlpGrad zero_grad(const Mlp& net) {
  MlpGrad g;
  for (const auto& l : net.layers) {
    g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  }
  return g;
}

inline void add_into(MlpGrad& acc, const MlpGrad& g, double scale) {
  for (std::size_t i = 0; i < acc.layers.size(); ++i) {
    acc.layers[i].weight += scale * g.layers[i].weight;
    acc.layers[i].bias += scale * g.layers[i].bias;
  }
}

}  // namespace detail

inline HiCiGrad zero_grad(const HiCiParams& w) {
  HiCiGrad g;
  g.encoder = detail::zero_grad(w.encoder);
  g.decoder = detail::zero_grad(w.decoder);
  g.theta = Matrix::Zero(w.propensity.theta.rows(), w.propensity.theta.cols());
  for (const auto& t : w.treat_embed) g.treat_embed.push_back(Matrix::Zero(t.rows(), t.cols()));
  for (const auto& h : w.heads) g.heads.push_back(detail::zero_grad(h));
  return g;
}

// Adam-trained blocks: everything except the propensity weights, which are
// refit in closed loop by the trainer.
inline std::vector<ParamBlock> trainable_blocks(HiCiParams& w, const HiCiGrad& g) {
  std::vector<ParamBlock> blocks;
  auto net = [&](Mlp& mlp, const MlpGrad& mg, const std::string& prefix) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
      auto& l = mlp.layers[i];
      const auto& lg = mg.layers[i];
      const std::string base = prefix + "." + std::to_string(i);
      blocks.push_back({base + ".weight", std::span(l.weight.data(), static_cast<std::size_t>(l.weight.size())),
                        std::span(lg.weight.data(), static_cast<std::size_t>(lg.weight.size()))});
      blocks.push_back({base + ".bias", std::span(l.bias.data(), static_cast<std::size_t>(l.bias.size())),
                        std::span(lg.bias.data(), static_cast<std::size_t>(lg.bias.size()))});
    }
  };
  net(w.encoder, g.encoder, "encoder");
  net(w.decoder, g.decoder, "decoder");
  for (std::size_t e = 0; e < w.treat_embed.size(); ++e) {
    auto& t = w.treat_embed[e];
    const auto& tg = g.treat_embed[e];
    blocks.push_back({"embed." + std::to_string(e), std::span(t.data(), static_cast<std::size_t>(t.size())),
                      std::span(tg.data(), static_cast<std::size_t>(tg.size()))});
  }
  for (std::size_t e = 0; e < w.heads.size(); ++e) net(w.heads[e], g.heads[e], "head." + std::to_string(e));
  return blocks;
}

// (l2 / 2) * squared weights of every network the assembly uses, plus the
// embedding tables. Biases are not penalized.
inline double l2_penalty(const HiCiParams& w, const LossAssembly& a, double l2) {
  if (l2 == 0.0) return 0.0;
  double s = 0.0;
  if (!a.head_on_raw || a.use_ae) s += weight_sq_norm(w.encoder);
  if (a.use_ae) s += weight_sq_norm(w.decoder);
  for (const auto& t : w.treat_embed) s += t.squaredNorm();
  for (const auto& h : w.heads) s += weight_sq_norm(h);
  return 0.5 * l2 * s;
}

inline void add_l2_grad(const HiCiParams& w, const LossAssembly& a, double l2, HiCiGrad& g) {
  if (l2 == 0.0) return;
  auto net = [&](const Mlp& mlp, MlpGrad& mg) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) mg.layers[i].weight += l2 * mlp.layers[i].weight;
  };
  if (!a.head_on_raw || a.use_ae) net(w.encoder, g.encoder);
  if (a.use_ae) net(w.decoder, g.decoder);
  for (std::size_t e = 0; e < w.treat_embed.size(); ++e) g.treat_embed[e] += l2 * w.treat_embed[e];
  for (std::size_t e = 0; e < w.heads.size(); ++e) net(w.heads[e], g.heads[e]);
}

// ---------------------------------------------------------------------------
// Prediction.

namespace detail {

inline void check_assignments(const HiCiParams& w, Index rows, std::span<const int> t, std::span<const int> e) {
  if (static_cast<Index>(t.size()) != rows || static_cast<Index>(e.size()) != rows) {
    throw ShapeError("assignment vectors disagree with the " + std::to_string(rows) + " covariate rows");
  }
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (t[n] < 0 || t[n] >= w.treatments()) {
      throw DomainError("treatment " + std::to_string(t[n] + 1) + " at row " + std::to_string(n + 1) +
                        " outside [1, " + std::to_string(w.treatments()) + "]");
    }
    if (e[n] < 0 || static_cast<std::size_t>(e[n]) >= w.levels()) {
      throw DomainError("dosage level " + std::to_string(e[n] + 1) + " at row " + std::to_string(n + 1) +
                        " outside [1, " + std::to_string(w.levels()) + "]");
    }
  }
}

// Rows routed to each dosage head, in input order.
inline std::vector<std::vector<Index>> rows_by_level(std::span<const int> e, std::size_t levels) {
  std::vector<std::vector<Index>> groups(levels);
  for (std::size_t n = 0; n < e.size(); ++n) groups[static_cast<std::size_t>(e[n])].push_back(static_cast<Index>(n));
  return groups;
}

// [features_n, embed[t_n]] for the given rows.
inline Matrix head_input(const Matrix& features, const Matrix& table, std::span<const int> t,
                         const std::vector<Index>& rows) {
  const Index f = features.cols();
  Matrix in(static_cast<Index>(rows.size()), f + table.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = static_cast<Index>(r);
    in.row(i).head(f) = features.row(rows[r]);
    in.row(i).tail(table.cols()) = table.row(t[static_cast<std::size_t>(rows[r])]);
  }
  return in;
}

inline Matrix head_features(const HiCiParams& w, const Matrix& x) {
  return w.head_on_raw ? x : forward(w.encoder, x);
}

}  // namespace detail

// y_hat_n = head_{e_n}([features(x_n), embed_{e_n}[t_n]]).
inline std::vector<double> predict_outcome(const HiCiParams& w, const Matrix& x, std::span<const int> t,
                                           std::span<const int> e) {
  detail::check_assignments(w, x.rows(), t, e);
  const Matrix features = detail::head_features(w, x);
  std::vector<double> y(static_cast<std::size_t>(x.rows()), 0.0);
  const auto groups = detail::rows_by_level(e, w.levels());
  for (std::size_t lvl = 0; lvl < groups.size(); ++lvl) {
    if (groups[lvl].empty()) continue;
    const Matrix out = forward(w.heads[lvl], detail::head_input(features, w.treat_embed[lvl], t, groups[lvl]));
    for (std::size_t r = 0; r < groups[lvl].size(); ++r) {
      y[static_cast<std::size_t>(groups[lvl][r])] = out(static_cast<Index>(r), 0);
    }
  }
  return y;
}

// Predictions for every (treatment, dosage) cell of every row.
inline OutcomeTensor predict_all_counterfactuals(const HiCiParams& w, const Matrix& x) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto k = static_cast<std::size_t>(w.treatments());
  const std::size_t levels = w.levels();
  OutcomeTensor out(n, k, levels);
  const Matrix features = detail::head_features(w, x);
  std::vector<Index> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<Index>(i);
  std::vector<int> t(n);
  for (std::size_t lvl = 0; lvl < levels; ++lvl) {
    for (std::size_t j = 0; j < k; ++j) {
      std::fill(t.begin(), t.end(), static_cast<int>(j));
      const Matrix y = forward(w.heads[lvl], detail::head_input(features, w.treat_embed[lvl], t, all));
      for (std::size_t i = 0; i < n; ++i) out(i, j, lvl) = y(static_cast<Index>(i), 0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss evaluation.

// How the outcome term is computed: the single-level RMSE or the masked
// dosage RMSE. automatic picks the former exactly when E = 1.
enum class RmseForm { automatic, discrete, dosage };

struct Batch {
  const Matrix& x;
  std::span<const int> t;
  std::span<const int> e;
  std::span<const double> y;
};

struct LossBreakdown {
  double ce = 0.0;
  double ae = 0.0;
  double l21 = 0.0;
  double rmse = 0.0;
  double decorr = 0.0;
  double total = 0.0;
};

struct LossAndGrad {
  LossBreakdown loss;
  HiCiGrad grad;
};

namespace detail {

inline bool dosage_form(RmseForm form, std::size_t levels) {
  return form == RmseForm::dosage || (form == RmseForm::automatic && levels > 1);
}

inline void combine(LossBreakdown& l, const LossAssembly& a) {
  l.decorr = a.w_ce * l.ce + a.w_ae * l.ae + a.w_l21 * l.l21;
  l.total = l.decorr + a.w_rmse * l.rmse;
}

template <bool WithGrad>
LossAndGrad evaluate(const HiCiParams& w, const Batch& b, std::span<const double> marginal,
                     const LossAssembly& a, RmseForm form) {
  if (b.x.cols() != w.covariates()) {
    throw ShapeError("batch has " + std::to_string(b.x.cols()) + " covariates, network expects " +
                     std::to_string(w.covariates()));
  }
  if (static_cast<Index>(b.y.size()) != b.x.rows()) throw ShapeError("batch outcome length disagrees with rows");
  check_assignments(w, b.x.rows(), b.t, b.e);
  if (a.head_on_raw != w.head_on_raw) throw ConfigError("loss assembly and parameters disagree on head input");

  LossAndGrad out;
  if constexpr (WithGrad) out.grad = zero_grad(w);
  const Index k = w.treatments();
  const bool need_rep = !a.head_on_raw || a.use_ce || a.use_ae || a.use_l21;
  ForwardTrace enc;
  if (need_rep) enc = forward_trace(w.encoder, b.x);
  Matrix rep_grad;
  if constexpr (WithGrad) {
    if (need_rep) rep_grad = Matrix::Zero(b.x.rows(), w.rep_dim());
  }

  if (a.use_ce) {
    if constexpr (WithGrad) {
      const CeGrad g = loss_ce_with_grad(enc.output(), w.propensity, marginal);
      out.loss.ce = g.value;
      rep_grad += a.w_ce * g.rep;
      out.grad.theta = a.w_ce * g.theta;
    } else {
      out.loss.ce = loss_ce(enc.output(), w.propensity, marginal);
    }
  }
  if (a.use_ae) {
    const ForwardTrace dec = forward_trace(w.decoder, enc.output());
    if constexpr (WithGrad) {
      const AeGrad g = loss_ae_with_grad(b.x, dec.output());
      out.loss.ae = g.value;
      const BackwardResult br = backward(w.decoder, dec, a.w_ae * g.x_hat);
      out.grad.decoder = br.params;
      rep_grad += br.input;
    } else {
      out.loss.ae = loss_ae(b.x, dec.output());
    }
  }
  if (a.use_l21) {
    if constexpr (WithGrad) {
      const L21Grad g = loss_21_with_grad(enc.output(), b.t, k);
      out.loss.l21 = g.value;
      rep_grad += a.w_l21 * g.rep;
    } else {
      out.loss.l21 = loss_21(mean_diff_matrix(enc.output(), b.t, k));
    }
  }

  // Outcome heads.
  const Matrix& features = a.head_on_raw ? b.x : enc.output();
  const auto groups = rows_by_level(b.e, w.levels());
  std::vector<ForwardTrace> traces(groups.size());
  std::vector<double> y_hat(b.y.size(), 0.0);
  for (std::size_t lvl = 0; lvl < groups.size(); ++lvl) {
    if (groups[lvl].empty()) continue;
    traces[lvl] = forward_trace(w.heads[lvl], head_input(features, w.treat_embed[lvl], b.t, groups[lvl]));
    const Matrix& o = traces[lvl].output();
    for (std::size_t r = 0; r < groups[lvl].size(); ++r) {
      y_hat[static_cast<std::size_t>(groups[lvl][r])] = o(static_cast<Index>(r), 0);
    }
  }
  std::vector<double> y_grad;
  if (dosage_form(form, w.levels())) {
    const auto levels = static_cast<Index>(w.levels());
    const DosageOutcomes target = factual_dosage_outcomes(b.y, b.e, levels);
    Matrix pred = Matrix::Zero(b.x.rows(), levels);
    for (Index n = 0; n < b.x.rows(); ++n) pred(n, b.e[static_cast<std::size_t>(n)]) = y_hat[static_cast<std::size_t>(n)];
    if constexpr (WithGrad) {
      const RmseDosageGrad g = loss_rmse_dosage_with_grad(target, pred);
      out.loss.rmse = g.value;
      y_grad.resize(b.y.size());
      for (Index n = 0; n < b.x.rows(); ++n) y_grad[static_cast<std::size_t>(n)] = g.y_hat(n, b.e[static_cast<std::size_t>(n)]);
    } else {
      out.loss.rmse = loss_rmse_dosage(target, pred);
    }
  } else {
    if constexpr (WithGrad) {
      RmseGrad g = loss_rmse_with_grad(b.y, y_hat);
      out.loss.rmse = g.value;
      y_grad = std::move(g.y_hat);
    } else {
      out.loss.rmse = loss_rmse(b.y, y_hat);
    }
  }

  if constexpr (WithGrad) {
    Matrix feature_grad = Matrix::Zero(features.rows(), features.cols());
    const Index f = features.cols();
    for (std::size_t lvl = 0; lvl < groups.size(); ++lvl) {
      const auto& rows = groups[lvl];
      if (rows.empty()) continue;
      Matrix up(static_cast<Index>(rows.size()), 1);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        up(static_cast<Index>(r), 0) = a.w_rmse * y_grad[static_cast<std::size_t>(rows[r])];
      }
      const BackwardResult br = backward(w.heads[lvl], traces[lvl], up);
      out.grad.heads[lvl] = br.params;
      auto& table_grad = out.grad.treat_embed[lvl];
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = static_cast<Index>(r);
        feature_grad.row(rows[r]) += br.input.row(i).head(f);
        table_grad.row(b.t[static_cast<std::size_t>(rows[r])]) += br.input.row(i).tail(table_grad.cols());
      }
    }
    if (!a.head_on_raw) rep_grad += feature_grad;
    if (need_rep) out.grad.encoder = backward(w.encoder, enc, rep_grad).params;
  }
  combine(out.loss, a);
  return out;
}

}  // namespace detail

// Loss of the variant's objective on one batch (no L2 penalty).
inline LossBreakdown evaluate_loss(const HiCiParams& w, const Batch& b, std::span<const double> marginal,
                                   const LossAssembly& a, RmseForm form = RmseForm::automatic) {
  return detail::evaluate<false>(w, b, marginal, a, form).loss;
}

// Loss and its gradient w.r.t. every parameter tensor (no L2 penalty).
// grad.theta is reported for checking; the trainer does not step on it.
inline LossAndGrad loss_and_grad(const HiCiParams& w, const Batch& b, std::span<const double> marginal,
                                 const LossAssembly& a, RmseForm form = RmseForm::automatic) {
  return detail::evaluate<true>(w, b, marginal, a, form);
}

inline Batch full_batch(const Dataset& d) { return {d.x, d.t, d.e, d.y}; }

}  // namespace hici
