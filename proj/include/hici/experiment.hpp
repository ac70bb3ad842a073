// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment plumbing shared by the CLI: hyperparameter grids, run records,
// the JSON Lines run ledger, grid search, ablation sweeps and report tables.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hici/checkpoint.hpp"
#include "hici/dataset.hpp"
#include "hici/dataset_io.hpp"
#include "hici/metrics.hpp"
#include "hici/model.hpp"
#include "hici/trainer.hpp"

namespace hici {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

inline constexpr std::size_t kDefaultMaxCells = 512;

// 64-bit FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Content hash of the factual data; identifies a dataset independent of its path.
inline std::string dataset_fingerprint(const Dataset& d) {
  auto raw = [](const auto* p, std::size_t n) {
    return std::string_view(reinterpret_cast<const char*>(p), n * sizeof(*p));
  };
  std::uint64_t h = fnv1a(raw(d.x.data(), static_cast<std::size_t>(d.x.size())));
  h = fnv1a(raw(d.t.data(), d.t.size()), h);
  h = fnv1a(raw(d.e.data(), d.e.size()), h);
  h = fnv1a(raw(d.y.data(), d.y.size()), h);
  return hex64(h);
}

// ---------------------------------------------------------------------------
// Grids.

struct GridCell {
  HyperConfig config;
  SplitRatios ratios = kDefaultRatios;
};

inline SplitRatios parse_ratios(const json& v) {
  if (!v.is_array() || v.size() != 3) throw ConfigError("split_ratios must be a list of three numbers");
  SplitRatios r{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) throw ConfigError("split_ratios must be a list of three numbers");
    r[i] = v[i].get<double>();
  }
  validate_ratios(r);
  return r;
}

// Ordered axes of candidate values. Keys are HyperConfig field names or
// "split_ratios"; the last axis varies fastest in the expansion.
class HyperGrid {
 public:
  using Axis = std::pair<std::string, std::vector<json>>;

  HyperGrid() = default;

  void add_axis(const std::string& key, std::vector<json> values) {
    if (values.empty()) throw ConfigError("grid axis '" + key + "' has no values");
    for (const auto& v : values) check_value(key, v);
    for (const auto& a : axes_) {
      if (a.first == key) throw ConfigError("grid axis '" + key + "' given twice");
    }
    axes_.emplace_back(key, std::move(values));
  }

  // A JSON object of key -> list (a scalar is a one-value list). "base" may
  // hold a flat config applied under every cell.
  static HyperGrid from_json(const ojson& j) {
    if (!j.is_object()) throw ConfigError("grid file must be a JSON object");
    HyperGrid g;
    for (const auto& [key, v] : j.items()) {
      if (key == "base") {
        g.base_ = config_from_json(json::parse(v.dump()));
        continue;
      }
      std::vector<json> values;
      const bool list = v.is_array() && !(key == "split_ratios" && !v.empty() && v[0].is_number());
      if (list) {
        for (const auto& x : v) values.push_back(json::parse(x.dump()));
      } else {
        values.push_back(json::parse(v.dump()));
      }
      g.add_axis(key, std::move(values));
    }
    return g;
  }

  static HyperGrid load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grid file " + path.string());
    try {
      return from_json(ojson::parse(in));
    } catch (const ojson::parse_error& e) {
      throw ConfigError("grid file " + path.string() + " is not valid JSON: " + e.what());
    }
  }

  // The grid-search value sets, with {0.1, 1, 10} for each loss weight and a
  // small set for the representation and embedding widths.
  static HyperGrid full_search_space() {
    HyperGrid g;
    auto list = [](std::initializer_list<json> v) { return std::vector<json>(v); };
    g.add_axis("batch_size", list({64, 128, 256, 512}));
    g.add_axis("total_epochs", list({1000}));
    g.add_axis("learning_rate", list({0.06, 0.08, 0.1, 0.12, 0.14, 0.16}));
    g.add_axis("lr_decay", list({0.6, 0.65, 0.7, 0.75}));
    g.add_axis("iterations_per_decay", list({1, 2}));
    g.add_axis("split_ratios", list({json::array({0.6, 0.2, 0.2})}));
    g.add_axis("encoder_layers", list({1, 2, 3, 5, 7}));
    g.add_axis("decoder_layers", list({3, 4, 5, 6, 7, 8}));
    g.add_axis("outcome_layers", list({3, 4, 5, 6, 7, 8}));
    g.add_axis("encoder_width", list({100, 150, 200, 250}));
    g.add_axis("decoder_width", list({100, 175, 250, 325, 400}));
    g.add_axis("outcome_width", list({100, 200, 250, 300, 400, 500}));
    g.add_axis("l2", list({0.01, 0.001, 0.0001}));
    g.add_axis("beta", list({0.1, 1.0, 10.0}));
    g.add_axis("gamma", list({0.1, 1.0, 10.0}));
    g.add_axis("lambda", list({0.1, 1.0, 10.0}));
    g.add_axis("rep_dim", list({4, 8}));
    g.add_axis("embed_dim", list({8, 16, 32}));
    return g;
  }

  const std::vector<Axis>& axes() const { return axes_; }
  const HyperConfig& base() const { return base_; }
  void set_base(HyperConfig c) { base_ = std::move(c); }

  // Cartesian size, saturating at SIZE_MAX.
  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& a : axes_) {
      if (n > SIZE_MAX / a.second.size()) return SIZE_MAX;
      n *= a.second.size();
    }
    return n;
  }

  std::vector<GridCell> expand(std::size_t max_cells = kDefaultMaxCells) const {
    const std::size_t total = size();
    if (total > max_cells) {
      throw ConfigError("grid expands to " + (total == SIZE_MAX ? std::string("more than 2^64") : std::to_string(total)) +
                        " cells, above the cap of " + std::to_string(max_cells) + " (raise it with --max-cells)");
    }
    std::vector<GridCell> cells;
    cells.reserve(total);
    std::vector<std::size_t> pos(axes_.size(), 0);
    for (std::size_t c = 0; c < total; ++c) {
      GridCell cell{base_, kDefaultRatios};
      json overrides = json::object();
      for (std::size_t a = 0; a < axes_.size(); ++a) {
        const auto& [key, values] = axes_[a];
        if (key == "split_ratios") {
          cell.ratios = parse_ratios(values[pos[a]]);
        } else {
          overrides[key] = values[pos[a]];
        }
      }
      cell.config = config_from_json(overrides, base_);
      cells.push_back(std::move(cell));
      for (std::size_t a = axes_.size(); a-- > 0;) {
        if (++pos[a] < axes_[a].second.size()) break;
        pos[a] = 0;
      }
    }
    return cells;
  }

 private:
  static void check_value(const std::string& key, const json& v) {
    if (key == "split_ratios") {
      parse_ratios(v);
    } else {
      config_from_json(json{{key, v}});
    }
  }

  HyperConfig base_;
  std::vector<Axis> axes_;
};

// ---------------------------------------------------------------------------
// Run records.

struct RunRecord {
  std::string run_id;
  std::string status = "ok";  // ok | failed
  std::string error;
  HyperConfig config;
  DatasetMeta meta;
  std::string dataset_fingerprint;
  std::uint64_t split_seed = 0;
  SplitRatios ratios = kDefaultRatios;
  std::optional<MetricsReport> test_metrics;
  std::optional<double> best_val_loss;
  std::size_t convergence_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<std::optional<double>> cf_rmse_curve;
  double wall_time = 0.0;
  std::string checkpoint;

  bool ok() const { return status == "ok"; }

  ojson to_json() const {
    ojson j;
    j["run_id"] = run_id;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["config"] = config_to_json(config);
    j["dataset"] = meta_to_json(meta);
    j["dataset_name"] = meta.name();
    j["dataset_fingerprint"] = dataset_fingerprint;
    j["split_seed"] = split_seed;
    j["split_ratios"] = ratios;
    j["test_metrics"] = test_metrics ? test_metrics->to_json() : ojson(nullptr);
    j["best_val_loss"] = best_val_loss ? ojson(*best_val_loss) : ojson(nullptr);
    j["convergence_epoch"] = convergence_epoch;
    j["epochs_run"] = epochs_run;
    auto curve = ojson::array();
    for (const auto& v : cf_rmse_curve) curve.push_back(v ? ojson(*v) : ojson(nullptr));
    j["cf_rmse_curve"] = curve;
    j["wall_time"] = wall_time;
    j["checkpoint"] = checkpoint;
    return j;
  }

  static RunRecord from_json(const json& j) {
    RunRecord r;
    try {
      r.run_id = j.at("run_id").get<std::string>();
      r.status = j.at("status").get<std::string>();
      r.error = j.value("error", "");
      r.config = config_from_json(j.at("config"));
      r.meta = meta_from_json(j.at("dataset"));
      r.dataset_fingerprint = j.value("dataset_fingerprint", "");
      r.split_seed = j.at("split_seed").get<std::uint64_t>();
      r.ratios = parse_ratios(j.at("split_ratios"));
      if (!j.at("test_metrics").is_null()) r.test_metrics = MetricsReport::from_json(j.at("test_metrics"));
      if (!j.at("best_val_loss").is_null()) r.best_val_loss = j.at("best_val_loss").get<double>();
      r.convergence_epoch = j.value("convergence_epoch", std::size_t{0});
      r.epochs_run = j.value("epochs_run", std::size_t{0});
      for (const auto& v : j.value("cf_rmse_curve", json::array())) {
        r.cf_rmse_curve.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      }
      r.wall_time = j.value("wall_time", 0.0);
      r.checkpoint = j.value("checkpoint", "");
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed run record: ") + e.what());
    }
    return r;
  }
};

// Deterministic id of a (config, dataset, split) triple.
inline std::string make_run_id(const HyperConfig& c, const DatasetMeta& meta, const std::string& fingerprint,
                               std::uint64_t split_seed, const SplitRatios& ratios) {
  ojson key;
  key["config"] = config_to_json(c);
  key["dataset"] = meta_to_json(meta);
  key["fingerprint"] = fingerprint;
  key["split_seed"] = split_seed;
  key["split_ratios"] = ratios;
  return "run-" + hex64(fnv1a(key.dump()));
}

// ---------------------------------------------------------------------------
// Ledger.

inline std::filesystem::path default_ledger_path(const std::optional<std::filesystem::path>& out_dir = {}) {
  if (const char* env = std::getenv("HICI_LEDGER"); env && *env) return env;
  return (out_dir ? *out_dir : std::filesystem::path(".")) / "ledger.jsonl";
}

// Append-only JSON Lines file of run records; appends are serialized.
class Ledger {
 public:
  explicit Ledger(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const { return path_; }

  std::vector<RunRecord> read() const {
    std::vector<RunRecord> out;
    std::ifstream in(path_);
    if (!in) return out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        out.push_back(RunRecord::from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw ParseError(path_.string(), lineno, e.what());
      }
    }
    return out;
  }

  std::set<std::string> ids() const {
    std::set<std::string> s;
    for (const auto& r : read()) s.insert(r.run_id);
    return s;
  }

  void append(const RunRecord& r) {
    std::lock_guard lock(mutex_);
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error("cannot append to ledger " + path_.string());
    out << r.to_json().dump() << '\n';
    out.flush();
    if (!out) throw Error("failed writing ledger " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Single runs.

struct RunOptions {
  bool evaluate_test = true;
  std::optional<std::filesystem::path> checkpoint_dir;
  bool track_cf_rmse = true;
};

struct RunOutput {
  RunRecord record;
  std::optional<TrainResult> result;
};

struct SplitData {
  Dataset train;
  Dataset val;
  Dataset test;
};

inline SplitData split_data(const Dataset& d, const SplitRatios& ratios, std::uint64_t seed) {
  const Split s = split_dataset(d, ratios, seed);
  return {subset(d, s.train), subset(d, s.val), subset(d, s.test)};
}

inline MetricsReport test_metrics(const HiCiParams& w, const Dataset& test) {
  return evaluate_metrics(test, predict_all_counterfactuals(w, test.x));
}

// Split with the run seed, train, and (optionally) score the test partition.
// Numeric failures produce a failed record; other errors propagate.
inline RunOutput run_single(const HyperConfig& config, const Dataset& d, const SplitRatios& ratios,
                            const RunOptions& opts = {}, const std::string& fingerprint = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutput out;
  RunRecord& r = out.record;
  r.config = config;
  r.meta = d.meta;
  r.dataset_fingerprint = fingerprint.empty() ? dataset_fingerprint(d) : fingerprint;
  r.split_seed = config.seed;
  r.ratios = ratios;
  r.run_id = make_run_id(config, d.meta, r.dataset_fingerprint, r.split_seed, ratios);

  const SplitData parts = split_data(d, ratios, r.split_seed);
  try {
    TrainOptions topts;
    topts.track_cf_rmse = opts.track_cf_rmse;
    TrainResult result = train(config, parts.train, parts.val, topts);
    r.best_val_loss = result.best_val_loss;
    r.convergence_epoch = result.convergence_epoch;
    r.epochs_run = result.curve.size();
    for (const auto& e : result.curve) r.cf_rmse_curve.push_back(e.cf_rmse);
    if (opts.evaluate_test) r.test_metrics = test_metrics(result.params, parts.test);
    if (opts.checkpoint_dir) {
      std::filesystem::create_directories(*opts.checkpoint_dir);
      const auto path = *opts.checkpoint_dir / (r.run_id + ".ckpt");
      Checkpoint c;
      c.config = config;
      c.params = result.params;
      c.covariates = d.meta.p;
      c.treatments = d.meta.k;
      c.levels = d.meta.e_levels;
      c.epoch = result.convergence_epoch;
      c.extra = {{"run_id", r.run_id},
                 {"split_seed", r.split_seed},
                 {"split_ratios", ratios},
                 {"dataset_fingerprint", r.dataset_fingerprint}};
      save_checkpoint(c, path);
      r.checkpoint = path.string();
    }
    out.result = std::move(result);
  } catch (const NumericError& e) {
    r.status = "failed";
    r.error = e.what();
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Runs task(i) for i in [0, count) on `workers` threads.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& task) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

// Failed-record form of any exception escaping a worker.
inline RunRecord failed_record(const HyperConfig& c, const Dataset& d, const std::string& fingerprint,
                               const SplitRatios& ratios, const std::string& what) {
  RunRecord r;
  r.config = c;
  r.meta = d.meta;
  r.dataset_fingerprint = fingerprint;
  r.split_seed = c.seed;
  r.ratios = ratios;
  r.run_id = make_run_id(c, d.meta, fingerprint, c.seed, ratios);
  r.status = "failed";
  r.error = what;
  return r;
}

// ---------------------------------------------------------------------------
// Grid search.

struct GridResult {
  std::vector<RunRecord> records;  // cell order
  std::optional<std::size_t> winner;
  std::vector<std::string> notices;
};

inline GridResult grid_search(const std::vector<GridCell>& cells, const Dataset& d, std::size_t workers,
                              Ledger* ledger, const RunOptions& opts = {}) {
  GridResult g;
  const std::string fp = dataset_fingerprint(d);
  const auto existing_records = ledger ? ledger->read() : std::vector<RunRecord>{};
  std::map<std::string, RunRecord> existing;
  for (const auto& r : existing_records) existing.emplace(r.run_id, r);

  g.records.resize(cells.size());
  std::vector<std::uint8_t> fresh(cells.size(), 1);
  std::vector<std::optional<HiCiParams>> params(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto id = make_run_id(cells[i].config, d.meta, fp, cells[i].config.seed, cells[i].ratios);
    if (auto it = existing.find(id); it != existing.end()) {
      g.records[i] = it->second;
      fresh[i] = 0;
      g.notices.push_back("skipping duplicate run " + id + " (already in ledger)");
    }
  }

  RunOptions cell_opts = opts;
  cell_opts.evaluate_test = false;
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    if (!fresh[i]) return;
    try {
      RunOutput o = run_single(cells[i].config, d, cells[i].ratios, cell_opts, fp);
      if (o.result) params[i] = std::move(o.result->params);
      g.records[i] = std::move(o.record);
    } catch (const std::exception& e) {
      g.records[i] = failed_record(cells[i].config, d, fp, cells[i].ratios, e.what());
    }
  });

  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& r = g.records[i];
    if (!r.ok() || !r.best_val_loss) continue;
    if (!g.winner || *r.best_val_loss < *g.records[*g.winner].best_val_loss) g.winner = i;
  }

  if (g.winner) {
    const std::size_t w = *g.winner;
    RunRecord& r = g.records[w];
    if (!r.test_metrics) {
      const SplitData parts = split_data(d, r.ratios, r.split_seed);
      if (params[w]) {
        r.test_metrics = test_metrics(*params[w], parts.test);
      } else if (!r.checkpoint.empty() && std::filesystem::exists(r.checkpoint)) {
        r.test_metrics = test_metrics(load_checkpoint(r.checkpoint).params, parts.test);
      } else {
        RunOutput o = run_single(cells[w].config, d, cells[w].ratios, opts, fp);
        r.test_metrics = o.record.test_metrics;
      }
      // A reused winner already sits in the ledger without test metrics.
      if (!fresh[w]) g.notices.push_back("winner " + r.run_id + " came from the ledger; test metrics recomputed");
    }
  }
  if (ledger) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (fresh[i]) ledger->append(g.records[i]);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Aggregation helpers.

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

// Sample standard deviation (n - 1); a single value has std 0.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.count = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

inline std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Table cell "mean, std" with four decimals; empty when there is no value.
inline std::string cell_mean_std(const std::vector<double>& v) {
  if (v.empty()) return "";
  const MeanStd m = mean_std(v);
  return fixed4(m.mean) + ", " + fixed4(m.std);
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Headline error metric of a report: sqrt PEHE for E = 1, sqrt MISE otherwise.
inline std::optional<double> primary_error(const MetricsReport& m) { return m.pehe_sqrt ? m.pehe_sqrt : m.mise_sqrt; }
inline std::optional<double> ate_error(const MetricsReport& m) { return m.mape_ate ? m.mape_ate : m.mape_ate_dos; }

// ---------------------------------------------------------------------------
// Ablation.

struct AblationTask {
  const Dataset* data;
  std::string fingerprint;
  HyperConfig config;
};

struct AblationResult {
  std::vector<RunRecord> records;  // dataset-major, then seed, then variant
  std::vector<std::string> notices;
  std::string table_csv;
};

inline std::string ablation_table(const std::vector<RunRecord>& records, const std::vector<std::string>& datasets,
                                  const std::vector<Variant>& variants) {
  std::ostringstream os;
  os << "dataset";
  for (Variant v : variants) os << ',' << to_string(v) << "_error";
  for (Variant v : variants) os << ',' << to_string(v) << "_mape";
  os << '\n';
  for (const auto& name : datasets) {
    os << name;
    std::vector<std::string> errs;
    std::vector<std::string> mapes;
    for (Variant v : variants) {
      std::vector<double> e;
      std::vector<double> m;
      for (const auto& r : records) {
        if (!r.ok() || !r.test_metrics || r.meta.name() != name || r.config.variant != v) continue;
        if (auto x = primary_error(*r.test_metrics)) e.push_back(*x);
        if (auto x = ate_error(*r.test_metrics)) m.push_back(*x);
      }
      errs.push_back(cell_mean_std(e));
      mapes.push_back(cell_mean_std(m));
    }
    for (const auto& s : errs) os << ',' << csv_quote(s);
    for (const auto& s : mapes) os << ',' << csv_quote(s);
    os << '\n';
  }
  return os.str();
}

// Every (dataset, seed, variant) with shared data and splits per seed.
inline AblationResult ablate(const std::vector<const Dataset*>& data, const HyperConfig& base,
                             const std::vector<std::uint64_t>& seeds, const std::vector<Variant>& variants,
                             const SplitRatios& ratios, std::size_t workers, Ledger* ledger,
                             const RunOptions& opts = {}) {
  AblationResult out;
  std::vector<AblationTask> tasks;
  for (const Dataset* d : data) {
    const std::string fp = dataset_fingerprint(*d);
    for (std::uint64_t s : seeds) {
      for (Variant v : variants) {
        HyperConfig c = base;
        c.seed = s;
        c.variant = v;
        tasks.push_back({d, fp, c});
      }
    }
  }
  std::map<std::string, RunRecord> existing;
  if (ledger) {
    for (auto& r : ledger->read()) existing.emplace(r.run_id, std::move(r));
  }
  out.records.resize(tasks.size());
  std::vector<std::uint8_t> fresh(tasks.size(), 1);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    const auto id = make_run_id(t.config, t.data->meta, t.fingerprint, t.config.seed, ratios);
    if (auto it = existing.find(id); it != existing.end() && it->second.test_metrics) {
      out.records[i] = it->second;
      fresh[i] = 0;
      out.notices.push_back("skipping duplicate run " + id + " (already in ledger)");
    }
  }
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    if (!fresh[i]) return;
    const auto& t = tasks[i];
    try {
      out.records[i] = run_single(t.config, *t.data, ratios, opts, t.fingerprint).record;
    } catch (const std::exception& e) {
      out.records[i] = failed_record(t.config, *t.data, t.fingerprint, ratios, e.what());
    }
  });
  if (ledger) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (fresh[i]) ledger->append(out.records[i]);
    }
  }
  std::vector<std::string> names;
  for (const Dataset* d : data) {
    if (std::find(names.begin(), names.end(), d->meta.name()) == names.end()) names.push_back(d->meta.name());
  }
  out.table_csv = ablation_table(out.records, names, variants);
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

enum class ReportKind { vary_k, fixed_ratio, vary_p, vary_e, ablation, fig_cf_rmse };

inline ReportKind parse_report_kind(const std::string& s) {
  if (s == "vary-k") return ReportKind::vary_k;
  if (s == "fixed-ratio") return ReportKind::fixed_ratio;
  if (s == "vary-p") return ReportKind::vary_p;
  if (s == "vary-e") return ReportKind::vary_e;
  if (s == "ablation") return ReportKind::ablation;
  if (s == "fig-cf-rmse") return ReportKind::fig_cf_rmse;
  throw ConfigError("unknown report kind '" + s + "' (expected vary-k, fixed-ratio, vary-p, vary-e, ablation or fig-cf-rmse)");
}

inline const char* to_string(ReportKind k) {
  switch (k) {
    case ReportKind::vary_k: return "vary-k";
    case ReportKind::fixed_ratio: return "fixed-ratio";
    case ReportKind::vary_p: return "vary-p";
    case ReportKind::vary_e: return "vary-e";
    case ReportKind::ablation: return "ablation";
    case ReportKind::fig_cf_rmse: return "fig-cf-rmse";
  }
  return "?";
}

// Row label of a record: the dataset name, qualified by P or E where the
// report varies them (e.g. Syn35/p100, Syn25/e6).
inline std::string report_label(const DatasetMeta& m, ReportKind kind) {
  switch (kind) {
    case ReportKind::vary_p: return m.name() + "/p" + std::to_string(m.p);
    case ReportKind::vary_e: return m.name() + "/e" + std::to_string(m.e_levels);
    default: return m.name();
  }
}

// Default rows of each report kind.
inline std::vector<std::string> default_report_rows(ReportKind kind) {
  switch (kind) {
    case ReportKind::vary_k: return {"Syn10", "Syn35", "Syn55", "Syn100"};
    case ReportKind::fixed_ratio: return {"Syn35", "Syn48", "Syn103", "Syn216"};
    case ReportKind::vary_p: return {"Syn35/p10", "Syn35/p50", "Syn35/p100", "Syn35/p500", "Syn35/p1000"};
    case ReportKind::vary_e: return {"Syn25/e3", "Syn25/e6", "Syn25/e8", "Syn25/e10"};
    case ReportKind::ablation: return {"Syn10", "Syn35", "Syn55", "Syn100"};
    case ReportKind::fig_cf_rmse: return {"Syn10"};
  }
  return {};
}

struct ReportRequest {
  ReportKind kind = ReportKind::vary_k;
  std::vector<std::string> rows;      // empty: the defaults for the kind
  std::vector<Variant> variants;      // empty: hici, or all four for ablation/figures
};

struct ReportOutput {
  std::string table_csv;
  std::optional<std::string> plot_csv;
  std::vector<std::string> missing;   // absent (row, variant) cells
};

inline ReportOutput make_report(std::vector<RunRecord> records, const ReportRequest& req) {
  const ReportKind kind = req.kind;
  const auto rows = req.rows.empty() ? default_report_rows(kind) : req.rows;
  std::vector<Variant> variants = req.variants;
  if (variants.empty()) {
    if (kind == ReportKind::ablation || kind == ReportKind::fig_cf_rmse) {
      variants.assign(std::begin(kAllVariants), std::end(kAllVariants));
    } else {
      variants = {Variant::hici};
    }
  }
  // Sorted, de-duplicated by id so the output does not depend on ledger order.
  std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) { return a.run_id < b.run_id; });
  records.erase(std::unique(records.begin(), records.end(),
                            [](const RunRecord& a, const RunRecord& b) { return a.run_id == b.run_id; }),
                records.end());
  auto usable = [&](const RunRecord& r, const std::string& row, Variant v) {
    return r.ok() && r.test_metrics && r.config.variant == v && report_label(r.meta, kind) == row;
  };
  auto select = [&](const std::string& row, Variant v) {
    std::vector<const RunRecord*> out;
    for (const auto& r : records) {
      if (usable(r, row, v)) out.push_back(&r);
    }
    return out;
  };

  ReportOutput out;
  for (const auto& row : rows) {
    for (Variant v : variants) {
      if (select(row, v).empty()) out.missing.push_back(row + " [" + to_string(v) + "]");
    }
  }
  if (!out.missing.empty()) return out;

  std::ostringstream os;
  auto metric_lists = [](const std::vector<const RunRecord*>& rs) {
    std::pair<std::vector<double>, std::vector<double>> m;
    for (const auto* r : rs) {
      if (auto x = primary_error(*r->test_metrics)) m.first.push_back(*x);
      if (auto x = ate_error(*r->test_metrics)) m.second.push_back(*x);
    }
    return m;
  };
  auto stats = [](const std::vector<double>& v) {
    if (v.empty()) return std::string(",");
    const MeanStd m = mean_std(v);
    return format_double(m.mean) + "," + format_double(m.std);
  };

  switch (kind) {
    case ReportKind::vary_k:
    case ReportKind::fixed_ratio: {
      if (kind == ReportKind::vary_k) {
        os << "dataset,n_over_k,pehe_sqrt_mean,pehe_sqrt_std,mape_ate_mean,mape_ate_std\n";
      } else {
        os << "dataset,n,k,n_over_k,pehe_sqrt_mean,pehe_sqrt_std,mape_ate_mean,mape_ate_std,runs\n";
      }
      for (const auto& row : rows) {
        const auto rs = select(row, variants.front());
        const auto& meta = rs.front()->meta;
        const auto [err, ate] = metric_lists(rs);
        const double ratio = static_cast<double>(meta.n) / static_cast<double>(meta.k);
        if (kind == ReportKind::vary_k) {
          os << row << ',' << fixed4(ratio) << ',' << stats(err) << ',' << stats(ate) << '\n';
        } else {
          os << row << ',' << meta.n << ',' << meta.k << ',' << fixed4(ratio) << ',' << stats(err) << ','
             << stats(ate) << ',' << rs.size() << '\n';
        }
      }
      break;
    }
    case ReportKind::vary_p: {
      os << "dataset,p,n,p_over_n,pehe_sqrt_mean,pehe_sqrt_std,mape_ate_mean,mape_ate_std\n";
      for (const auto& row : rows) {
        const auto rs = select(row, variants.front());
        const auto& meta = rs.front()->meta;
        const auto [err, ate] = metric_lists(rs);
        os << meta.name() << ',' << meta.p << ',' << meta.n << ','
           << format_double(static_cast<double>(meta.p) / static_cast<double>(meta.n)) << ',' << stats(err) << ','
           << stats(ate) << '\n';
      }
      break;
    }
    case ReportKind::vary_e: {
      os << "dataset,e_levels,mise_sqrt_mean,mise_sqrt_std,mape_ate_dos_mean,mape_ate_dos_std\n";
      for (const auto& row : rows) {
        const auto rs = select(row, variants.front());
        const auto& meta = rs.front()->meta;
        const auto [err, ate] = metric_lists(rs);
        os << meta.name() << ',' << meta.e_levels << ',' << stats(err) << ',' << stats(ate) << '\n';
      }
      break;
    }
    case ReportKind::ablation: {
      std::vector<RunRecord> selected;
      for (const auto& r : records) {
        if (r.ok() && r.test_metrics) selected.push_back(r);
      }
      os << ablation_table(selected, rows, variants);
      break;
    }
    case ReportKind::fig_cf_rmse: {
      // Table: final counterfactual RMSE per (dataset, variant); plot: mean
      // over seeds per epoch, one row per (epoch, variant).
      os << "dataset,variant,runs,final_cf_rmse_mean,final_cf_rmse_std\n";
      std::ostringstream plot;
      plot << "x,y,series\n";
      for (const auto& row : rows) {
        for (Variant v : variants) {
          const auto rs = select(row, v);
          std::vector<double> finals;
          std::size_t epochs = 0;
          for (const auto* r : rs) {
            epochs = std::max(epochs, r->cf_rmse_curve.size());
            if (r->convergence_epoch >= 1 && r->convergence_epoch <= r->cf_rmse_curve.size()) {
              if (const auto& x = r->cf_rmse_curve[r->convergence_epoch - 1]) finals.push_back(*x);
            }
          }
          os << row << ',' << to_string(v) << ',' << rs.size() << ',' << stats(finals) << '\n';
          const std::string series = rows.size() > 1 ? row + "/" + to_string(v) : std::string(to_string(v));
          for (std::size_t ep = 0; ep < epochs; ++ep) {
            std::vector<double> ys;
            for (const auto* r : rs) {
              if (ep < r->cf_rmse_curve.size() && r->cf_rmse_curve[ep]) ys.push_back(*r->cf_rmse_curve[ep]);
            }
            if (ys.empty()) continue;
            plot << (ep + 1) << ',' << format_double(mean_std(ys).mean) << ',' << series << '\n';
          }
        }
      }
      out.plot_csv = plot.str();
      break;
    }
  }
  out.table_csv = os.str();
  return out;
}

}  // namespace hici
