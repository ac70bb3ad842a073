// SPDX-License-Identifier: Apache-2.0
// hici: dataset generation, training, grid search, evaluation, ablation and
// report tables from the run ledger.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hici/hici.hpp"

namespace fs = std::filesystem;
using namespace hici;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kIncomplete = 4 };

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + item + "' in --seeds");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

std::vector<Variant> parse_variants(const std::string& s) {
  std::vector<Variant> out;
  for (const auto& item : split_list(s)) out.push_back(parse_variant(item));
  return out;
}

HyperConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

fs::path ledger_path(const std::string& flag, const std::string& out) {
  if (!flag.empty()) return flag;
  return default_ledger_path(out.empty() ? std::nullopt : std::optional<fs::path>(out));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string dgp = "syn";
  std::size_t n = 1000;
  std::size_t p = 10;
  std::size_t k = 4;
  std::size_t e = 1;
  std::size_t confounders = 5;
  double kappa = 1.0;
  double sigma = 0.1;
  std::uint64_t seed = 1;
  double sparsity = 0.9;
  double nonlinearity = 1.0;
  bool confound_dosage = false;
  std::string out = "data";
  bool force = false;
};

int cmd_gen(const GenArgs& a) {
  DatasetMeta m;
  m.source = parse_source(a.dgp);
  if (m.source == DataSource::external) throw ConfigError("--dgp must be syn or news-like");
  m.n = a.n;
  m.p = a.p;
  m.k = a.k;
  m.e_levels = a.e;
  m.n_confounders = a.confounders;
  m.kappa = a.kappa;
  m.sigma = a.sigma;
  m.seed = a.seed;
  m.sparsity = a.sparsity;
  m.nonlinearity = a.nonlinearity;
  m.confound_dosage = a.confound_dosage;
  m.dosage_grid = uniform_dosage_grid(a.e);
  m.validate();
  const fs::path dir = fs::path(a.out) / m.name() / ("seed" + std::to_string(m.seed));
  if (non_empty_dir(dir) && !a.force) {
    std::cerr << "refusing to overwrite non-empty " << dir.string() << " (use --force)\n";
    return kUsage;
  }
  const Dataset d = generate(m);
  fs::create_directories(dir);
  save_dataset(d, dir);
  std::cout << dir.string() << '\n';
  return kOk;
}

struct RunArgs {
  std::vector<std::string> data;
  std::string config;
  std::string grid;
  std::optional<std::uint64_t> seed;
  std::string seeds = "1,2,3,4,5";
  std::string variants = "hici,onn,deeptreat_plus,l21_ae";
  std::size_t workers = 1;
  std::string out;
  std::string ledger;
  std::size_t max_cells = kDefaultMaxCells;
  std::string checkpoint;
  std::string loss_log;
  std::string kind;
  std::string rows;
};

RunOptions run_options(const RunArgs& a) {
  RunOptions o;
  if (!a.out.empty()) o.checkpoint_dir = fs::path(a.out) / "checkpoints";
  return o;
}

const std::string& single_data(const RunArgs& a) {
  if (a.data.size() != 1) throw ConfigError("--data must name exactly one dataset directory");
  return a.data.front();
}

int cmd_train(const RunArgs& a) {
  HyperConfig c = load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  const Dataset d = load_dataset(single_data(a));
  c.validate_for(d.meta.p);
  Ledger ledger(ledger_path(a.ledger, a.out));
  const std::string fp = dataset_fingerprint(d);
  const std::string id = make_run_id(c, d.meta, fp, c.seed, kDefaultRatios);
  for (const auto& r : ledger.read()) {
    if (r.run_id == id) {
      std::cerr << "skipping duplicate run " << id << " (already in " << ledger.path().string() << ")\n";
      std::cout << r.to_json().dump(2) << '\n';
      return r.ok() ? kOk : kNumeric;
    }
  }
  RunOutput o = run_single(c, d, kDefaultRatios, run_options(a), fp);
  if (!a.loss_log.empty() && o.result) {
    std::ostringstream os;
    write_loss_log(os, o.result->curve);
    write_text(a.loss_log, os.str());
  }
  ledger.append(o.record);
  std::cout << o.record.to_json().dump(2) << '\n';
  if (!o.record.ok()) {
    std::cerr << "training failed: " << o.record.error << '\n';
    return kNumeric;
  }
  return kOk;
}

int cmd_gridsearch(const RunArgs& a) {
  if (a.grid.empty()) throw ConfigError("--grid is required");
  HyperGrid grid = HyperGrid::load(a.grid);
  if (a.seed) {
    HyperConfig base = grid.base();
    base.seed = *a.seed;
    grid.set_base(base);
  }
  const std::size_t total = grid.size();
  std::cerr << "grid: " << (total == SIZE_MAX ? std::string(">= 2^64") : std::to_string(total)) << " cells\n";
  const auto cells = grid.expand(a.max_cells);
  const Dataset d = load_dataset(single_data(a));
  Ledger ledger(ledger_path(a.ledger, a.out));
  const GridResult g = grid_search(cells, d, a.workers, &ledger, run_options(a));
  for (const auto& n : g.notices) std::cerr << n << '\n';
  std::size_t failed = 0;
  for (const auto& r : g.records) failed += r.ok() ? 0 : 1;
  if (failed) std::cerr << failed << " of " << g.records.size() << " cells failed\n";
  if (!g.winner) {
    std::cerr << "all grid cells failed\n";
    return kNumeric;
  }
  std::cout << g.records[*g.winner].to_json().dump(2) << '\n';
  return kOk;
}

int cmd_evaluate(const RunArgs& a) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint c = load_checkpoint(a.checkpoint);
  const Dataset d = load_dataset(single_data(a));
  if (d.meta.p != c.covariates || d.meta.k != c.treatments || d.meta.e_levels != c.levels) {
    throw ConsistencyError("dataset shape does not match the checkpoint");
  }
  const auto fp = c.extra.value("dataset_fingerprint", std::string());
  if (!fp.empty() && fp != dataset_fingerprint(d)) {
    throw ConsistencyError("dataset differs from the one the checkpoint was trained on");
  }
  const auto seed = c.extra.value("split_seed", c.config.seed);
  const SplitRatios ratios = c.extra.contains("split_ratios") ? parse_ratios(c.extra.at("split_ratios")) : kDefaultRatios;
  const SplitData parts = split_data(d, ratios, seed);
  const MetricsReport m = test_metrics(c.params, parts.test);
  const std::string text = m.to_json().dump(2);
  if (!a.out.empty()) write_text(fs::path(a.out) / "metrics.json", text + "\n");
  std::cout << text << '\n';
  return kOk;
}

int cmd_ablate(const RunArgs& a) {
  if (a.data.empty()) throw ConfigError("--data is required");
  const HyperConfig base = load_config(a.config);
  std::vector<Dataset> data;
  for (const auto& dir : a.data) data.push_back(load_dataset(dir));
  std::vector<const Dataset*> ptrs;
  for (const auto& d : data) {
    base.validate_for(d.meta.p);
    ptrs.push_back(&d);
  }
  const auto seeds = a.seed ? std::vector<std::uint64_t>{*a.seed} : parse_seeds(a.seeds);
  const auto variants = parse_variants(a.variants);
  if (variants.empty()) throw ConfigError("--variants is empty");
  Ledger ledger(ledger_path(a.ledger, a.out));
  const AblationResult r = ablate(ptrs, base, seeds, variants, kDefaultRatios, a.workers, &ledger, run_options(a));
  for (const auto& n : r.notices) std::cerr << n << '\n';
  if (!a.out.empty()) write_text(fs::path(a.out) / "ablation.csv", r.table_csv);
  std::cout << r.table_csv;
  for (const auto& rec : r.records) {
    if (!rec.ok()) {
      std::cerr << "run " << rec.run_id << " failed: " << rec.error << '\n';
      return kNumeric;
    }
  }
  return kOk;
}

int cmd_report(const RunArgs& a) {
  if (a.kind.empty()) throw ConfigError("--kind is required");
  ReportRequest req;
  req.kind = parse_report_kind(a.kind);
  req.rows = split_list(a.rows);
  if (!a.variants.empty()) req.variants = parse_variants(a.variants);
  const Ledger ledger(ledger_path(a.ledger, a.out));
  const ReportOutput r = make_report(ledger.read(), req);
  if (!r.missing.empty()) {
    std::cerr << "report " << a.kind << " is missing " << r.missing.size() << " cell(s):\n";
    for (const auto& m : r.missing) std::cerr << "  " << m << '\n';
    return kIncomplete;
  }
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / (a.kind + ".csv"), r.table_csv);
    if (r.plot_csv) write_text(fs::path(a.out) / (a.kind + "_plot.csv"), *r.plot_csv);
  }
  std::cout << r.table_csv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hi-CI counterfactual regression experiments"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
  g->add_option("--dgp", gen.dgp, "syn or news-like")->capture_default_str();
  g->add_option("--n", gen.n, "samples")->capture_default_str();
  g->add_option("--p", gen.p, "covariates")->capture_default_str();
  g->add_option("--k", gen.k, "treatments")->capture_default_str();
  g->add_option("--e", gen.e, "dosage levels")->capture_default_str();
  g->add_option("--confounders", gen.confounders, "confounding covariates (topics for news-like)")->capture_default_str();
  g->add_option("--kappa", gen.kappa, "confounding strength")->capture_default_str();
  g->add_option("--sigma", gen.sigma, "outcome noise sd")->capture_default_str();
  g->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  g->add_option("--sparsity", gen.sparsity, "news-like target zero fraction")->capture_default_str();
  g->add_option("--nonlinearity", gen.nonlinearity, "scale of the tanh outcome term")->capture_default_str();
  g->add_flag("--confound-dosage", gen.confound_dosage, "let covariates drive dosage too");
  g->add_option("--out", gen.out, "output root")->capture_default_str();
  g->add_flag("--force", gen.force, "overwrite an existing dataset directory");

  RunArgs run;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", run.out, "output directory (checkpoints, tables, default ledger)");
    sub->add_option("--ledger", run.ledger, "ledger path (default: $HICI_LEDGER or <out>/ledger.jsonl)");
  };
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { run.seed = v; }, "run seed");
  };

  auto* tr = app.add_subcommand("train", "train one configuration");
  tr->add_option("--data", run.data, "dataset directory")->required();
  tr->add_option("--config", run.config, "config JSON");
  tr->add_option("--loss-log", run.loss_log, "per-epoch loss CSV");
  add_seed(tr);
  add_common(tr);

  auto* gs = app.add_subcommand("gridsearch", "train every grid cell and keep the best validation loss");
  gs->add_option("--data", run.data, "dataset directory")->required();
  gs->add_option("--grid", run.grid, "grid JSON")->required();
  gs->add_option("--workers", run.workers, "parallel workers")->capture_default_str();
  gs->add_option("--max-cells", run.max_cells, "largest grid allowed")->capture_default_str();
  add_seed(gs);
  add_common(gs);

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on its test partition");
  ev->add_option("--data", run.data, "dataset directory")->required();
  ev->add_option("--checkpoint", run.checkpoint, "checkpoint file")->required();
  ev->add_option("--out", run.out, "write metrics.json here");

  auto* ab = app.add_subcommand("ablate", "compare loss variants over shared seeds and splits");
  ab->add_option("--data", run.data, "dataset directories")->required();
  ab->add_option("--config", run.config, "base config JSON");
  ab->add_option("--seeds", run.seeds, "comma-separated seeds")->capture_default_str();
  ab->add_option("--variants", run.variants, "comma-separated variants")->capture_default_str();
  ab->add_option("--workers", run.workers, "parallel workers")->capture_default_str();
  add_seed(ab);
  add_common(ab);

  auto* rp = app.add_subcommand("report", "build a table from the ledger");
  rp->add_option("--kind", run.kind, "vary-k, fixed-ratio, vary-p, vary-e, ablation or fig-cf-rmse")->required();
  rp->add_option("--rows", run.rows, "comma-separated row labels (default: the table's datasets)");
  rp->add_option("--variants", run.variants, "comma-separated variants");
  add_common(rp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  // The ablate default lists every variant; report uses its own default.
  if (rp->parsed() && rp->count("--variants") == 0) run.variants.clear();

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (tr->parsed()) return cmd_train(run);
    if (gs->parsed()) return cmd_gridsearch(run);
    if (ev->parsed()) return cmd_evaluate(run);
    if (ab->parsed()) return cmd_ablate(run);
    if (rp->parsed()) return cmd_report(run);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
