// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-disk dataset layout (one directory):
//   covariates.csv       header x1..xP, one row per sample
//   assignments.csv      header t,e,y with one-based t and e
//   meta.json            DatasetMeta
//   counterfactuals.csv  header n,k,e,y, every (n, k, e) cell (generated data only)

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "hici/dataset.hpp"
#include "hici/error.hpp"

namespace hici {

inline constexpr const char* kCovariatesFile = "covariates.csv";
inline constexpr const char* kAssignmentsFile = "assignments.csv";
inline constexpr const char* kMetaFile = "meta.json";
inline constexpr const char* kCounterfactualsFile = "counterfactuals.csv";

// Shortest representation that round-trips exactly.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline double parse_real(std::string_view tok, const std::string& src, std::size_t line) {
  tok = trim(tok);
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw ParseError(src, line, "expected a number, got '" + std::string(tok) + "'");
  }
  return v;
}

inline long long parse_int(std::string_view tok, const std::string& src, std::size_t line) {
  tok = trim(tok);
  long long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw ParseError(src, line, "expected an integer, got '" + std::string(tok) + "'");
  }
  return v;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return in;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline nlohmann::ordered_json meta_to_json(const DatasetMeta& m) {
  nlohmann::ordered_json j;
  j["n"] = m.n;
  j["p"] = m.p;
  j["k"] = m.k;
  j["e_levels"] = m.e_levels;
  j["n_confounders"] = m.n_confounders;
  j["kappa"] = m.kappa;
  j["sigma"] = m.sigma;
  j["seed"] = m.seed;
  j["source"] = to_string(m.source);
  j["dosage_grid"] = m.dosage_grid;
  j["sparsity"] = m.sparsity;
  j["nonlinearity"] = m.nonlinearity;
  j["confound_dosage"] = m.confound_dosage;
  return j;
}

inline DatasetMeta meta_from_json(const nlohmann::json& j) {
  static const char* required[] = {"n", "p", "k", "e_levels", "n_confounders", "kappa",
                                   "sigma", "seed", "source", "dosage_grid"};
  static const char* optional[] = {"sparsity", "nonlinearity", "confound_dosage"};
  if (!j.is_object()) throw ParseError("metadata must be a JSON object");
  for (const char* key : required) {
    if (!j.contains(key)) throw ParseError(std::string("metadata is missing key '") + key + "'");
  }
  for (const auto& [key, _] : j.items()) {
    const bool known = std::find(std::begin(required), std::end(required), key) != std::end(required) ||
                       std::find(std::begin(optional), std::end(optional), key) != std::end(optional);
    if (!known) throw ParseError("metadata has unknown key '" + key + "'");
  }
  DatasetMeta m;
  try {
    m.n = j.at("n").get<std::size_t>();
    m.p = j.at("p").get<std::size_t>();
    m.k = j.at("k").get<std::size_t>();
    m.e_levels = j.at("e_levels").get<std::size_t>();
    m.n_confounders = j.at("n_confounders").get<std::size_t>();
    m.kappa = j.at("kappa").get<double>();
    m.sigma = j.at("sigma").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.source = parse_source(j.at("source").get<std::string>());
    m.dosage_grid = j.at("dosage_grid").get<std::vector<double>>();
    if (j.contains("sparsity")) m.sparsity = j.at("sparsity").get<double>();
    if (j.contains("nonlinearity")) m.nonlinearity = j.at("nonlinearity").get<double>();
    if (j.contains("confound_dosage")) m.confound_dosage = j.at("confound_dosage").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("metadata: ") + e.what());
  }
  return m;
}

inline DatasetMeta load_meta(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return meta_from_json(j);
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  d.validate();
  std::filesystem::create_directories(dir);
  const auto p = static_cast<std::size_t>(d.x.cols());

  std::string cov;
  for (std::size_t c = 0; c < p; ++c) cov += (c ? ",x" : "x") + std::to_string(c + 1);
  cov += '\n';
  for (Index r = 0; r < d.x.rows(); ++r) {
    for (Index c = 0; c < d.x.cols(); ++c) {
      if (c) cov += ',';
      cov += format_double(d.x(r, c));
    }
    cov += '\n';
  }
  detail::write_file(dir / kCovariatesFile, cov);

  std::string asg = "t,e,y\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    asg += std::to_string(d.t[i] + 1) + ',' + std::to_string(d.e[i] + 1) + ',' + format_double(d.y[i]) + '\n';
  }
  detail::write_file(dir / kAssignmentsFile, asg);

  detail::write_file(dir / kMetaFile, meta_to_json(d.meta).dump(2) + "\n");

  if (d.y_full) {
    std::string cf = "n,k,e,y\n";
    const auto& yf = *d.y_full;
    for (std::size_t i = 0; i < yf.samples(); ++i) {
      for (std::size_t k = 0; k < yf.treatments(); ++k) {
        for (std::size_t e = 0; e < yf.levels(); ++e) {
          cf += std::to_string(i + 1) + ',' + std::to_string(k + 1) + ',' + std::to_string(e + 1) + ',' +
                format_double(yf(i, k, e)) + '\n';
        }
      }
    }
    detail::write_file(dir / kCounterfactualsFile, cf);
  }
}

namespace detail {

inline Matrix read_covariates(const std::filesystem::path& path, std::optional<std::size_t> expect_p) {
  auto in = open_in(path);
  const std::string src = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(src, 1, "missing header");
  const auto header = split_csv(trim(line));
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (trim(header[c]) != "x" + std::to_string(c + 1)) {
      throw ParseError(src, 1, "header column " + std::to_string(c + 1) + " should be x" + std::to_string(c + 1));
    }
  }
  const std::size_t p = header.size();
  if (expect_p && *expect_p != p) {
    throw ConsistencyError(src + ": header has " + std::to_string(p) + " columns but metadata says p = " +
                           std::to_string(*expect_p));
  }
  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto toks = split_csv(body);
    if (toks.size() != p) {
      throw ParseError(src, lineno, "expected " + std::to_string(p) + " columns, found " + std::to_string(toks.size()));
    }
    for (auto tok : toks) values.push_back(parse_real(tok, src, lineno));
    ++rows;
  }
  Matrix x(static_cast<Index>(rows), static_cast<Index>(p));
  std::copy(values.begin(), values.end(), x.data());
  return x;
}

struct Assignments {
  std::vector<int> t;
  std::vector<int> e;
  std::vector<double> y;
};

inline Assignments read_assignments(const std::filesystem::path& path) {
  auto in = open_in(path);
  const std::string src = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(src, 1, "missing header");
  const auto header = split_csv(trim(line));
  if (header.size() != 3 || trim(header[0]) != "t" || trim(header[1]) != "e" || trim(header[2]) != "y") {
    throw ParseError(src, 1, "header must be t,e,y");
  }
  Assignments a;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto toks = split_csv(body);
    if (toks.size() != 3) throw ParseError(src, lineno, "expected 3 columns");
    const auto t = parse_int(toks[0], src, lineno);
    const auto e = parse_int(toks[1], src, lineno);
    if (t < 1) throw ParseError(src, lineno, "treatment must be >= 1");
    if (e < 1) throw ParseError(src, lineno, "dosage level must be >= 1");
    a.t.push_back(static_cast<int>(t - 1));
    a.e.push_back(static_cast<int>(e - 1));
    a.y.push_back(parse_real(toks[2], src, lineno));
  }
  return a;
}

}  // namespace detail

// Loads factual data only; counterfactual metrics are unavailable for the
// result. With `meta_path`, K, E and P are checked against the metadata;
// otherwise they are inferred from the files.
inline Dataset load_external(const std::filesystem::path& covariates_path,
                             const std::filesystem::path& assignments_path,
                             const std::optional<std::filesystem::path>& meta_path = std::nullopt) {
  std::optional<DatasetMeta> meta;
  if (meta_path) meta = load_meta(*meta_path);
  Dataset d;
  d.x = detail::read_covariates(covariates_path, meta ? std::optional<std::size_t>(meta->p) : std::nullopt);
  auto a = detail::read_assignments(assignments_path);
  if (a.t.size() != static_cast<std::size_t>(d.x.rows())) {
    throw ConsistencyError("covariates have " + std::to_string(d.x.rows()) + " rows but assignments have " +
                           std::to_string(a.t.size()));
  }
  d.t = std::move(a.t);
  d.e = std::move(a.e);
  d.y = std::move(a.y);
  if (meta) {
    d.meta = *meta;
    if (d.meta.n != d.size()) {
      throw ConsistencyError("metadata says n = " + std::to_string(d.meta.n) + " but files hold " +
                             std::to_string(d.size()) + " samples");
    }
  } else {
    d.meta = DatasetMeta{};
    d.meta.source = DataSource::external;
    d.meta.n = d.size();
    d.meta.p = static_cast<std::size_t>(d.x.cols());
    d.meta.n_confounders = 0;
    d.meta.kappa = 0.0;
    d.meta.sigma = 0.0;
    d.meta.seed = 0;
    int kmax = 0;
    int emax = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      kmax = std::max(kmax, d.t[i] + 1);
      emax = std::max(emax, d.e[i] + 1);
    }
    d.meta.k = static_cast<std::size_t>(kmax);
    d.meta.e_levels = static_cast<std::size_t>(std::max(emax, 1));
    d.meta.dosage_grid = uniform_dosage_grid(d.meta.e_levels);
  }
  d.validate();
  return d;
}

inline OutcomeTensor load_counterfactuals(const std::filesystem::path& path, const DatasetMeta& meta) {
  auto in = detail::open_in(path);
  const std::string src = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(src, 1, "missing header");
  if (detail::trim(line) != "n,k,e,y") throw ParseError(src, 1, "header must be n,k,e,y");
  OutcomeTensor yf(meta.n, meta.k, meta.e_levels, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::uint8_t> seen(yf.size(), 0);
  std::size_t lineno = 1;
  std::size_t filled = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto toks = detail::split_csv(body);
    if (toks.size() != 4) throw ParseError(src, lineno, "expected 4 columns");
    const auto n = detail::parse_int(toks[0], src, lineno);
    const auto k = detail::parse_int(toks[1], src, lineno);
    const auto e = detail::parse_int(toks[2], src, lineno);
    if (n < 1 || static_cast<std::size_t>(n) > meta.n || k < 1 || static_cast<std::size_t>(k) > meta.k || e < 1 ||
        static_cast<std::size_t>(e) > meta.e_levels) {
      throw ConsistencyError(src + ":" + std::to_string(lineno) + ": cell index out of range");
    }
    const auto idx = ((static_cast<std::size_t>(n) - 1) * meta.k + static_cast<std::size_t>(k) - 1) * meta.e_levels +
                     static_cast<std::size_t>(e) - 1;
    if (seen[idx]) throw ConsistencyError(src + ":" + std::to_string(lineno) + ": duplicate cell");
    seen[idx] = 1;
    ++filled;
    yf((static_cast<std::size_t>(n) - 1), static_cast<std::size_t>(k) - 1, static_cast<std::size_t>(e) - 1) =
        detail::parse_real(toks[3], src, lineno);
  }
  if (filled != yf.size()) {
    throw ConsistencyError(src + ": holds " + std::to_string(filled) + " of " + std::to_string(yf.size()) + " cells");
  }
  return yf;
}

// Loads a dataset directory, including the counterfactual table when present.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d = load_external(dir / kCovariatesFile, dir / kAssignmentsFile, dir / kMetaFile);
  const auto cf = dir / kCounterfactualsFile;
  if (std::filesystem::exists(cf)) {
    d.y_full = load_counterfactuals(cf, d.meta);
    d.validate();
  }
  return d;
}

}  // namespace hici
