// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file: one line of JSON header, a newline, then every parameter
// as a little-endian float64 in declaration order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hici/error.hpp"
#include "hici/model.hpp"

namespace hici {

inline constexpr const char* kCheckpointFormat = "hici-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  HyperConfig config;
  HiCiParams params;
  std::size_t covariates = 0;
  std::size_t treatments = 0;
  std::size_t levels = 0;
  std::size_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffU) << (8 * (7 - i));
    return out;
  }
}

inline nlohmann::ordered_json block_list(const HiCiParams& w) {
  auto blocks = nlohmann::ordered_json::array();
  for_each_tensor(w, [&](const std::string& name, std::span<const double> v) {
    blocks.push_back({{"name", name}, {"size", v.size()}});
  });
  return blocks;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  c.params.validate();
  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(c.config);
  header["seed"] = c.config.seed;
  header["epoch"] = c.epoch;
  header["shapes"] = {{"covariates", c.covariates}, {"treatments", c.treatments}, {"levels", c.levels},
                      {"rep_dim", c.params.rep_dim()}, {"embed_dim", c.params.embed_dim()},
                      {"head_on_raw", c.params.head_on_raw}};
  header["blocks"] = detail::block_list(c.params);
  header["extra"] = c.extra;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for_each_tensor(c.params, [&](const std::string&, std::span<const double> v) {
    for (double x : v) {
      const std::uint64_t bits = detail::to_little(std::bit_cast<std::uint64_t>(x));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.write(buf, 8);
    }
  });
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": missing checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat || header.value("version", 0) != kCheckpointVersion) {
    throw ParseError(path.string() + ": not a version-1 hici checkpoint");
  }

  Checkpoint c;
  try {
    c.config = config_from_json(header.at("config"));
    const auto& shapes = header.at("shapes");
    c.covariates = shapes.at("covariates").get<std::size_t>();
    c.treatments = shapes.at("treatments").get<std::size_t>();
    c.levels = shapes.at("levels").get<std::size_t>();
    c.epoch = header.at("epoch").get<std::size_t>();
    c.extra = header.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": incomplete checkpoint header: " + e.what());
  }
  c.params = init_hici(c.config, c.covariates, c.treatments, c.levels);

  // The header's block list must match the shapes implied by config and dims.
  const auto expected = detail::block_list(c.params);
  const auto& blocks = header.at("blocks");
  if (blocks.size() != expected.size()) {
    throw ConsistencyError(path.string() + ": checkpoint has " + std::to_string(blocks.size()) +
                           " parameter blocks, config implies " + std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto name = blocks[i].at("name").get<std::string>();
    if (name != expected[i].at("name").get<std::string>() ||
        blocks[i].at("size").get<std::size_t>() != expected[i].at("size").get<std::size_t>()) {
      throw ConsistencyError(path.string() + ": block " + name +
                             " does not match the configured architecture");
    }
  }

  for_each_tensor(c.params, [&](const std::string& name, std::span<double> v) {
    for (double& x : v) {
      char buf[8];
      if (!in.read(buf, 8)) throw ParseError(path.string() + ": payload truncated in block " + name);
      std::uint64_t bits = 0;
      std::memcpy(&bits, buf, 8);
      x = std::bit_cast<double>(detail::to_little(bits));
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(path.string() + ": trailing bytes after payload");
  return c;
}

}  // namespace hici
