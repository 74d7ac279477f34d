#pragma once

// Run configuration: a flat key=value text file. Every key is optional and
// falls back to the defaults of AggregatorConfig, LossConfig and TrainConfig.
// Relative paths are resolved against the config file's directory.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "vpr/aggregator.hpp"
#include "vpr/error.hpp"
#include "vpr/io.hpp"
#include "vpr/loss.hpp"
#include "vpr/trainer.hpp"

namespace vpr {

struct RunConfig {
  AggregatorConfig aggregator;
  LossConfig loss;
  TrainConfig train;
  std::filesystem::path manifest;
  std::filesystem::path out = "run";
};

inline MiningMode parse_mining(const std::string& v) {
  if (v == "all_pairs") return MiningMode::kAllPairs;
  if (v == "hardest_margin") return MiningMode::kHardestMargin;
  throw Error("unknown mining mode '" + v + "' (expected all_pairs or hardest_margin)");
}

inline RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir) {
  RunConfig rc;
  std::optional<std::size_t> descriptor_length;
  const auto resolve = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };
  for (const auto& [k, v] : parse_key_values(in)) {
    using namespace detail;
    if (k == "mixer_depth") rc.aggregator.mixer_depth = parse_size(k, v);
    else if (k == "depth_out") rc.aggregator.depth_out = parse_size(k, v);
    else if (k == "row_out") rc.aggregator.row_out = parse_size(k, v);
    else if (k == "hidden_ratio") rc.aggregator.hidden_ratio = parse_size(k, v);
    else if (k == "block_norm") rc.aggregator.block_norm = parse_bool(k, v);
    else if (k == "descriptor_length") descriptor_length = parse_size(k, v);
    else if (k == "alpha") rc.loss.alpha = parse_double(k, v);
    else if (k == "beta") rc.loss.beta = parse_double(k, v);
    else if (k == "lambda") rc.loss.lambda = parse_double(k, v);
    else if (k == "mining") rc.loss.mining = parse_mining(v);
    else if (k == "epsilon") rc.loss.epsilon = parse_double(k, v);
    else if (k == "places_per_batch") rc.train.places_per_batch = parse_size(k, v);
    else if (k == "images_per_place") rc.train.images_per_place = parse_size(k, v);
    else if (k == "epochs") rc.train.epochs = parse_size(k, v);
    else if (k == "lr0") rc.train.lr0 = parse_double(k, v);
    else if (k == "lr_divisor") rc.train.lr_divisor = parse_double(k, v);
    else if (k == "lr_period_epochs") rc.train.lr_period_epochs = parse_size(k, v);
    else if (k == "momentum") rc.train.momentum = parse_double(k, v);
    else if (k == "weight_decay") rc.train.weight_decay = parse_double(k, v);
    else if (k == "seed") rc.train.seed = parse_size(k, v);
    else if (k == "manifest") rc.manifest = resolve(v);
    else if (k == "out") rc.out = resolve(v);
    else throw Error("unknown config key '" + k + "'");
  }
  if (descriptor_length && *descriptor_length != rc.aggregator.descriptor_length()) {
    throw Error("descriptor_length " + std::to_string(*descriptor_length) +
                " does not equal depth_out * row_out = " +
                std::to_string(rc.aggregator.descriptor_length()));
  }
  if (!(rc.loss.alpha > 0.0) || !(rc.loss.beta > 0.0)) {
    throw Error("alpha and beta must be positive");
  }
  validate_train_config(rc.train);
  if (rc.out.is_relative()) rc.out = base_dir / rc.out;
  return rc;
}

inline RunConfig parse_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return parse_run_config(in, path.parent_path());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.reason(), path.string());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace vpr
