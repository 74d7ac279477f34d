#pragma once

// Command-line surface: aggregate, train, index, evaluate, inspect.

#include <filesystem>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vpr/aggregator.hpp"
#include "vpr/config.hpp"
#include "vpr/io.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/trainer.hpp"

namespace vpr {

namespace detail {

inline std::vector<ImageRecord> select_split(const std::vector<ImageRecord>& records,
                                             const std::string& split) {
  if (split.empty()) return records;
  const auto s = parse_split(split);
  if (!s) throw Error("unknown split '" + split + "'");
  return filter_split(records, *s);
}

inline Tensor<float> describe(const ImageRecord& r, const AggregatorModel<float>& model) {
  try {
    return aggregate(read_tensor(r.features_path), model);
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw Error(r.features_path.string() + ": " + e.what());
  }
}

}  // namespace detail

// Returns the process exit code. All output goes to the given streams.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Visual place recognition engine: feature-mixer aggregation, "
               "multi-similarity training and geotagged retrieval"};
  app.require_subcommand(1);

  std::string checkpoint, manifest, out_path, split, config_path, index_dir, queries;
  std::uint64_t seed = 0;
  double threshold_m = kDefaultThresholdM;
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<std::string> inspect_files;

  auto* agg = app.add_subcommand("aggregate", "Write one descriptor file per manifest record");
  agg->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  agg->add_option("--manifest", manifest, "JSON-Lines manifest")->required();
  agg->add_option("--out", out_path, "Output directory")->required();
  agg->add_option("--split", split, "Only records of this split (train|database|query)");

  auto* trn = app.add_subcommand("train", "Train the aggregation head");
  trn->add_option("--config", config_path, "key=value run config")->required();
  auto* seed_opt = trn->add_option("--seed", seed, "Override the config seed");
  auto* train_out = trn->add_option("--out", out_path, "Override the output directory");

  auto* idx = app.add_subcommand("index", "Build a retrieval index from the database split");
  idx->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  idx->add_option("--manifest", manifest, "JSON-Lines manifest")->required();
  idx->add_option("--out", out_path, "Index directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Recall@k of query records against an index");
  ev->add_option("--index", index_dir, "Index directory")->required();
  ev->add_option("--queries", queries, "Manifest with query records")->required();
  ev->add_option("--threshold-m", threshold_m, "Success distance threshold in meters")
      ->check(CLI::PositiveNumber);
  ev->add_option("--k", ks, "Cutoffs (repeatable)")->check(CLI::PositiveNumber);
  ev->add_option("--out", out_path, "Also write the report JSON here");

  auto* insp = app.add_subcommand("inspect", "Print tensor file headers");
  insp->add_option("files", inspect_files, "Tensor files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    err << app.help();
    return 2;
  }

  try {
    if (*agg) {
      const auto model = load_checkpoint(checkpoint);
      const auto records = detail::select_split(parse_manifest(manifest), split);
      // Validate every input before writing anything.
      std::vector<Tensor<float>> descriptors;
      for (const auto& r : records) descriptors.push_back(detail::describe(r, model));
      fs::create_directories(out_path);
      for (std::size_t i = 0; i < records.size(); ++i) {
        write_tensor(fs::path(out_path) / (records[i].image_id + ".vprt"), descriptors[i]);
      }
      out << "wrote " << records.size() << " descriptors to " << out_path << "\n";
    } else if (*trn) {
      RunConfig rc = parse_run_config(config_path);
      if (*seed_opt) rc.train.seed = seed;
      if (*train_out) rc.out = out_path;
      if (rc.manifest.empty()) throw Error("config does not name a manifest");
      const auto result = train(parse_manifest(rc.manifest), rc.aggregator, rc.loss, rc.train, rc.out);
      out << "trained " << rc.train.epochs << " epochs";
      if (!result.epoch_mean_loss.empty()) {
        out << ", first-epoch loss " << result.epoch_mean_loss.front() << ", final-epoch loss "
            << result.epoch_mean_loss.back();
      }
      out << "\ncheckpoint: " << (rc.out / "checkpoint").string() << "\n";
    } else if (*idx) {
      const auto model = load_checkpoint(checkpoint);
      const auto db = filter_split(parse_manifest(manifest), Split::kDatabase);
      if (db.empty()) throw InsufficientDataError("manifest has no database records");
      RetrievalIndex index(model.config.descriptor_length());
      for (const auto& r : db) index.add(r.image_id, r.tag, detail::describe(r, model).data());
      save_index(out_path, index);
      save_checkpoint(fs::path(out_path) / "model", model);
      out << "indexed " << index.size() << " database records into " << out_path << "\n";
    } else if (*ev) {
      const auto model = load_checkpoint(fs::path(index_dir) / "model");
      const RetrievalIndex index = load_index(index_dir);
      auto records = filter_split(parse_manifest(queries), Split::kQuery);
      if (records.empty()) throw InsufficientDataError("query manifest has no query records");
      std::vector<Query> qs;
      for (const auto& r : records) qs.push_back({r.image_id, r.tag, detail::describe(r, model)});
      const EvalReport report = evaluate(index, qs, ks, threshold_m);
      const std::string doc = report.to_json().dump(2) + "\n";
      if (!out_path.empty()) write_file_atomic(out_path, doc);
      out << doc;
    } else if (*insp) {
      for (const auto& f : inspect_files) {
        const TensorHeader h = read_tensor_header(f);
        out << f << "\n"
            << "  version " << h.version << "\n"
            << "  dtype f32\n"
            << "  dims " << shape_string(h.dims) << "\n"
            << "  elements " << element_count(h.dims) << "\n";
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace vpr
