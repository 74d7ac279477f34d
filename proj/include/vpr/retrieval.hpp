#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vpr/error.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kDefaultThresholdM = 25.0;

struct GeoTag {
  double lat = 0.0;
  double lon = 0.0;
};

inline void validate_geotag(const GeoTag& g) {
  if (!(g.lat >= -90.0 && g.lat <= 90.0)) {
    throw RangeError("latitude " + std::to_string(g.lat) + " outside [-90, 90]");
  }
  if (!(g.lon >= -180.0 && g.lon <= 180.0)) {
    throw RangeError("longitude " + std::to_string(g.lon) + " outside [-180, 180]");
  }
}

// Great-circle distance in meters on a sphere of radius 6371 km.
inline double haversine_m(const GeoTag& a, const GeoTag& b) {
  validate_geotag(a);
  validate_geotag(b);
  constexpr double rad = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * rad;
  const double dlon = (b.lon - a.lon) * rad;
  const double s1 = std::sin(dlat / 2.0), s2 = std::sin(dlon / 2.0);
  const double h = s1 * s1 + std::cos(a.lat * rad) * std::cos(b.lat * rad) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::atan2(std::sqrt(h), std::sqrt(std::max(0.0, 1.0 - h)));
}

struct Match {
  std::size_t index = 0;  // row in the index
  std::string image_id;
  float similarity = 0.0f;
};

// Flat exact-search database of unit-norm descriptors.
class RetrievalIndex {
 public:
  explicit RetrievalIndex(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw DimensionError("index descriptor length must be positive");
  }

  void add(std::string image_id, GeoTag tag, std::span<const float> descriptor) {
    if (descriptor.size() != dim_) {
      throw DimensionError("descriptor length " + std::to_string(descriptor.size()) +
                           " does not match index length " + std::to_string(dim_));
    }
    validate_geotag(tag);
    ids_.push_back(std::move(image_id));
    tags_.push_back(tag);
    data_.insert(data_.end(), descriptor.begin(), descriptor.end());
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return ids_.empty(); }
  const std::string& image_id(std::size_t i) const { return ids_.at(i); }
  const GeoTag& geotag(std::size_t i) const { return tags_.at(i); }
  std::span<const float> descriptor(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }
  // All descriptors as a size() x dim() matrix.
  Tensor<float> descriptors() const { return Tensor<float>({size(), dim_}, data_); }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<GeoTag> tags_;
  std::vector<float> data_;
};

// Exact top-k by descending cosine similarity, ties broken by ascending id.
inline std::vector<Match> query_topk(const RetrievalIndex& index,
                                     std::span<const float> query, std::size_t k) {
  if (index.empty()) throw InsufficientDataError("query against an empty index");
  if (query.size() != index.dim()) {
    throw DimensionError("query length " + std::to_string(query.size()) +
                         " does not match index length " + std::to_string(index.dim()));
  }
  if (k == 0) throw RangeError("k must be at least 1");
  if (std::abs(static_cast<double>(l2_norm(query)) - 1.0) > 1e-3) {
    throw NumericInputError("query descriptor is not unit-norm");
  }
  std::vector<Match> all(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    all[i] = {i, index.image_id(i), dot(query, index.descriptor(i))};
  }
  const auto better = [](const Match& a, const Match& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.image_id < b.image_id;
  };
  const std::size_t keep = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep),
                    all.end(), better);
  all.resize(keep);
  return all;
}

struct Query {
  std::string image_id;
  GeoTag tag;
  Tensor<float> descriptor;
};

struct EvalReport {
  double threshold_m = kDefaultThresholdM;
  std::vector<std::size_t> ks;
  std::vector<double> recalls;  // percent, parallel to ks
  std::size_t query_count = 0;

  nlohmann::json to_json() const {
    return {{"threshold_m", threshold_m},
            {"ks", ks},
            {"recalls", recalls},
            {"query_count", query_count}};
  }
};

// A query succeeds at k when any of its top-k matches lies strictly closer
// than threshold_m.
inline EvalReport evaluate(const RetrievalIndex& index, std::span<const Query> queries,
                           std::vector<std::size_t> ks,
                           double threshold_m = kDefaultThresholdM) {
  if (queries.empty()) throw InsufficientDataError("evaluation needs at least one query");
  if (ks.empty()) throw RangeError("evaluation needs at least one k");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const std::size_t kmax = ks.back();

  std::vector<std::size_t> hits(ks.size(), 0);
  for (const Query& q : queries) {
    const auto matches = query_topk(index, q.descriptor.data(), kmax);
    // Rank of the first match within the threshold.
    std::size_t first = matches.size();
    for (std::size_t r = 0; r < matches.size(); ++r) {
      if (haversine_m(q.tag, index.geotag(matches[r].index)) < threshold_m) {
        first = r;
        break;
      }
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
      if (first < ks[j]) ++hits[j];
    }
  }
  EvalReport report;
  report.threshold_m = threshold_m;
  report.ks = ks;
  report.query_count = queries.size();
  for (std::size_t h : hits) {
    report.recalls.push_back(100.0 * static_cast<double>(h) /
                             static_cast<double>(queries.size()));
  }
  return report;
}

}  // namespace vpr
