#pragma once

// Deterministic synthetic dataset in the on-disk formats the engine reads.
// Each place gets a random token-matrix center; every image of the place is
// the center plus Gaussian noise scaled by `spread`. Places sit on a 200 m
// grid and images are jittered at most 10 m from their place, so same-place
// pairs are under 25 m apart and different places over 100 m apart.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "vpr/io.hpp"
#include "vpr/random.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

struct SyntheticSpec {
  std::size_t places = 32;
  std::size_t train_per_place = 4;
  std::size_t database_per_place = 1;
  std::size_t query_per_place = 1;
  std::size_t tokens = 16;  // C, must be a perfect square
  std::size_t dim = 32;     // D
  double spread = 0.5;
  double shared_offset = 0.0;  // scale of one N(0,1) tensor added to every center
  std::uint64_t seed = 7;
  GeoTag origin{40.44, -79.99};
};

inline constexpr double kSyntheticPlaceSpacingM = 200.0;
inline constexpr double kSyntheticJitterM = 10.0;

// Writes <dir>/manifest.jsonl and <dir>/features/<image_id>.vprt.
inline std::vector<ImageRecord> synthesize(const SyntheticSpec& spec,
                                           const std::filesystem::path& dir) {
  if (spec.places == 0 || spec.tokens == 0 || spec.dim == 0) {
    throw RangeError("synthetic dataset sizes must be positive");
  }
  std::filesystem::create_directories(dir / "features");
  Rng rng(spec.seed);
  const double m_per_deg_lat = std::numbers::pi * kEarthRadiusM / 180.0;
  const double m_per_deg_lon = m_per_deg_lat * std::cos(spec.origin.lat * std::numbers::pi / 180.0);
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.places))));

  std::vector<float> shared(spec.tokens * spec.dim);
  for (float& v : shared) v = static_cast<float>(spec.shared_offset * rng.normal());

  std::vector<ImageRecord> records;
  for (std::size_t p = 0; p < spec.places; ++p) {
    char place_id[32];
    std::snprintf(place_id, sizeof place_id, "place%04zu", p);
    const double north = kSyntheticPlaceSpacingM * static_cast<double>(p / cols);
    const double east = kSyntheticPlaceSpacingM * static_cast<double>(p % cols);

    std::vector<float> center = shared;
    for (float& v : center) v += static_cast<float>(rng.normal());

    const auto emit = [&](Split split, std::size_t count) {
      for (std::size_t i = 0; i < count; ++i) {
        char image_id[64];
        std::snprintf(image_id, sizeof image_id, "%s_%s%zu", place_id,
                      std::string(split_name(split)).c_str(), i);
        std::vector<float> data = center;
        for (float& v : data) v += static_cast<float>(spec.spread * rng.normal());
        // Uniform point in a disc of radius kSyntheticJitterM.
        const double radius = kSyntheticJitterM * std::sqrt(rng.uniform());
        const double angle = 2.0 * std::numbers::pi * rng.uniform();
        ImageRecord r;
        r.image_id = image_id;
        r.place_id = place_id;
        r.tag = {spec.origin.lat + (north + radius * std::sin(angle)) / m_per_deg_lat,
                 spec.origin.lon + (east + radius * std::cos(angle)) / m_per_deg_lon};
        r.split = split;
        r.features = "features/" + r.image_id + ".vprt";
        r.features_path = dir / r.features;
        write_tensor(r.features_path, Tensor<float>({spec.tokens, spec.dim}, std::move(data)));
        records.push_back(std::move(r));
      }
    };
    emit(Split::kTrain, spec.train_per_place);
    emit(Split::kDatabase, spec.database_per_place);
    emit(Split::kQuery, spec.query_per_place);
  }
  write_manifest(dir / "manifest.jsonl", records);
  return records;
}

}  // namespace vpr
