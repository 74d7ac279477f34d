#pragma once

// Place-balanced metric-learning loop for the aggregation head: each batch
// holds B places with K images each, the head is optimized by SGD with
// momentum and L2 weight decay, and the learning rate drops by a constant
// factor every few epochs.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vpr/aggregator.hpp"
#include "vpr/error.hpp"
#include "vpr/io.hpp"
#include "vpr/loss.hpp"
#include "vpr/random.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

struct TrainConfig {
  std::size_t places_per_batch = 8;  // B
  std::size_t images_per_place = 4;  // K
  std::size_t epochs = 50;
  double lr0 = 0.05;
  double lr_divisor = 3.0;
  std::size_t lr_period_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 0.001;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.places_per_batch < 2) throw RangeError("places_per_batch must be at least 2");
  if (c.images_per_place < 2) throw RangeError("images_per_place must be at least 2");
  if (c.lr_period_epochs == 0) throw RangeError("lr_period_epochs must be positive");
  if (!(c.lr_divisor > 0.0)) throw RangeError("lr_divisor must be positive");
}

template <typename T>
struct OptimizerState {
  AggregatorModel<T> velocity;
  std::size_t epoch = 0;
  double lr = 0.0;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const AggregatorModel<T>& model, double lr) {
  return {zero_gradients_like(model), 0, lr};
}

// lr0 / divisor^floor(epoch / period)
inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  const auto drops = static_cast<double>(epoch / cfg.lr_period_epochs);
  return cfg.lr0 / std::pow(cfg.lr_divisor, drops);
}

// v <- mu v + g + wd theta; theta <- theta - lr v
template <typename T>
void sgd_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
                double momentum, double weight_decay) {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw DimensionError("sgd shapes disagree: param " + shape_string(param.shape()) +
                         ", grad " + shape_string(grad.shape()) + ", velocity " +
                         shape_string(velocity.shape()));
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay),
          step = static_cast<T>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mu * velocity[i] + grad[i] + wd * param[i];
    param[i] -= step * velocity[i];
  }
}

template <typename T>
void sgd_step(AggregatorModel<T>& params, const AggregatorGradients<T>& grads,
              OptimizerState<T>& state, double lr, double momentum, double weight_decay) {
  std::vector<Tensor<T>*> p, v;
  std::vector<const Tensor<T>*> g;
  for_each_parameter(params, [&](const std::string&, Tensor<T>& t) { p.push_back(&t); });
  for_each_parameter(grads, [&](const std::string&, const Tensor<T>& t) { g.push_back(&t); });
  for_each_parameter(state.velocity, [&](const std::string&, Tensor<T>& t) { v.push_back(&t); });
  if (p.size() != g.size() || p.size() != v.size()) {
    throw DimensionError("parameter, gradient and velocity lists differ in length");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    sgd_update(*p[i], *g[i], *v[i], lr, momentum, weight_decay);
  }
  state.lr = lr;
}

// Train-split records grouped by place id, places in lexicographic order.
class PlaceTable {
 public:
  explicit PlaceTable(const std::vector<ImageRecord>& records) {
    std::map<std::string, std::vector<std::size_t>> by_place;
    for (std::size_t i = 0; i < records.size(); ++i) by_place[records[i].place_id].push_back(i);
    for (auto& [id, members] : by_place) {
      ids_.push_back(id);
      members_.push_back(std::move(members));
    }
  }

  std::size_t place_count() const { return ids_.size(); }
  const std::string& place_id(std::size_t p) const { return ids_[p]; }
  const std::vector<std::size_t>& members(std::size_t p) const { return members_[p]; }

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<std::size_t>> members_;
};

struct BatchSlot {
  std::size_t record = 0;  // index into the record list
  Label label = 0;         // index of the place within the batch
};

// B distinct places, K records each. Images are drawn without replacement
// when a place has at least K of them, otherwise with replacement.
inline std::vector<BatchSlot> sample_batch_indices(const PlaceTable& places,
                                                   const TrainConfig& cfg, Rng& rng) {
  const std::size_t b = cfg.places_per_batch, k = cfg.images_per_place;
  if (places.place_count() < b) {
    throw InsufficientDataError("need " + std::to_string(b) + " places per batch, have " +
                                std::to_string(places.place_count()));
  }
  std::vector<std::size_t> order(places.place_count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < b; ++i) {
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
  }
  std::vector<BatchSlot> slots;
  slots.reserve(b * k);
  for (std::size_t p = 0; p < b; ++p) {
    std::vector<std::size_t> pool = places.members(order[p]);
    if (pool.size() >= k) {
      for (std::size_t i = 0; i < k; ++i) {
        std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        slots.push_back({pool[i], p});
      }
    } else {
      for (std::size_t i = 0; i < k; ++i) slots.push_back({pool[rng.below(pool.size())], p});
    }
  }
  return slots;
}

inline std::vector<ImageRecord> sample_batch(const std::vector<ImageRecord>& records,
                                             const TrainConfig& cfg, Rng& rng) {
  const auto train = filter_split(records, Split::kTrain);
  const PlaceTable places(train);
  std::vector<ImageRecord> batch;
  for (const BatchSlot& s : sample_batch_indices(places, cfg, rng)) batch.push_back(train[s.record]);
  return batch;
}

// One pass covers every place once in expectation.
inline std::size_t batches_per_epoch(std::size_t place_count, std::size_t places_per_batch) {
  return (place_count + places_per_batch - 1) / places_per_batch;
}

struct TrainResult {
  AggregatorModel<float> model;
  std::vector<double> epoch_mean_loss;
  std::string loss_log;  // "epoch,batch,lr,loss" per step
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string format_log_line(std::size_t epoch, std::size_t batch, double lr, double loss) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", epoch, batch, lr, loss);
  return buf;
}

}  // namespace detail

inline std::uint64_t init_seed(std::uint64_t seed) { return detail::derive_seed(seed, 0); }

// Loads every train-split feature file and fills the config's feature-map
// count and grid side from the first one.
inline std::vector<Tensor<float>> load_train_features(const std::vector<ImageRecord>& train,
                                                      AggregatorConfig& config) {
  std::vector<Tensor<float>> features;
  features.reserve(train.size());
  for (const auto& r : train) {
    Tensor<float> t = read_tensor(r.features_path);
    const FeatureMaps<float> fm = [&] {
      try {
        return tokens_to_maps(t);
      } catch (const Error& e) {
        throw Error(r.features_path.string() + ": " + e.what());
      }
    }();
    if (features.empty()) {
      config.feature_maps = fm.s;
      config.grid_side = fm.h;
    } else if (fm.s != config.feature_maps || fm.h != config.grid_side) {
      throw DimensionError(r.features_path.string() + " has shape " +
                           shape_string(t.shape()) + ", inconsistent with earlier records");
    }
    features.push_back(std::move(t));
  }
  return features;
}

// Runs the full loop in memory. Batches are processed sequentially and
// per-image gradients are summed in batch order.
inline TrainResult train_on_features(const std::vector<ImageRecord>& train,
                                     const std::vector<Tensor<float>>& features,
                                     const AggregatorConfig& config, const LossConfig& loss_cfg,
                                     const TrainConfig& cfg) {
  validate_train_config(cfg);
  validate_config(config);
  TrainResult result{init_model<float>(config, init_seed(cfg.seed)), {}, {}};
  AggregatorModel<float>& model = result.model;
  const PlaceTable places(train);
  if (places.place_count() < cfg.places_per_batch) {
    throw InsufficientDataError("train split has " + std::to_string(places.place_count()) +
                                " places, batch needs " + std::to_string(cfg.places_per_batch));
  }
  Rng rng(detail::derive_seed(cfg.seed, 1));
  OptimizerState<float> state = make_optimizer_state(model, cfg.lr0);
  const std::size_t steps = batches_per_epoch(places.place_count(), cfg.places_per_batch);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = lr_at_epoch(cfg, epoch);
    double epoch_total = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto slots = sample_batch_indices(places, cfg, rng);
      std::vector<Tensor<float>> descriptors;
      std::vector<Label> labels;
      for (const auto& s : slots) {
        descriptors.push_back(aggregate(features[s.record], model));
        labels.push_back(s.label);
      }
      const auto batch = similarity_matrix(descriptors, labels);
      const PairSets pairs = mine_pairs(batch, loss_cfg);
      const float loss = ms_loss(batch, pairs, loss_cfg);
      if (!std::isfinite(loss)) {
        throw NumericInputError("non-finite loss at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(step) + ", lr " +
                                std::to_string(lr));
      }
      const Tensor<float> grad_s = ms_loss_backward(batch, pairs, loss_cfg);
      const auto grad_desc = similarity_backward<float>(descriptors, grad_s);
      AggregatorGradients<float> grads = zero_gradients_like(model);
      for (std::size_t i = 0; i < slots.size(); ++i) {
        accumulate_gradients(grads, aggregate_backward(features[slots[i].record], model, grad_desc[i]));
      }
      sgd_step(model, grads, state, lr, cfg.momentum, cfg.weight_decay);
      epoch_total += static_cast<double>(loss);
      result.loss_log += detail::format_log_line(epoch, step, lr, static_cast<double>(loss));
    }
    result.epoch_mean_loss.push_back(epoch_total / static_cast<double>(steps));
  }
  return result;
}

// Trains on the manifest's train split and writes <out>/checkpoint and
// <out>/loss.log.
inline TrainResult train(const std::vector<ImageRecord>& manifest, AggregatorConfig config,
                         const LossConfig& loss_cfg, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir) {
  const auto train_records = filter_split(manifest, Split::kTrain);
  if (train_records.empty()) throw InsufficientDataError("manifest has no train records");
  const auto features = load_train_features(train_records, config);
  TrainResult result = train_on_features(train_records, features, config, loss_cfg, cfg);
  std::filesystem::create_directories(out_dir);
  save_checkpoint(out_dir / "checkpoint", result.model);
  write_file_atomic(out_dir / "loss.log", result.loss_log);
  return result;
}

}  // namespace vpr
