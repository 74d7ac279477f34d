#pragma once

// Multi-similarity loss over a batch of unit-norm descriptors.
//
//   L = 1/m sum_i { 1/alpha log[1 + sum_{k in P_i} exp(-alpha (S_ik - lambda))]
//                 + 1/beta  log[1 + sum_{k in N_i} exp( beta (S_ik - lambda))] }

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vpr/error.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

using Label = std::size_t;

template <typename T>
struct SimilarityBatch {
  Tensor<T> similarity;  // m x m
  std::vector<Label> labels;

  std::size_t size() const { return labels.size(); }
};

enum class MiningMode { kAllPairs, kHardestMargin };

struct LossConfig {
  double alpha = 2.0;
  double beta = 50.0;
  double lambda = 0.5;
  MiningMode mining = MiningMode::kHardestMargin;
  double epsilon = 0.1;
};

struct PairSets {
  std::vector<std::vector<std::size_t>> positives;  // P_i
  std::vector<std::vector<std::size_t>> negatives;  // N_i

  std::size_t size() const { return positives.size(); }
};

inline constexpr double kUnitNormTolerance = 1e-3;

template <typename T>
SimilarityBatch<T> similarity_matrix(std::span<const Tensor<T>> descriptors,
                                     std::vector<Label> labels) {
  const std::size_t m = descriptors.size();
  if (m == 0) throw DimensionError("similarity_matrix needs at least one descriptor");
  if (labels.size() != m) {
    throw DimensionError("got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " descriptors");
  }
  const std::size_t len = descriptors[0].size();
  for (std::size_t i = 0; i < m; ++i) {
    if (descriptors[i].size() != len) {
      throw DimensionError("descriptor " + std::to_string(i) + " has length " +
                           std::to_string(descriptors[i].size()) + ", expected " +
                           std::to_string(len));
    }
    const double norm = static_cast<double>(l2_norm(descriptors[i].data()));
    if (std::abs(norm - 1.0) > kUnitNormTolerance) {
      throw NumericInputError("descriptor " + std::to_string(i) +
                              " is not unit-norm (norm " + std::to_string(norm) + ")");
    }
  }
  SimilarityBatch<T> batch{Tensor<T>({m, m}), std::move(labels)};
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      const T s = dot(descriptors[i].data(), descriptors[j].data());
      batch.similarity(i, j) = s;
      batch.similarity(j, i) = s;
    }
  }
  return batch;
}

template <typename T>
SimilarityBatch<T> similarity_matrix(const std::vector<Tensor<T>>& descriptors,
                                     std::vector<Label> labels) {
  return similarity_matrix(std::span<const Tensor<T>>(descriptors), std::move(labels));
}

// Label-defined pair sets: P_i = same label (k != i), N_i = different label.
inline PairSets mine_pairs(std::span<const Label> labels) {
  const std::size_t m = labels.size();
  PairSets p;
  p.positives.resize(m);
  p.negatives.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      if (k == i) continue;
      (labels[i] == labels[k] ? p.positives : p.negatives)[i].push_back(k);
    }
  }
  return p;
}

// Mining by similarity. In hardest-margin mode a negative is kept when
// S > min_P S - eps and a positive when S < max_N S + eps; an anchor with no
// positives keeps no negatives and vice versa.
template <typename T>
PairSets mine_pairs(const SimilarityBatch<T>& batch, const LossConfig& cfg) {
  PairSets all = mine_pairs(std::span<const Label>(batch.labels));
  if (cfg.mining == MiningMode::kAllPairs) return all;

  const auto& s = batch.similarity;
  const double eps = cfg.epsilon;
  PairSets kept;
  kept.positives.resize(batch.size());
  kept.negatives.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double min_pos = std::numeric_limits<double>::infinity();
    double max_neg = -std::numeric_limits<double>::infinity();
    for (std::size_t k : all.positives[i]) min_pos = std::min(min_pos, double(s(i, k)));
    for (std::size_t k : all.negatives[i]) max_neg = std::max(max_neg, double(s(i, k)));
    for (std::size_t k : all.negatives[i]) {
      if (double(s(i, k)) > min_pos - eps) kept.negatives[i].push_back(k);
    }
    for (std::size_t k : all.positives[i]) {
      if (double(s(i, k)) < max_neg + eps) kept.positives[i].push_back(k);
    }
  }
  return kept;
}

namespace detail {

template <typename T>
void require_loss_inputs(const SimilarityBatch<T>& batch, const PairSets& pairs,
                         const LossConfig& cfg) {
  const std::size_t m = batch.size();
  if (batch.similarity.rank() != 2 || batch.similarity.rows() != m ||
      batch.similarity.cols() != m || pairs.size() != m ||
      pairs.negatives.size() != m) {
    throw DimensionError("similarity matrix, labels and pair sets disagree on batch size");
  }
  if (!(cfg.alpha > 0.0) || !(cfg.beta > 0.0)) {
    throw NumericInputError("alpha and beta must be positive");
  }
  if (!all_finite(batch.similarity)) {
    throw NumericInputError("similarity matrix contains non-finite values");
  }
}

// log(1 + sum_k exp(x_k)) with the max shifted out. Writes the softmax weight
// exp(x_k) / (1 + sum exp(x)) of every term into weights when non-null.
template <typename T>
T log1p_sum_exp(std::span<const T> x, std::vector<T>* weights) {
  // After the shift exactly one term equals 1: the constant when no x_k is
  // positive, otherwise the first maximal x_k. The rest goes through log1p.
  T shift{0};
  std::size_t top = x.size();
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k] > shift) {
      shift = x[k];
      top = k;
    }
  }
  T rest = top == x.size() ? T{0} : std::exp(-shift);
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (k != top) rest += std::exp(x[k] - shift);
  }
  if (weights) {
    weights->resize(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      (*weights)[k] = std::exp(x[k] - shift) / (T{1} + rest);
    }
  }
  return shift + std::log1p(rest);
}

}  // namespace detail

template <typename T>
T ms_loss(const SimilarityBatch<T>& batch, const PairSets& pairs, const LossConfig& cfg) {
  detail::require_loss_inputs(batch, pairs, cfg);
  const T alpha = static_cast<T>(cfg.alpha), beta = static_cast<T>(cfg.beta),
          lambda = static_cast<T>(cfg.lambda);
  const auto& s = batch.similarity;
  const std::size_t m = batch.size();
  T total{0};
  std::vector<T> x;
  for (std::size_t i = 0; i < m; ++i) {
    x.clear();
    for (std::size_t k : pairs.positives[i]) x.push_back(-alpha * (s(i, k) - lambda));
    const T pos = detail::log1p_sum_exp<T>(x, nullptr) / alpha;
    x.clear();
    for (std::size_t k : pairs.negatives[i]) x.push_back(beta * (s(i, k) - lambda));
    const T neg = detail::log1p_sum_exp<T>(x, nullptr) / beta;
    total += pos + neg;
  }
  return total / static_cast<T>(m);
}

// dL/dS as an m x m matrix; S_ik and S_ki are treated as distinct entries.
template <typename T>
Tensor<T> ms_loss_backward(const SimilarityBatch<T>& batch, const PairSets& pairs,
                           const LossConfig& cfg) {
  detail::require_loss_inputs(batch, pairs, cfg);
  const T alpha = static_cast<T>(cfg.alpha), beta = static_cast<T>(cfg.beta),
          lambda = static_cast<T>(cfg.lambda);
  const auto& s = batch.similarity;
  const std::size_t m = batch.size();
  const T inv_m = T{1} / static_cast<T>(m);
  Tensor<T> grad({m, m});
  std::vector<T> x, w;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& pos = pairs.positives[i];
    x.clear();
    for (std::size_t k : pos) x.push_back(-alpha * (s(i, k) - lambda));
    detail::log1p_sum_exp<T>(x, &w);
    for (std::size_t j = 0; j < pos.size(); ++j) grad(i, pos[j]) -= inv_m * w[j];

    const auto& neg = pairs.negatives[i];
    x.clear();
    for (std::size_t k : neg) x.push_back(beta * (s(i, k) - lambda));
    detail::log1p_sum_exp<T>(x, &w);
    for (std::size_t j = 0; j < neg.size(); ++j) grad(i, neg[j]) += inv_m * w[j];
  }
  return grad;
}

// Chains dL/dS through S_ij = <d_i, d_j>: dL/dd_i = sum_j (G_ij + G_ji) d_j.
template <typename T>
std::vector<Tensor<T>> similarity_backward(std::span<const Tensor<T>> descriptors,
                                           const Tensor<T>& grad_similarity) {
  const std::size_t m = descriptors.size();
  if (grad_similarity.rank() != 2 || grad_similarity.rows() != m ||
      grad_similarity.cols() != m) {
    throw DimensionError("similarity gradient shape " +
                         shape_string(grad_similarity.shape()) +
                         " does not match batch of " + std::to_string(m));
  }
  std::vector<Tensor<T>> grads;
  grads.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Tensor<T> g(descriptors[i].shape());
    for (std::size_t j = 0; j < m; ++j) {
      const T c = grad_similarity(i, j) + grad_similarity(j, i);
      if (c == T{0}) continue;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += c * descriptors[j][k];
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace vpr
