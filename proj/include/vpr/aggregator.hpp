#pragma once

// Feature-mixer aggregation head.
//
// A C x D token matrix from the backbone is viewed as s = D feature maps on an
// h x w = C grid. Each flattened map (a row of length n = h*w) passes through
// L residual MLP blocks, X <- W2 relu(W1 X) + X. A depth projection W_d (d x s)
// then mixes the s channels, a row projection W_r (r x n) shrinks each row,
// and the resulting d x r matrix is flattened and L2-normalized.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vpr/error.hpp"
#include "vpr/random.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

struct AggregatorConfig {
  std::size_t feature_maps = 768;  // s, equal to the token embedding length D
  std::size_t grid_side = 16;      // h = w, so token count C = grid_side^2
  std::size_t mixer_depth = 2;     // L
  std::size_t depth_out = 1024;    // d
  std::size_t row_out = 4;         // r
  std::size_t hidden_ratio = 1;    // mixer hidden width = hidden_ratio * n
  bool block_norm = false;         // per-row input normalization inside blocks

  std::size_t spatial() const { return grid_side * grid_side; }
  std::size_t hidden() const { return hidden_ratio * spatial(); }
  std::size_t descriptor_length() const { return depth_out * row_out; }
};

template <typename T>
struct MixerBlock {
  Tensor<T> w1;  // hidden x n
  Tensor<T> w2;  // n x hidden
  bool normalize_input = false;
};

template <typename T>
struct ProjectionHead {
  Tensor<T> depth;  // W_d: d x s
  Tensor<T> row;    // W_r: r x n
};

template <typename T>
struct AggregatorModel {
  AggregatorConfig config;
  std::vector<MixerBlock<T>> blocks;
  ProjectionHead<T> head;
};

// Gradients share the model's layout.
template <typename T>
using AggregatorGradients = AggregatorModel<T>;

template <typename T>
struct FeatureMaps {
  std::size_t s = 0, h = 0, w = 0;
  Tensor<T> maps;  // s x h x w

  std::size_t n() const { return h * w; }
  Tensor<T> flat() const { return reshape(maps, {s, h * w}); }
};

// Visits parameters in a fixed order: block0.w1, block0.w2, ..., depth, row.
template <typename Model, typename Fn>
void for_each_parameter(Model& model, Fn&& fn) {
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    fn(prefix + ".w1", model.blocks[i].w1);
    fn(prefix + ".w2", model.blocks[i].w2);
  }
  fn(std::string("depth"), model.head.depth);
  fn(std::string("row"), model.head.row);
}

inline void validate_config(const AggregatorConfig& c) {
  if (c.feature_maps == 0 || c.grid_side == 0 || c.depth_out == 0 ||
      c.row_out == 0 || c.hidden_ratio == 0) {
    throw DimensionError("aggregator config has a zero dimension");
  }
}

template <typename T>
AggregatorModel<T> zero_model(const AggregatorConfig& config) {
  validate_config(config);
  AggregatorModel<T> m;
  m.config = config;
  const std::size_t n = config.spatial(), hid = config.hidden();
  for (std::size_t i = 0; i < config.mixer_depth; ++i) {
    m.blocks.push_back({Tensor<T>({hid, n}), Tensor<T>({n, hid}), config.block_norm});
  }
  m.head.depth = Tensor<T>({config.depth_out, config.feature_maps});
  m.head.row = Tensor<T>({config.row_out, n});
  return m;
}

template <typename T>
AggregatorGradients<T> zero_gradients_like(const AggregatorModel<T>& model) {
  return zero_model<T>(model.config);
}

template <typename T>
void accumulate_gradients(AggregatorGradients<T>& acc, const AggregatorGradients<T>& g) {
  if (acc.blocks.size() != g.blocks.size()) {
    throw DimensionError("gradient block counts differ");
  }
  for (std::size_t i = 0; i < acc.blocks.size(); ++i) {
    add_inplace(acc.blocks[i].w1, g.blocks[i].w1);
    add_inplace(acc.blocks[i].w2, g.blocks[i].w2);
  }
  add_inplace(acc.head.depth, g.head.depth);
  add_inplace(acc.head.row, g.head.row);
}

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per weight matrix.
template <typename T>
AggregatorModel<T> init_model(const AggregatorConfig& config, std::uint64_t seed) {
  AggregatorModel<T> m = zero_model<T>(config);
  Rng rng(seed);
  for_each_parameter(m, [&](const std::string&, Tensor<T>& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (T& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  });
  return m;
}

template <typename T>
void validate_model(const AggregatorModel<T>& m) {
  const AggregatorModel<T> ref = zero_model<T>(m.config);
  if (m.blocks.size() != ref.blocks.size()) {
    throw DimensionError("model has " + std::to_string(m.blocks.size()) +
                         " mixer blocks, config says " +
                         std::to_string(ref.blocks.size()));
  }
  auto check = [](const Tensor<T>& got, const Tensor<T>& want, const char* name) {
    if (got.shape() != want.shape()) {
      throw DimensionError(std::string(name) + " has shape " +
                           shape_string(got.shape()) + ", expected " +
                           shape_string(want.shape()));
    }
  };
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    check(m.blocks[i].w1, ref.blocks[i].w1, "mixer W1");
    check(m.blocks[i].w2, ref.blocks[i].w2, "mixer W2");
  }
  check(m.head.depth, ref.head.depth, "depth projection");
  check(m.head.row, ref.head.row, "row projection");
}

// maps[i][y][x] = tokens[y*w + x][i]. Only square grids are accepted, so the
// exporter must drop any class/register tokens.
template <typename T>
FeatureMaps<T> tokens_to_maps(const Tensor<T>& tokens) {
  detail::require_matrix(tokens, "tokens_to_maps");
  const std::size_t c = tokens.rows(), d = tokens.cols();
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(c))));
  while (side * side > c) --side;
  while ((side + 1) * (side + 1) <= c) ++side;
  if (side * side != c) {
    throw GridFactorizationError("token count " + std::to_string(c) +
                                 " is not a perfect square");
  }
  FeatureMaps<T> fm;
  fm.s = d;
  fm.h = fm.w = side;
  fm.maps = reshape(transpose(tokens), {d, side, side});
  return fm;
}

namespace detail {

inline constexpr double kRowNormEps = 1e-5;

// Zero-mean unit-variance normalization of each row (no affine parameters).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, std::vector<T>* inv_std = nullptr) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.cols();
  if (inv_std) inv_std->assign(x.rows(), T{0});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T mean{0};
    for (std::size_t k = 0; k < n; ++k) mean += x(i, k);
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t k = 0; k < n; ++k) var += (x(i, k) - mean) * (x(i, k) - mean);
    var /= static_cast<T>(n);
    const T istd = T{1} / std::sqrt(var + static_cast<T>(kRowNormEps));
    for (std::size_t k = 0; k < n; ++k) out(i, k) = (x(i, k) - mean) * istd;
    if (inv_std) (*inv_std)[i] = istd;
  }
  return out;
}

// Backward of normalize_rows given its output y and saved inverse std.
template <typename T>
Tensor<T> normalize_rows_backward(const Tensor<T>& y, const std::vector<T>& inv_std,
                                  const Tensor<T>& grad_y) {
  Tensor<T> gx(y.shape());
  const std::size_t n = y.cols();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    T mean_g{0}, mean_gy{0};
    for (std::size_t k = 0; k < n; ++k) {
      mean_g += grad_y(i, k);
      mean_gy += grad_y(i, k) * y(i, k);
    }
    mean_g /= static_cast<T>(n);
    mean_gy /= static_cast<T>(n);
    for (std::size_t k = 0; k < n; ++k) {
      gx(i, k) = inv_std[i] * (grad_y(i, k) - mean_g - y(i, k) * mean_gy);
    }
  }
  return gx;
}

template <typename T>
struct BlockCache {
  Tensor<T> input;        // X, s x n
  Tensor<T> mixed_input;  // X or its row-normalized version
  std::vector<T> inv_std;
  Tensor<T> pre;          // W1 applied to every row, s x hidden
  Tensor<T> act;          // relu(pre)
};

template <typename T>
void require_block_compatible(const Tensor<T>& f, const MixerBlock<T>& b) {
  require_matrix(f, "mixer_block_forward");
  if (b.w1.rank() != 2 || b.w2.rank() != 2 || b.w1.cols() != f.cols() ||
      b.w2.rows() != f.cols() || b.w2.cols() != b.w1.rows()) {
    throw DimensionError("mixer block W1 " + shape_string(b.w1.shape()) +
                         ", W2 " + shape_string(b.w2.shape()) +
                         " incompatible with rows of length " +
                         std::to_string(f.cols()));
  }
}

template <typename T>
Tensor<T> mixer_block_forward_cached(const Tensor<T>& f, const MixerBlock<T>& b,
                                     BlockCache<T>* cache) {
  require_block_compatible(f, b);
  std::vector<T> inv_std;
  Tensor<T> mixed_input = b.normalize_input ? normalize_rows(f, &inv_std) : f;
  // Rows are X^i; W1 X^i for every i at once is X * W1^T.
  Tensor<T> pre = matmul_transposed(mixed_input, b.w1);
  Tensor<T> act = relu(pre);
  Tensor<T> out = matmul_transposed(act, b.w2);
  add_inplace(out, f);
  if (cache) {
    cache->input = f;
    cache->mixed_input = std::move(mixed_input);
    cache->inv_std = std::move(inv_std);
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> mixer_block_forward(const Tensor<T>& f, const MixerBlock<T>& block) {
  return detail::mixer_block_forward_cached<T>(f, block, nullptr);
}

template <typename T>
Tensor<T> mixer_stack_forward(const Tensor<T>& f, std::span<const MixerBlock<T>> blocks) {
  Tensor<T> z = f;
  for (const auto& b : blocks) z = mixer_block_forward(z, b);
  return z;
}

template <typename T>
Tensor<T> mixer_stack_forward(const Tensor<T>& f, const std::vector<MixerBlock<T>>& blocks) {
  return mixer_stack_forward(f, std::span<const MixerBlock<T>>(blocks));
}

// Z' = W_d Z: maps the channel dimension s to d, giving d x n.
template <typename T>
Tensor<T> depth_projection(const Tensor<T>& z, const Tensor<T>& w_d) {
  detail::require_matrix(w_d, "depth_projection");
  if (w_d.cols() != z.rows()) {
    throw DimensionError("depth projection " + shape_string(w_d.shape()) +
                         " cannot act on " + shape_string(z.shape()));
  }
  return matmul(w_d, z);
}

// O[i][j] = sum_k W_r[j][k] Z'[i][k], giving d x r.
template <typename T>
Tensor<T> row_projection(const Tensor<T>& zp, const Tensor<T>& w_r) {
  detail::require_matrix(w_r, "row_projection");
  if (w_r.cols() != zp.cols()) {
    throw DimensionError("row projection " + shape_string(w_r.shape()) +
                         " cannot act on " + shape_string(zp.shape()));
  }
  return matmul_transposed(zp, w_r);
}

namespace detail {

template <typename T>
void require_tokens_match(const FeatureMaps<T>& fm, const AggregatorConfig& c) {
  if (fm.s != c.feature_maps || fm.h != c.grid_side) {
    throw DimensionError("tokens give " + std::to_string(fm.s) + " maps of " +
                         std::to_string(fm.h) + "x" + std::to_string(fm.w) +
                         ", model expects " + std::to_string(c.feature_maps) +
                         " maps of " + std::to_string(c.grid_side) + "x" +
                         std::to_string(c.grid_side));
  }
}

}  // namespace detail

// Full head: tokens (C x D) -> unit-norm descriptor of length d*r.
template <typename T>
Tensor<T> aggregate(const Tensor<T>& tokens, const AggregatorModel<T>& model) {
  const FeatureMaps<T> fm = tokens_to_maps(tokens);
  detail::require_tokens_match(fm, model.config);
  const Tensor<T> z = mixer_stack_forward(fm.flat(), model.blocks);
  const Tensor<T> zp = depth_projection(z, model.head.depth);
  const Tensor<T> o = row_projection(zp, model.head.row);
  return l2_normalize(flatten(o));
}

// Gradients of <grad_descriptor, aggregate(tokens, model)> with respect to
// every weight. ReLU uses subgradient 0 at exactly 0.
template <typename T>
AggregatorGradients<T> aggregate_backward(const Tensor<T>& tokens,
                                          const AggregatorModel<T>& model,
                                          const Tensor<T>& grad_descriptor) {
  const AggregatorConfig& cfg = model.config;
  if (grad_descriptor.size() != cfg.descriptor_length()) {
    throw DimensionError("descriptor gradient has length " +
                         std::to_string(grad_descriptor.size()) + ", expected " +
                         std::to_string(cfg.descriptor_length()));
  }
  const FeatureMaps<T> fm = tokens_to_maps(tokens);
  detail::require_tokens_match(fm, cfg);

  std::vector<detail::BlockCache<T>> caches(model.blocks.size());
  Tensor<T> z = fm.flat();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    z = detail::mixer_block_forward_cached(z, model.blocks[i], &caches[i]);
  }
  const Tensor<T> zp = depth_projection(z, model.head.depth);
  const Tensor<T> o = row_projection(zp, model.head.row);
  const T norm = l2_norm(o.data());
  if (!(norm >= T(1e-12))) {
    throw DegenerateVectorError("pre-normalization descriptor is degenerate");
  }

  // Normalization Jacobian: (I - u u^T) / |y|.
  Tensor<T> grad_o(o.shape());
  {
    T ug{0};
    for (std::size_t k = 0; k < o.size(); ++k) ug += (o[k] / norm) * grad_descriptor[k];
    for (std::size_t k = 0; k < o.size(); ++k) {
      grad_o[k] = (grad_descriptor[k] - (o[k] / norm) * ug) / norm;
    }
  }

  AggregatorGradients<T> g = zero_gradients_like(model);
  g.head.row = matmul(transpose(grad_o), zp);              // r x n
  const Tensor<T> grad_zp = matmul(grad_o, model.head.row);  // d x n
  g.head.depth = matmul_transposed(grad_zp, z);            // d x s
  Tensor<T> grad_z = matmul(transpose(model.head.depth), grad_zp);  // s x n

  for (std::size_t i = model.blocks.size(); i-- > 0;) {
    const auto& b = model.blocks[i];
    const auto& c = caches[i];
    g.blocks[i].w2 = matmul(transpose(grad_z), c.act);     // n x hidden
    Tensor<T> grad_pre = matmul(grad_z, b.w2);             // s x hidden
    for (std::size_t k = 0; k < grad_pre.size(); ++k) {
      if (!(c.pre[k] > T{0})) grad_pre[k] = T{0};
    }
    g.blocks[i].w1 = matmul(transpose(grad_pre), c.mixed_input);  // hidden x n
    Tensor<T> grad_mixed = matmul(grad_pre, b.w1);                 // s x n
    if (b.normalize_input) {
      grad_mixed = detail::normalize_rows_backward(c.mixed_input, c.inv_std, grad_mixed);
    }
    add_inplace(grad_z, grad_mixed);
  }
  return g;
}

}  // namespace vpr
