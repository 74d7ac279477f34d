#pragma once

// Reference implementations used only by tests. Nothing here calls into the
// kernels it checks, except the finite-difference helpers, which only evaluate
// forward passes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace vpr::oracle {

// c[i][j] = sum_k a[i][k] b[k][j], a: p x q, b: q x r, all row-major.
inline std::vector<double> triple_loop_matmul(const std::vector<double>& a,
                                              const std::vector<double>& b, std::size_t p,
                                              std::size_t q, std::size_t r) {
  std::vector<double> c(p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t k = 0; k < q; ++k)
      for (std::size_t j = 0; j < r; ++j) c[i * r + j] += a[i * q + k] * b[k * r + j];
  return c;
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true value
// is below finite-difference round-off from dominating.
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

// Denominator floor for gradient checks against central differences.
inline constexpr double kFiniteDifferenceFloor = 1e-5;

inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b,
                                 double floor = kFiniteDifferenceFloor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

// One residual MLP row update: y = W2 relu(W1 x) + x.
inline std::vector<double> mixer_row(const std::vector<double>& x, const std::vector<double>& w1,
                                     const std::vector<double>& w2, std::size_t hidden) {
  const std::size_t n = x.size();
  std::vector<double> h(hidden, 0.0);
  for (std::size_t j = 0; j < hidden; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += w1[j * n + k] * x[k];
    h[j] = acc > 0.0 ? acc : 0.0;
  }
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = x[i];
    for (std::size_t j = 0; j < hidden; ++j) acc += w2[i * hidden + j] * h[j];
    y[i] = acc;
  }
  return y;
}

// Multi-similarity loss written straight from the formula: pair sets come
// from labels, exponentials are summed without any shifting.
inline double ms_loss_direct(const std::vector<double>& s, const std::vector<int>& labels,
                             double alpha, double beta, double lambda) {
  const std::size_t m = labels.size();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double pos = 0.0, neg = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      if (k == i) continue;
      if (labels[k] == labels[i]) pos += std::exp(-alpha * (s[i * m + k] - lambda));
      else neg += std::exp(beta * (s[i * m + k] - lambda));
    }
    total += std::log1p(pos) / alpha + std::log1p(neg) / beta;
  }
  return total / static_cast<double>(m);
}

// Great-circle distance from the angle between 3D unit vectors.
inline double sphere_distance_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double rad = std::numbers::pi / 180.0;
  const auto unit = [&](double lat, double lon) {
    return std::array<double, 3>{std::cos(lat * rad) * std::cos(lon * rad),
                                 std::cos(lat * rad) * std::sin(lon * rad), std::sin(lat * rad)};
  };
  const auto a = unit(lat1, lon1), b = unit(lat2, lon2);
  const std::array<double, 3> c{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                                a[0] * b[1] - a[1] * b[0]};
  const double cross = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
  const double dotp = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  return 6371000.0 * std::atan2(cross, dotp);
}

struct Ranked {
  std::size_t row;
  float similarity;
};

// Scores every database row and fully sorts (similarity desc, id asc).
inline std::vector<Ranked> full_sort_ranking(const std::vector<std::vector<float>>& db,
                                             const std::vector<std::string>& ids,
                                             const std::vector<float>& q) {
  std::vector<Ranked> all;
  for (std::size_t i = 0; i < db.size(); ++i) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < q.size(); ++k) acc += q[k] * db[i][k];
    all.push_back({i, acc});
  }
  std::stable_sort(all.begin(), all.end(), [&](const Ranked& a, const Ranked& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return ids[a.row] < ids[b.row];
  });
  return all;
}

struct GeoPoint {
  double lat, lon;
};

// recall@k in percent for each k, ranking each query from scratch.
inline std::vector<double> brute_force_recall(const std::vector<std::vector<float>>& db,
                                              const std::vector<std::string>& ids,
                                              const std::vector<GeoPoint>& db_tags,
                                              const std::vector<std::vector<float>>& queries,
                                              const std::vector<GeoPoint>& query_tags,
                                              const std::vector<std::size_t>& ks,
                                              double threshold_m) {
  std::vector<double> recalls;
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      const auto ranking = full_sort_ranking(db, ids, queries[qi]);
      bool hit = false;
      for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
        const auto& t = db_tags[ranking[r].row];
        if (sphere_distance_m(query_tags[qi].lat, query_tags[qi].lon, t.lat, t.lon) < threshold_m) {
          hit = true;
        }
      }
      hits += hit ? 1 : 0;
    }
    recalls.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(queries.size()));
  }
  return recalls;
}

}  // namespace vpr::oracle
