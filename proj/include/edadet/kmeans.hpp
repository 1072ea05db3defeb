#pragma once

// Lloyd's k-means with k-means++ seeding over the rows of a matrix. Used to
// cluster per-location features into a label map.

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/errors.hpp"

namespace edadet {

struct KMeansOptions {
  int k = 2;
  int max_iter = 100;
  int restarts = 10;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<int> labels;
  ag::Mat centers;
  double inertia = 0.0;
  int iterations = 0;
};

namespace detail {

inline double sq_dist(const ag::Mat& a, Eigen::Index i, const ag::Mat& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

inline ag::Mat kmeans_pp_init(const ag::Mat& x, int k, std::mt19937_64& rng) {
  const Eigen::Index n = x.rows();
  ag::Mat c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  c.row(0) = x.row(pick(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = sq_dist(x, i, c, 0);
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (double v : d2) total += v;
    Eigen::Index chosen = 0;
    if (total <= 0.0) {
      // All points coincide with a center already.
      chosen = pick(rng);
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        chosen = i;
        if (r <= 0.0) break;
      }
    }
    c.row(j) = x.row(chosen);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(x, i, c, j));
  }
  return c;
}

inline KMeansResult lloyd(const ag::Mat& x, ag::Mat centers, int max_iter) {
  const Eigen::Index n = x.rows();
  const int k = static_cast<int>(centers.rows());
  KMeansResult r;
  r.labels.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double d = sq_dist(x, i, centers, j);
        if (d < bd) bd = d, best = j;
      }
      if (r.labels[static_cast<std::size_t>(i)] != best) changed = true;
      r.labels[static_cast<std::size_t>(i)] = best;
    }
    r.iterations = it + 1;
    if (!changed) break;
    ag::Mat sum = ag::Mat::Zero(k, x.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(r.labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++count[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
    }
    // Empty clusters keep their previous center.
    for (int j = 0; j < k; ++j)
      if (count[static_cast<std::size_t>(j)] > 0) centers.row(j) = sum.row(j) / count[static_cast<std::size_t>(j)];
  }
  r.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) r.inertia += sq_dist(x, i, centers, r.labels[static_cast<std::size_t>(i)]);
  r.centers = std::move(centers);
  return r;
}

}  // namespace detail

inline KMeansResult kmeans(const ag::Mat& x, const KMeansOptions& opt) {
  require(opt.k >= 1, "kmeans: k must be >= 1");
  require(opt.k <= x.rows(), "kmeans: k = " + std::to_string(opt.k) + " exceeds the number of points (" +
                                 std::to_string(x.rows()) + ")");
  require(opt.max_iter >= 1 && opt.restarts >= 1, "kmeans: max_iter and restarts must be >= 1");
  require(x.allFinite(), "kmeans: non-finite input");
  std::mt19937_64 rng(opt.seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < opt.restarts; ++r) {
    KMeansResult cur = detail::lloyd(x, detail::kmeans_pp_init(x, opt.k, rng), opt.max_iter);
    if (cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

}  // namespace edadet
