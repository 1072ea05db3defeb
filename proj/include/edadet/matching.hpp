#pragma once

#include <algorithm>
#include <limits>
#include <utility>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/errors.hpp"

namespace edadet {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, target), ascending query index
  std::vector<int> unmatched_queries;      // ascending

  double total_cost(const ag::Mat& cost) const {
    double s = 0;
    for (auto [q, t] : pairs) s += cost(q, t);
    return s;
  }
};

namespace detail {

// Rows-to-columns assignment for rows <= cols using shortest augmenting paths
// with dual potentials; O(rows^2 * cols).
inline std::vector<int> assign_rows(const ag::Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Minimum-total-cost one-to-one assignment between queries (rows) and
// targets (columns); min(rows, cols) pairs.
inline MatchResult assign_min_cost(const ag::Mat& cost) {
  require(cost.allFinite(), "assign_min_cost: non-finite cost");
  const int nq = static_cast<int>(cost.rows());
  const int nt = static_cast<int>(cost.cols());
  MatchResult r;
  std::vector<int> q_to_t(nq, -1);
  if (nq > 0 && nt > 0) {
    if (nq <= nt) {
      q_to_t = detail::assign_rows(cost);
    } else {
      const auto t_to_q = detail::assign_rows(cost.transpose());
      for (int t = 0; t < nt; ++t) q_to_t[t_to_q[t]] = t;
    }
  }
  for (int q = 0; q < nq; ++q) {
    if (q_to_t[q] >= 0) r.pairs.emplace_back(q, q_to_t[q]);
    else r.unmatched_queries.push_back(q);
  }
  return r;
}

}  // namespace edadet
