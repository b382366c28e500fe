#include "crm/hungarian.hpp"

#include "crm/errors.hpp"

#include <cmath>
#include <limits>

namespace crm {

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n > m) throw CapacityError("assignment: more rows than columns");
  if (n == 0) return {};
  if (!cost.allFinite()) throw ParameterError("assignment: cost matrix contains non-finite entries");
  // Shortest augmenting path with potentials; arrays are 1-based, index 0 is a sentinel.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> match(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
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
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> result(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (match[j] != 0) result[match[j] - 1] = j - 1;
  }
  return result;
}

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& assignment) {
  double total = 0.0;
  for (std::size_t r = 0; r < assignment.size(); ++r) total += cost(static_cast<Eigen::Index>(r), assignment[r]);
  return total;
}

std::vector<int> solve_assignment_canonical(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const std::vector<int> first = solve_assignment(cost);
  if (n <= 1 && m <= 1) return first;
  const double best = assignment_cost(cost, first);
  const double tol = 1e-10 * (1.0 + std::abs(best));

  std::vector<int> result(n, -1);
  std::vector<char> col_used(m, 0);
  double fixed = 0.0;
  for (int r = 0; r < n; ++r) {
    bool placed = false;
    for (int c = 0; c < m && !placed; ++c) {
      if (col_used[c]) continue;
      // Optimal completion of rows r+1.. over the remaining columns.
      std::vector<int> free_cols;
      for (int j = 0; j < m; ++j) {
        if (!col_used[j] && j != c) free_cols.push_back(j);
      }
      const int rest = n - r - 1;
      double completion = 0.0;
      if (rest > 0) {
        Eigen::MatrixXd sub(rest, static_cast<Eigen::Index>(free_cols.size()));
        for (int i = 0; i < rest; ++i) {
          for (std::size_t j = 0; j < free_cols.size(); ++j) sub(i, static_cast<Eigen::Index>(j)) = cost(r + 1 + i, free_cols[j]);
        }
        completion = assignment_cost(sub, solve_assignment(sub));
      }
      if (fixed + cost(r, c) + completion <= best + tol) {
        result[r] = c;
        col_used[c] = 1;
        fixed += cost(r, c);
        placed = true;
      }
    }
    if (!placed) return first;  // numerical corner case: keep the solver's optimum
  }
  return result;
}

}  // namespace crm
