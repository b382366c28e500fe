#pragma once

#include <Eigen/Dense>

#include <vector>

namespace crm {

// Minimum-cost assignment of every row to a distinct column (rows <= cols).
// result[r] is the column assigned to row r.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

// Same optimum, with ties among optimal assignments broken lexicographically:
// row 0 takes the smallest feasible column, then row 1, and so on.
std::vector<int> solve_assignment_canonical(const Eigen::MatrixXd& cost);

double assignment_cost(const Eigen::MatrixXd& cost, const std::vector<int>& assignment);

}  // namespace crm
