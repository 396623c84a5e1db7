#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace knitvh {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Positions stacked as [x0 y0 z0 x1 y1 z1 ...].
inline Eigen::Map<VecX> flatten(std::vector<Vec3>& pts) {
  return {pts.empty() ? nullptr : pts.front().data(), static_cast<Eigen::Index>(3 * pts.size())};
}
inline Eigen::Map<const VecX> flatten(const std::vector<Vec3>& pts) {
  return {pts.empty() ? nullptr : pts.front().data(), static_cast<Eigen::Index>(3 * pts.size())};
}
std::vector<Vec3> unflatten(const VecX& x);

/// Raised when a numerical procedure cannot produce a valid result (exit code 3 at the CLI).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that violates an operation's precondition; `index` names the offending item when known.
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what, long index = -1)
      : std::invalid_argument(what), index(index) {}
  long index;
};

/// Simulation blew up (NaN or runaway displacement) at `frame` / `iteration`.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, long where) : NumericalError(what), where(where) {}
  long where;
};

}  // namespace knitvh
