#include "knitvh/eigs.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <random>

namespace knitvh {

namespace {

EigenPairs denseEigenpairs(const SpMat& A, int k) {
  Eigen::SelfAdjointEigenSolver<MatX> es{MatX(A)};
  if (es.info() != Eigen::Success) throw NumericalError("dense eigensolver failed");
  return {es.eigenvalues().head(k), es.eigenvectors().leftCols(k), true};
}

MatX orthonormalize(const MatX& Y) {
  Eigen::HouseholderQR<MatX> qr(Y);
  return qr.householderQ() * MatX::Identity(Y.rows(), Y.cols());
}

}  // namespace

EigenPairs smallestEigenpairs(const SpMat& A, int k, double tol, int maxIterations) {
  const int n = static_cast<int>(A.rows());
  if (A.cols() != n) throw InvalidInput("eigenproblem matrix must be square");
  if (k <= 0) return {VecX(0), MatX(n, 0), true};
  if (k > n) throw InvalidInput("more eigenpairs requested than the matrix dimension");
  if (n <= 800 || 3 * k >= n) return denseEigenpairs(A, k);

  // Shift-invert with a small positive shift so semidefinite matrices factorize.
  const double scale = A.diagonal().cwiseAbs().maxCoeff();
  SpMat shifted = A;
  for (int i = 0; i < n; ++i) shifted.coeffRef(i, i) += 1e-8 * scale;
  Eigen::SimplicialLDLT<SpMat> ldlt(shifted);
  if (ldlt.info() != Eigen::Success) throw NumericalError("shift-invert factorization failed");

  const int p = std::min(n, 2 * k + 8);
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> normal;
  MatX Q(n, p);
  for (int j = 0; j < p; ++j)
    for (int i = 0; i < n; ++i) Q(i, j) = normal(rng);
  Q = orthonormalize(Q);

  EigenPairs out;
  out.converged = false;
  for (int it = 0; it < maxIterations; ++it) {
    Q = orthonormalize(ldlt.solve(Q));
    const MatX AQ = A * Q;
    const MatX T = Q.transpose() * AQ;
    Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (T + T.transpose()));
    Q = Q * es.eigenvectors();
    const MatX R = A * Q.leftCols(k) - Q.leftCols(k) * es.eigenvalues().head(k).asDiagonal();
    out.values = es.eigenvalues().head(k);
    out.vectors = Q.leftCols(k);
    if (R.colwise().norm().maxCoeff() <= tol * scale) {
      out.converged = true;
      break;
    }
  }
  return out;
}

double spectralRadius(const SpMat& A, int iterations) {
  VecX v = VecX::Ones(A.rows()).normalized();
  for (int i = 0; i < A.rows(); i += 2) v[i] = -v[i];  // break symmetry with constant modes
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    const VecX w = A * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    lambda = v.dot(w);
    v = w / norm;
  }
  return std::abs(lambda);
}

}  // namespace knitvh
