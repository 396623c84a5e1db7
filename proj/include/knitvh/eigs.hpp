#pragma once

#include "knitvh/common.hpp"

namespace knitvh {

struct EigenPairs {
  VecX values;   // ascending
  MatX vectors;  // orthonormal columns
  bool converged = true;
};

/// The k smallest eigenpairs of a symmetric positive semidefinite sparse matrix. Small problems use a
/// dense solver; larger ones use shift-invert subspace iteration with Rayleigh-Ritz.
EigenPairs smallestEigenpairs(const SpMat& A, int k, double tol = 1e-10, int maxIterations = 500);

/// Largest eigenvalue magnitude estimate by power iteration with a fixed start vector.
double spectralRadius(const SpMat& A, int iterations = 100);

}  // namespace knitvh
