#pragma once

#include "knitvh/common.hpp"

namespace knitvh {

struct AJacobiOptions {
  int sweeps = 30;
  int aggregation = 2;
  double omega = 2.0 / 3.0;
  bool chebyshev = false;
  /// Spectral radius of one aggregated sweep for Chebyshev weighting; <= 0 estimates it.
  double rho = 0.0;
};

struct AJacobiResult {
  MatX x;
  int sweeps = 0;
  double residual = 0.0;  // Frobenius norm of K x - b
  bool diverged = false;
};

/// Aggregated weighted Jacobi: each sweep applies sum_{k<l} (I - w D^-1 K)^k w D^-1 to the residual,
/// which equals l plain weighted-Jacobi sweeps. On a 10x residual growth the best iterate is returned.
AJacobiResult aJacobiRefine(const SpMat& K, const MatX& b, const MatX& x0, const AJacobiOptions& opt = {});

/// One plain weighted-Jacobi sweep x + w D^-1 (b - K x).
MatX jacobiSweep(const SpMat& K, const MatX& b, const MatX& x, double omega);

/// Spectral radius of (I - w D^-1 K)^l by power iteration.
double aggregatedSpectralRadius(const SpMat& K, double omega, int aggregation, int iterations = 200);

}  // namespace knitvh
