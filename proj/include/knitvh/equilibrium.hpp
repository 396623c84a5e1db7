#pragma once

#include "knitvh/common.hpp"
#include "knitvh/material.hpp"
#include "knitvh/volmesh.hpp"

namespace knitvh {

/// Total constraint energy sum_e E_e(F_e(x)).
double elasticEnergy(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x);
/// dE/dx.
VecX elasticGradient(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x);
/// d2E/dx2; with `projectPsd` each element's stress derivative is clamped to its PSD part.
SpMat elasticHessian(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x, bool projectPsd);
/// dg/dgamma (3n x 2nE): column e holds the gammaS force pattern, column nE + e the gammaV one.
SpMat forceGammaJacobian(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x);

/// One implicit step written as a minimization:
///   Phi(x) = 1/(2 dt^2) |x - y|_M^2 + E(x),  g(x) = M/dt^2 (x - y) + dE/dx,
/// with pinned nodes held at their current positions.
struct EquilibriumProblem {
  const VolumeMesh* mesh = nullptr;
  VecX mass;  // per node
  double dt = 1.0 / 150.0;
  VecX target;  // y, stacked 3n
  std::vector<char> pinnedNode;

  EquilibriumProblem() = default;
  EquilibriumProblem(const VolumeMesh& m, double dt, VecX target);

  double objective(const MaterialField& gamma, const VecX& x) const;
  /// g with pinned entries zeroed.
  VecX residual(const MaterialField& gamma, const VecX& x) const;
  /// dg/dx over all DOFs (pins not removed).
  SpMat jacobian(const MaterialField& gamma, const VecX& x, bool projectPsd) const;
  /// Stacked indices of free DOFs.
  std::vector<int> freeDofs() const;
};

/// Sub-matrix of a square sparse matrix on the given sorted index set.
SpMat restrictMatrix(const SpMat& A, const std::vector<int>& keep);

struct PolishResult {
  VecX x;
  int iterations = 0;
  double residual = 0.0;  // |g|_inf over free DOFs
  bool converged = false;
  bool stagnated = false;
};

/// Newton iterations with halving line search on Phi. Uses the exact Hessian when it is positive
/// definite and yields descent, else the PSD-projected one.
PolishResult newtonPolish(const EquilibriumProblem& problem, const MaterialField& gamma, const VecX& x0,
                          double tol = 1e-5, int maxIterations = 50);

}  // namespace knitvh
