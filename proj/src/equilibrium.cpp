#include "knitvh/equilibrium.hpp"

#include <Eigen/SparseCholesky>

#include <cmath>
#include <limits>

namespace knitvh {

namespace {

void checkSizes(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x) {
  if (gamma.elementCount() != mesh.elementCount()) throw InvalidInput("material size differs from the mesh");
  if (x.size() != mesh.dofCount()) throw InvalidInput("position vector size differs from the mesh");
}

}  // namespace

double elasticEnergy(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x) {
  checkSizes(mesh, gamma, x);
  double E = 0.0;
  for (int e = 0; e < mesh.elementCount(); ++e)
    E += elementEnergy(mesh.deformationGradient(e, x), gamma.gammaS(e), gamma.gammaV(e), mesh.elementVolume[e]);
  return E;
}

VecX elasticGradient(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x) {
  checkSizes(mesh, gamma, x);
  VecX g = VecX::Zero(x.size());
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const auto r = elementForceAndDGamma(mesh.deformationGradient(e, x), mesh.shapeGradients[e], gamma.gammaS(e),
                                         gamma.gammaV(e), mesh.elementVolume[e]);
    const auto dofs = mesh.elementDofs(e);
    for (int k = 0; k < 12; ++k) g[dofs[k]] += r.gradient[k];
  }
  return g;
}

SpMat elasticHessian(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x, bool projectPsd) {
  checkSizes(mesh, gamma, x);
  std::vector<Triplet> trips;
  trips.reserve(144 * mesh.elementCount());
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const Mat12 H = elementHessian(mesh.deformationGradient(e, x), mesh.shapeGradients[e], gamma.gammaS(e),
                                   gamma.gammaV(e), mesh.elementVolume[e], projectPsd);
    const auto dofs = mesh.elementDofs(e);
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 12; ++j) trips.emplace_back(dofs[i], dofs[j], H(i, j));
  }
  SpMat K(x.size(), x.size());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

SpMat forceGammaJacobian(const VolumeMesh& mesh, const MaterialField& gamma, const VecX& x) {
  checkSizes(mesh, gamma, x);
  const int ne = mesh.elementCount();
  std::vector<Triplet> trips;
  trips.reserve(24 * ne);
  for (int e = 0; e < ne; ++e) {
    const auto r = elementForceAndDGamma(mesh.deformationGradient(e, x), mesh.shapeGradients[e], gamma.gammaS(e),
                                         gamma.gammaV(e), mesh.elementVolume[e]);
    const auto dofs = mesh.elementDofs(e);
    for (int k = 0; k < 12; ++k) {
      trips.emplace_back(dofs[k], e, r.dGammaS[k]);
      trips.emplace_back(dofs[k], ne + e, r.dGammaV[k]);
    }
  }
  SpMat J(x.size(), 2 * ne);
  J.setFromTriplets(trips.begin(), trips.end());
  return J;
}

EquilibriumProblem::EquilibriumProblem(const VolumeMesh& m, double dt_, VecX target_)
    : mesh(&m), mass(m.lumpedMass), dt(dt_), target(std::move(target_)), pinnedNode(m.nodeCount(), 0) {
  if (!(dt > 0.0)) throw InvalidInput("dt must be positive");
  if (target.size() != m.dofCount()) throw InvalidInput("target size differs from the mesh");
}

double EquilibriumProblem::objective(const MaterialField& gamma, const VecX& x) const {
  double inertia = 0.0;
  for (int i = 0; i < mesh->nodeCount(); ++i) inertia += mass[i] * (x.segment<3>(3 * i) - target.segment<3>(3 * i)).squaredNorm();
  return 0.5 * inertia / (dt * dt) + elasticEnergy(*mesh, gamma, x);
}

VecX EquilibriumProblem::residual(const MaterialField& gamma, const VecX& x) const {
  VecX g = elasticGradient(*mesh, gamma, x);
  for (int i = 0; i < mesh->nodeCount(); ++i) {
    if (pinnedNode[i]) {
      g.segment<3>(3 * i).setZero();
      continue;
    }
    g.segment<3>(3 * i) += mass[i] / (dt * dt) * (x.segment<3>(3 * i) - target.segment<3>(3 * i));
  }
  return g;
}

SpMat EquilibriumProblem::jacobian(const MaterialField& gamma, const VecX& x, bool projectPsd) const {
  SpMat H = elasticHessian(*mesh, gamma, x, projectPsd);
  for (int i = 0; i < mesh->nodeCount(); ++i)
    for (int c = 0; c < 3; ++c) H.coeffRef(3 * i + c, 3 * i + c) += mass[i] / (dt * dt);
  return H;
}

std::vector<int> EquilibriumProblem::freeDofs() const {
  std::vector<int> out;
  for (int i = 0; i < mesh->nodeCount(); ++i)
    if (!pinnedNode[i])
      for (int c = 0; c < 3; ++c) out.push_back(3 * i + c);
  return out;
}

SpMat restrictMatrix(const SpMat& A, const std::vector<int>& keep) {
  std::vector<int> map(A.rows(), -1);
  for (size_t k = 0; k < keep.size(); ++k) map[keep[k]] = static_cast<int>(k);
  std::vector<Triplet> trips;
  trips.reserve(A.nonZeros());
  for (int c = 0; c < A.outerSize(); ++c) {
    if (map[c] < 0) continue;
    for (SpMat::InnerIterator it(A, c); it; ++it)
      if (map[it.row()] >= 0) trips.emplace_back(map[it.row()], map[c], it.value());
  }
  SpMat R(keep.size(), keep.size());
  R.setFromTriplets(trips.begin(), trips.end());
  return R;
}

PolishResult newtonPolish(const EquilibriumProblem& problem, const MaterialField& gamma, const VecX& x0, double tol,
                          int maxIterations) {
  const std::vector<int> free = problem.freeDofs();
  PolishResult out;
  out.x = x0;
  VecX g = problem.residual(gamma, out.x);
  out.residual = g.lpNorm<Eigen::Infinity>();
  if (!std::isfinite(out.residual)) throw NumericalError("non-finite equilibrium residual");
  double phi = problem.objective(gamma, out.x);
  double best = out.residual;
  int sinceImprovement = 0;
  while (out.residual >= tol && out.iterations < maxIterations) {
    VecX gf(free.size());
    for (size_t k = 0; k < free.size(); ++k) gf[k] = g[free[k]];
    VecX step;
    for (bool psd : {false, true}) {
      Eigen::SimplicialLDLT<SpMat> ldlt(restrictMatrix(problem.jacobian(gamma, out.x, psd), free));
      if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any()) continue;
      VecX d = -ldlt.solve(gf);
      if (d.allFinite() && d.dot(gf) < 0.0) {
        step = d;
        break;
      }
    }
    if (step.size() == 0) step = -gf;

    double t = 1.0;
    VecX trial;
    VecX gTrial;
    bool accepted = false;
    for (int halving = 0; halving < 30; ++halving, t *= 0.5) {
      trial = out.x;
      for (size_t k = 0; k < free.size(); ++k) trial[free[k]] += t * step[k];
      const double phiTrial = problem.objective(gamma, trial);
      if (!std::isfinite(phiTrial)) continue;
      gTrial = problem.residual(gamma, trial);
      const double rTrial = gTrial.lpNorm<Eigen::Infinity>();
      // Near the minimum Phi stalls at round-off; a smaller residual then decides.
      const double slack = 1e-13 * std::abs(phi);
      if (phiTrial < phi || (phiTrial <= phi + slack && rTrial < out.residual)) {
        phi = phiTrial;
        accepted = true;
        break;
      }
    }
    ++out.iterations;
    if (!accepted) {
      out.stagnated = true;
      break;
    }
    out.x = trial;
    g = gTrial;
    out.residual = g.lpNorm<Eigen::Infinity>();
    if (out.residual < best) {
      best = out.residual;
      sinceImprovement = 0;
    } else if (++sinceImprovement >= 10) {
      out.stagnated = true;
      break;
    }
  }
  out.converged = out.residual < tol;
  return out;
}

}  // namespace knitvh
