#include "knitvh/pd_solver.hpp"

#include "knitvh/equilibrium.hpp"
#include "knitvh/transfer.hpp"

#include <cmath>

namespace knitvh {

Collider Collider::plane(const Vec3& point, const Vec3& normal) {
  if (!(normal.norm() > 0.0)) throw InvalidInput("plane normal must be nonzero");
  Collider c;
  c.kind = Kind::Plane;
  c.point = point;
  c.normal = normal.normalized();
  return c;
}

Collider Collider::sphere(const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw InvalidInput("sphere radius must be positive");
  Collider c;
  c.kind = Kind::Sphere;
  c.point = center;
  c.radius = radius;
  return c;
}

std::optional<Vec3> Collider::project(const Vec3& p) const {
  if (kind == Kind::Plane) {
    const double depth = (p - point).dot(normal);
    if (depth >= 0.0) return std::nullopt;
    return Vec3(p - depth * normal);
  }
  const Vec3 r = p - point;
  const double dist = r.norm();
  if (dist >= radius) return std::nullopt;
  const Vec3 dir = dist > 0.0 ? Vec3(r / dist) : Vec3::UnitZ();
  return Vec3(point + radius * dir);
}

std::vector<std::pair<int, Vec3>> collideProject(const VecX& x, const std::vector<Collider>& colliders) {
  std::vector<std::pair<int, Vec3>> out;
  if (colliders.empty()) return out;
  for (Eigen::Index i = 0; i < x.size() / 3; ++i) {
    Vec3 p = x.segment<3>(3 * i);
    bool hit = false;
    for (const auto& c : colliders) {
      if (auto q = c.project(p)) {
        p = *q;
        hit = true;
      }
    }
    if (hit) out.emplace_back(static_cast<int>(i), p);
  }
  return out;
}

SpMat assembleScalarGlobal(const VolumeMesh& mesh, const MaterialField& gamma, double dt, const VecX& mass) {
  if (!(dt > 0.0)) throw InvalidInput("dt must be positive");
  if (gamma.elementCount() != mesh.elementCount()) throw InvalidInput("material size differs from the mesh");
  std::vector<Triplet> trips;
  trips.reserve(16 * mesh.elementCount() + mesh.nodeCount());
  for (int i = 0; i < mesh.nodeCount(); ++i) trips.emplace_back(i, i, mass[i] / (dt * dt));
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const ShapeGrad& G = mesh.shapeGradients[e];
    const double w = 2.0 * mesh.elementVolume[e] * (gamma.gammaS(e) + gamma.gammaV(e));
    const Eigen::Matrix4d block = w * G.transpose() * G;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) trips.emplace_back(mesh.tets[e][a], mesh.tets[e][b], block(a, b));
  }
  SpMat K(mesh.nodeCount(), mesh.nodeCount());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

SpMat assembleGlobal(const VolumeMesh& mesh, const MaterialField& gamma, double dt) {
  const SpMat Ks = assembleScalarGlobal(mesh, gamma, dt, mesh.lumpedMass);
  std::vector<Triplet> trips;
  trips.reserve(3 * Ks.nonZeros());
  for (int k = 0; k < Ks.outerSize(); ++k)
    for (SpMat::InnerIterator it(Ks, k); it; ++it)
      for (int c = 0; c < 3; ++c) trips.emplace_back(3 * it.row() + c, 3 * it.col() + c, it.value());
  SpMat K(mesh.dofCount(), mesh.dofCount());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

PdSolver::PdSolver(const VolumeMesh& mesh, MaterialField gamma, double dt, std::vector<char> pinnedNode, PdOptions opt)
    : mesh_(&mesh), gamma_(std::move(gamma)), dt_(dt), pinned_(std::move(pinnedNode)), opt_(std::move(opt)) {
  if (!(dt > 0.0)) throw InvalidInput("dt must be positive");
  if (pinned_.empty()) pinned_.assign(mesh.nodeCount(), 0);
  if (static_cast<int>(pinned_.size()) != mesh.nodeCount()) throw InvalidInput("pin mask size differs from the mesh");
  if (opt_.iterations < 1) throw InvalidInput("PD needs at least one iteration");
  freeIndex_.assign(mesh.nodeCount(), -1);
  for (int i = 0; i < mesh.nodeCount(); ++i)
    if (!pinned_[i]) {
      freeIndex_[i] = static_cast<int>(freeNodes_.size());
      freeNodes_.push_back(i);
    }
  elementDomain_ = opt_.elementDomain.empty() ? slabPartition(mesh, opt_.domains) : opt_.elementDomain;
  if (static_cast<int>(elementDomain_.size()) != mesh.elementCount())
    throw InvalidInput("one domain label per element is required");
  setMaterial(gamma_);
}

void PdSolver::setMaterial(MaterialField gamma) {
  gamma.validate();
  gamma_ = std::move(gamma);
  Kfull_ = assembleScalarGlobal(*mesh_, gamma_, dt_, mesh_->lumpedMass);
  factorized_ = false;
}

void PdSolver::factorize(const std::vector<std::pair<int, Vec3>>& contacts) {
  std::vector<int> key;
  for (const auto& c : contacts) key.push_back(c.first);
  if (factorized_ && key == contactKey_) return;
  contactKey_ = key;
  Kff_ = restrictMatrix(Kfull_, freeNodes_);
  const double meanMass = mesh_->lumpedMass.mean();
  for (int n : key) {
    const double m = mesh_->lumpedMass[n] > 0.0 ? mesh_->lumpedMass[n] : meanMass;
    Kff_.coeffRef(freeIndex_[n], freeIndex_[n]) += opt_.collisionStiffness * m / (dt_ * dt_);
  }
  if (opt_.global == PdOptions::Global::Direct) {
    direct_ = std::make_unique<Eigen::SimplicialLDLT<SpMat>>(Kff_);
    if (direct_->info() != Eigen::Success || (direct_->vectorD().array() <= 0.0).any())
      throw NumericalError("global matrix is not positive definite");
  } else {
    cms_ = std::make_unique<DomainDecomposition>(buildCms(
        Kff_, nodeDomains(*mesh_, elementDomain_, freeIndex_, static_cast<int>(freeNodes_.size())), opt_.modesPerDomain));
  }
  factorized_ = true;
}

MatX PdSolver::globalSolve(const MatX& rhs) {
  if (opt_.global == PdOptions::Global::Direct) return direct_->solve(rhs);
  const MatX x = cms_->solve(rhs);
  if (opt_.jacobi.sweeps <= 0) return x;
  return aJacobiRefine(Kff_, rhs, x, opt_.jacobi).x;
}

VecX PdSolver::minimize(const VecX& y, const VecX& x0, const std::vector<Collider>& colliders,
                        std::vector<double>* trace) {
  const VolumeMesh& mesh = *mesh_;
  const int n = mesh.nodeCount();
  if (y.size() != mesh.dofCount() || x0.size() != mesh.dofCount()) throw InvalidInput("state size differs from the mesh");
  const int nf = static_cast<int>(freeNodes_.size());
  VecX x = x0;

  // Constant part of the right-hand side: inertia minus the coupling to pinned nodes.
  MatX pinnedPos = MatX::Zero(n, 3);
  for (int i = 0; i < n; ++i)
    if (pinned_[i]) pinnedPos.row(i) = x0.segment<3>(3 * i).transpose();
  const MatX coupling = Kfull_ * pinnedPos;
  MatX base(nf, 3);
  for (int k = 0; k < nf; ++k) {
    const int i = freeNodes_[k];
    base.row(k) = mesh.lumpedMass[i] / (dt_ * dt_) * y.segment<3>(3 * i).transpose() - coupling.row(i);
  }

  EquilibriumProblem phi(mesh, dt_, y);
  const double meanMass = mesh.lumpedMass.mean();
  for (int it = 0; it < opt_.iterations; ++it) {
    MatX elastic = MatX::Zero(n, 3);
    for (int e = 0; e < mesh.elementCount(); ++e) {
      const Mat3 F = mesh.deformationGradient(e, x);
      const Mat3 target = gamma_.gammaS(e) * projectSO3(F) + gamma_.gammaV(e) * projectSL3(F).V;
      const Eigen::Matrix<double, 4, 3> c = 2.0 * mesh.elementVolume[e] * mesh.shapeGradients[e].transpose() * target.transpose();
      for (int a = 0; a < 4; ++a) elastic.row(mesh.tets[e][a]) += c.row(a);
    }
    std::vector<std::pair<int, Vec3>> contacts;
    for (const auto& c : collideProject(x, colliders))
      if (!pinned_[c.first]) contacts.push_back(c);
    factorize(contacts);

    MatX rhs = base;
    for (int k = 0; k < nf; ++k) rhs.row(k) += elastic.row(freeNodes_[k]);
    for (const auto& [node, p] : contacts) {
      const double m = mesh.lumpedMass[node] > 0.0 ? mesh.lumpedMass[node] : meanMass;
      rhs.row(freeIndex_[node]) += opt_.collisionStiffness * m / (dt_ * dt_) * p.transpose();
    }
    const MatX X = globalSolve(rhs);
    if (!X.allFinite()) throw DivergenceError("non-finite PD iterate", it);
    for (int k = 0; k < nf; ++k) x.segment<3>(3 * freeNodes_[k]) = X.row(k).transpose();
    if (trace) trace->push_back(phi.objective(gamma_, x));
  }
  return x;
}

SolverState PdSolver::step(const SolverState& state, const VecX& force) {
  const VolumeMesh& mesh = *mesh_;
  if (force.size() != mesh.dofCount()) throw InvalidInput("force size differs from the mesh");
  const VecX inv = inverseMass(mesh);
  VecX y = state.x + dt_ * state.v;
  for (int i = 0; i < mesh.nodeCount(); ++i) y.segment<3>(3 * i) += dt_ * dt_ * inv[i] * force.segment<3>(3 * i);
  // Massless nodes have no inertia target; start them with the centre-of-mass acceleration.
  Vec3 total = Vec3::Zero();
  for (int i = 0; i < mesh.nodeCount(); ++i) total += force.segment<3>(3 * i);
  const double m = mesh.lumpedMass.sum();
  VecX x0 = y;
  if (m > 0.0)
    for (int i = 0; i < mesh.nodeCount(); ++i)
      if (inv[i] == 0.0) x0.segment<3>(3 * i) += dt_ * dt_ / m * total;
  for (int i = 0; i < mesh.nodeCount(); ++i)
    if (pinned_[i]) x0.segment<3>(3 * i) = state.pinTargets.segment<3>(3 * i);
  VecX x = minimize(y, x0, state.colliders);
  for (const auto& [node, p] : collideProject(x, state.colliders))
    if (!pinned_[node]) x.segment<3>(3 * node) = p;
  SolverState next = state;
  next.v = (x - state.x) / dt_;
  next.x = std::move(x);
  return next;
}

}  // namespace knitvh
