#pragma once

#include "knitvh/ajacobi.hpp"
#include "knitvh/cms.hpp"
#include "knitvh/common.hpp"
#include "knitvh/material.hpp"
#include "knitvh/volmesh.hpp"

#include <Eigen/SparseCholesky>

#include <memory>
#include <optional>

namespace knitvh {

struct Collider {
  enum class Kind { Plane, Sphere };
  Kind kind = Kind::Plane;
  Vec3 point = Vec3::Zero();  // plane point or sphere center
  Vec3 normal = Vec3::UnitZ();
  double radius = 0.0;

  static Collider plane(const Vec3& point, const Vec3& normal);
  static Collider sphere(const Vec3& center, double radius);
  /// Closest surface point when p penetrates.
  std::optional<Vec3> project(const Vec3& p) const;
};

/// Penetrating nodes of stacked positions x and their projected targets.
std::vector<std::pair<int, Vec3>> collideProject(const VecX& x, const std::vector<Collider>& colliders);

/// K = M/dt^2 + sum_e 2 V_e (gs_e + gv_e) B_e^T (D^T D) B_e over all 3n DOFs.
SpMat assembleGlobal(const VolumeMesh& mesh, const MaterialField& gamma, double dt);
/// The same matrix on one coordinate (K = Ks kron I3).
SpMat assembleScalarGlobal(const VolumeMesh& mesh, const MaterialField& gamma, double dt, const VecX& mass);

struct PdOptions {
  int iterations = 30;
  enum class Global { Direct, Cms } global = Global::Direct;
  int domains = 2;
  int modesPerDomain = 20;
  /// Element domain labels; empty selects slabs along the longest axis.
  std::vector<int> elementDomain;
  AJacobiOptions jacobi;
  /// Contact stiffness as a multiple of the node's mass / dt^2 (mean mass for empty nodes).
  double collisionStiffness = 1e4;
};

struct SolverState {
  VecX x;
  VecX v;
  double dt = 1.0 / 150.0;
  std::vector<char> pinnedNode;
  /// Stacked targets; only pinned entries are read.
  VecX pinTargets;
  std::vector<Collider> colliders;
};

/// Projective dynamics on the lumped-mass mesh. The global matrix is factorized once per material
/// and contact set.
class PdSolver {
 public:
  PdSolver(const VolumeMesh& mesh, MaterialField gamma, double dt, std::vector<char> pinnedNode, PdOptions opt = {});

  void setMaterial(MaterialField gamma);
  const MaterialField& material() const { return gamma_; }
  const PdOptions& options() const { return opt_; }

  /// Local/global iterations on Phi(x) = 1/(2 dt^2)|x - y|_M^2 + E(x) from x0; pinned nodes stay at
  /// x0. `trace` receives Phi after every iteration.
  VecX minimize(const VecX& y, const VecX& x0, const std::vector<Collider>& colliders = {},
                std::vector<double>* trace = nullptr);

  /// One implicit step with nodal external force f; pinned nodes are moved to their targets and
  /// penetrating nodes end on the collider surfaces.
  SolverState step(const SolverState& state, const VecX& force);

 private:
  void factorize(const std::vector<std::pair<int, Vec3>>& contacts);
  MatX globalSolve(const MatX& rhs);

  const VolumeMesh* mesh_;
  MaterialField gamma_;
  double dt_;
  std::vector<char> pinned_;
  PdOptions opt_;
  std::vector<int> freeIndex_;
  std::vector<int> freeNodes_;
  SpMat Kfull_;
  SpMat Kff_;
  std::vector<int> contactKey_;
  bool factorized_ = false;
  std::unique_ptr<Eigen::SimplicialLDLT<SpMat>> direct_;
  std::unique_ptr<DomainDecomposition> cms_;
  std::vector<int> elementDomain_;
};

}  // namespace knitvh
