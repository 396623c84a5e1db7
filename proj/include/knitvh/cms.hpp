#pragma once

#include "knitvh/common.hpp"
#include "knitvh/volmesh.hpp"

#include <Eigen/Dense>

namespace knitvh {

/// Element labels in `domains` slabs of equal element count along the longest bounding-box axis.
std::vector<int> slabPartition(const VolumeMesh& mesh, int domains);

/// Component mode synthesis of a symmetric positive definite matrix K over a node partition.
/// Interior DOFs of domain i move as Psi_i x_b + Phi_i p_i with boundary modes
/// Psi_i = -K_ii^{-1} K_ib and the lowest interior eigenmodes Phi_i. In that basis the reduced
/// matrix is block diagonal: Lambda_i per domain and the Schur complement on the boundary.
struct DomainDecomposition {
  std::vector<std::vector<int>> internalDofs;
  std::vector<int> boundaryDofs;
  std::vector<MatX> Psi;
  std::vector<MatX> Phi;
  std::vector<VecX> Lambda;
  Eigen::LLT<MatX> schur;
  int dimension = 0;

  int domainCount() const { return static_cast<int>(internalDofs.size()); }
  /// Reduced solve followed by prolongation; columns of b are independent right-hand sides.
  MatX solve(const MatX& b) const;
  /// Dense basis [Phi blocks | Psi columns] (dimension x reduced size); for small problems only.
  MatX basis() const;
};

/// `dofDomain[i]` is the domain of DOF i, or -1 when it lies on the shared boundary.
DomainDecomposition buildCms(const SpMat& K, const std::vector<int>& dofDomain, int modesPerDomain);

/// DOF labels for a scalar node system: a node is internal to a domain when every element touching
/// it belongs to that domain; `freeIndex` maps nodes to rows of K (-1 for eliminated nodes).
std::vector<int> nodeDomains(const VolumeMesh& mesh, const std::vector<int>& elementDomain,
                             const std::vector<int>& freeIndex, int freeCount);

}  // namespace knitvh
