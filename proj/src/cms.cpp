#include "knitvh/cms.hpp"

#include "knitvh/eigs.hpp"
#include "knitvh/equilibrium.hpp"
#include "knitvh/log.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <numeric>

namespace knitvh {

std::vector<int> slabPartition(const VolumeMesh& mesh, int domains) {
  const int ne = mesh.elementCount();
  if (domains < 1) throw InvalidInput("domain count must be positive");
  std::vector<int> label(ne, 0);
  if (ne == 0 || domains == 1) return label;
  Vec3 lo = mesh.nodes.front();
  Vec3 hi = lo;
  for (const auto& p : mesh.nodes) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Eigen::Index axis;
  (hi - lo).maxCoeff(&axis);
  std::vector<double> key(ne);
  for (int e = 0; e < ne; ++e) key[e] = mesh.elementCentroid(e)[axis];
  std::vector<int> order(ne);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return key[a] < key[b]; });
  for (int r = 0; r < ne; ++r) label[order[r]] = static_cast<int>(static_cast<long>(r) * domains / ne);
  return label;
}

std::vector<int> nodeDomains(const VolumeMesh& mesh, const std::vector<int>& elementDomain,
                             const std::vector<int>& freeIndex, int freeCount) {
  std::vector<int> nodeLabel(mesh.nodeCount(), -2);
  for (int e = 0; e < mesh.elementCount(); ++e)
    for (int v : mesh.tets[e]) {
      if (nodeLabel[v] == -2) nodeLabel[v] = elementDomain[e];
      else if (nodeLabel[v] != elementDomain[e]) nodeLabel[v] = -1;
    }
  std::vector<int> out(freeCount, -1);
  for (int v = 0; v < mesh.nodeCount(); ++v)
    if (freeIndex[v] >= 0) out[freeIndex[v]] = std::max(nodeLabel[v], -1);
  return out;
}

namespace {

MatX denseBlock(const SpMat& K, const std::vector<int>& rows, const std::vector<int>& cols) {
  std::vector<int> rowMap(K.rows(), -1);
  for (size_t r = 0; r < rows.size(); ++r) rowMap[rows[r]] = static_cast<int>(r);
  MatX B = MatX::Zero(rows.size(), cols.size());
  for (size_t c = 0; c < cols.size(); ++c)
    for (SpMat::InnerIterator it(K, cols[c]); it; ++it)
      if (rowMap[it.row()] >= 0) B(rowMap[it.row()], c) = it.value();
  return B;
}

MatX gatherRows(const MatX& b, const std::vector<int>& rows) {
  MatX out(rows.size(), b.cols());
  for (size_t r = 0; r < rows.size(); ++r) out.row(r) = b.row(rows[r]);
  return out;
}

}  // namespace

DomainDecomposition buildCms(const SpMat& K, const std::vector<int>& dofDomain, int modesPerDomain) {
  const int n = static_cast<int>(K.rows());
  if (static_cast<int>(dofDomain.size()) != n) throw InvalidInput("one domain label per DOF is required");
  DomainDecomposition dd;
  dd.dimension = n;
  const int domains = dofDomain.empty() ? 0 : *std::max_element(dofDomain.begin(), dofDomain.end()) + 1;
  dd.internalDofs.assign(domains, {});
  for (int i = 0; i < n; ++i) {
    if (dofDomain[i] < 0) dd.boundaryDofs.push_back(i);
    else dd.internalDofs[dofDomain[i]].push_back(i);
  }
  const int nb = static_cast<int>(dd.boundaryDofs.size());
  MatX S = denseBlock(K, dd.boundaryDofs, dd.boundaryDofs);
  dd.Psi.resize(domains);
  dd.Phi.resize(domains);
  dd.Lambda.resize(domains);
  for (int d = 0; d < domains; ++d) {
    const auto& I = dd.internalDofs[d];
    const int ni = static_cast<int>(I.size());
    if (ni == 0) {
      dd.Psi[d] = MatX(0, nb);
      dd.Phi[d] = MatX(0, 0);
      dd.Lambda[d] = VecX(0);
      continue;
    }
    const SpMat Kii = restrictMatrix(K, I);
    Eigen::SimplicialLDLT<SpMat> ldlt(Kii);
    if (ldlt.info() != Eigen::Success) throw NumericalError("interior block factorization failed");
    const MatX Kib = denseBlock(K, I, dd.boundaryDofs);
    dd.Psi[d] = -ldlt.solve(Kib);
    S.noalias() += Kib.transpose() * dd.Psi[d];

    int modes = std::min(modesPerDomain, ni);
    while (true) {
      try {
        EigenPairs ep = smallestEigenpairs(Kii, modes);
        if (!ep.converged) logWarning("interior eigenmodes did not fully converge");
        dd.Phi[d] = ep.vectors;
        dd.Lambda[d] = ep.values;
        break;
      } catch (const NumericalError&) {
        if (modes == 0) throw;
        modes /= 2;
        logWarning("eigensolver failed; reducing interior mode count to " + std::to_string(modes));
      }
    }
  }
  S = 0.5 * (S + S.transpose()).eval();
  dd.schur.compute(S);
  if (nb > 0 && dd.schur.info() != Eigen::Success) throw NumericalError("boundary Schur complement is not positive definite");
  return dd;
}

MatX DomainDecomposition::solve(const MatX& b) const {
  if (b.rows() != dimension) throw InvalidInput("right-hand side size differs from the decomposition");
  MatX x = MatX::Zero(dimension, b.cols());
  std::vector<MatX> bi(domainCount());
  MatX rb = gatherRows(b, boundaryDofs);
  for (int d = 0; d < domainCount(); ++d) {
    bi[d] = gatherRows(b, internalDofs[d]);
    if (!internalDofs[d].empty()) rb.noalias() += Psi[d].transpose() * bi[d];
  }
  MatX xb = boundaryDofs.empty() ? MatX(0, b.cols()) : MatX(schur.solve(rb));
  for (size_t k = 0; k < boundaryDofs.size(); ++k) x.row(boundaryDofs[k]) = xb.row(k);
  for (int d = 0; d < domainCount(); ++d) {
    if (internalDofs[d].empty()) continue;
    MatX xi = Psi[d] * xb;
    if (Phi[d].cols() > 0) {
      const MatX p = Lambda[d].cwiseInverse().asDiagonal() * (Phi[d].transpose() * bi[d]);
      xi.noalias() += Phi[d] * p;
    }
    for (size_t k = 0; k < internalDofs[d].size(); ++k) x.row(internalDofs[d][k]) = xi.row(k);
  }
  return x;
}

MatX DomainDecomposition::basis() const {
  int cols = static_cast<int>(boundaryDofs.size());
  for (const auto& P : Phi) cols += static_cast<int>(P.cols());
  MatX B = MatX::Zero(dimension, cols);
  int c = 0;
  for (int d = 0; d < domainCount(); ++d) {
    for (int j = 0; j < Phi[d].cols(); ++j, ++c)
      for (size_t k = 0; k < internalDofs[d].size(); ++k) B(internalDofs[d][k], c) = Phi[d](k, j);
  }
  for (size_t j = 0; j < boundaryDofs.size(); ++j, ++c) {
    B(boundaryDofs[j], c) = 1.0;
    for (int d = 0; d < domainCount(); ++d)
      for (size_t k = 0; k < internalDofs[d].size(); ++k) B(internalDofs[d][k], c) = Psi[d](k, j);
  }
  return B;
}

}  // namespace knitvh
