#include "knitvh/eigs.hpp"
#include "knitvh/fitting.hpp"
#include "knitvh/log.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace knitvh {

SpMat elementLaplacian(const VolumeMesh& mesh) {
  const int ne = mesh.elementCount();
  std::vector<Triplet> trips;
  VecX degree = VecX::Zero(ne);
  for (const auto& [a, b] : elementAdjacency(mesh)) {
    trips.emplace_back(a, b, -1.0);
    trips.emplace_back(b, a, -1.0);
    degree[a] += 1.0;
    degree[b] += 1.0;
  }
  for (int e = 0; e < ne; ++e) trips.emplace_back(e, e, degree[e]);
  SpMat L(ne, ne);
  L.setFromTriplets(trips.begin(), trips.end());
  return L;
}

MatX harmonicBasis(const VolumeMesh& mesh, int r) {
  const int ne = mesh.elementCount();
  if (r < 1) throw InvalidInput("harmonic rank must be positive");
  r = std::min(r, ne);
  MatX H(ne, r);
  H.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(ne)));
  if (r > 1) {
    const EigenPairs ep = smallestEigenpairs(elementLaplacian(mesh), r);
    if (!ep.converged) logWarning("harmonic eigenvectors did not fully converge");
    H.rightCols(r - 1) = ep.vectors.rightCols(r - 1);
    // Re-orthonormalize against the exact constant column.
    Eigen::HouseholderQR<MatX> qr(H);
    const MatX Q = qr.householderQ() * MatX::Identity(ne, r);
    for (int j = 0; j < r; ++j) {
      Eigen::Index k;
      Q.col(j).cwiseAbs().maxCoeff(&k);
      H.col(j) = Q(k, j) < 0.0 ? VecX(-Q.col(j)) : VecX(Q.col(j));
    }
    H.col(0) = H.col(0).cwiseAbs();
  }
  return H;
}

MatX stackedBasis(const MatX& H) {
  MatX B = MatX::Zero(2 * H.rows(), 2 * H.cols());
  B.topLeftCorner(H.rows(), H.cols()) = H;
  B.bottomRightCorner(H.rows(), H.cols()) = H;
  return B;
}

HarmonicResult harmonicFit(const VolumeMesh& mesh, const std::vector<SampleObjective>& objectives,
                           const MaterialField& gamma0, const FitOptions& opt, const std::vector<int>& ranks,
                           bool fullStage, const ConvergenceSink& sink, const HarmonicResult* resume,
                           const StageSink& onStage) {
  HarmonicResult out;
  out.gamma = gamma0;
  double previous = 0.0;
  if (resume && !resume->stageLosses.empty()) {
    out = *resume;
    previous = resume->stageLosses.back();
  } else {
    for (const auto& o : objectives) o.resetWarmStart();
    previous = sequenceLoss(objectives, gamma0);
  }
  size_t stage = 0;
  auto runStage = [&](int rank, const std::function<MatX()>& basis, const std::string& name) {
    if (stage++ < out.stageLosses.size()) return;
    for (const auto& o : objectives) o.resetWarmStart();
    const SequenceFitResult r = fitSequence(objectives, out.gamma, opt, basis(), sink, name);
    if (r.totalLoss <= previous) {
      out.gamma = r.gamma;
      previous = r.totalLoss;
    } else {
      logInfo("stage " + name + " raised the loss; keeping the previous material");
    }
    out.ranks.push_back(rank);
    out.stageLosses.push_back(previous);
    out.stalledSamples.push_back(r.stalledSamples);
    if (onStage) onStage(out);
  };
  for (int r : ranks) {
    runStage(r, [&] {
      MatX H;
      try {
        H = harmonicBasis(mesh, r);
      } catch (const NumericalError&) {
        logWarning("harmonic eigensolver failed; continuing with the constant basis only");
        H = harmonicBasis(mesh, 1);
      }
      return stackedBasis(H);
    }, "r=" + std::to_string(r));
  }
  if (fullStage) runStage(0, [] { return MatX(); }, "full");
  return out;
}

}  // namespace knitvh
