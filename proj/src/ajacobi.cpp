#include "knitvh/ajacobi.hpp"

#include <cmath>

namespace knitvh {

namespace {

VecX inverseDiagonal(const SpMat& K) {
  VecX d = K.diagonal();
  if ((d.array() <= 0.0).any()) throw InvalidInput("Jacobi needs a positive diagonal");
  return d.cwiseInverse();
}

// sum_{k<l} (I - w D^-1 K)^k w D^-1 r by a Horner-free recurrence.
MatX aggregatedCorrection(const SpMat& K, const VecX& invD, const MatX& r, double omega, int aggregation) {
  MatX z = omega * invD.asDiagonal() * r;
  MatX acc = z;
  for (int k = 1; k < aggregation; ++k) {
    z -= omega * invD.asDiagonal() * (K * z);
    acc += z;
  }
  return acc;
}

}  // namespace

MatX jacobiSweep(const SpMat& K, const MatX& b, const MatX& x, double omega) {
  const VecX invD = inverseDiagonal(K);
  return x + omega * invD.asDiagonal() * (b - K * x);
}

double aggregatedSpectralRadius(const SpMat& K, double omega, int aggregation, int iterations) {
  const VecX invD = inverseDiagonal(K);
  VecX v(K.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.5 * std::sin(1.0 + i);
  v.normalize();
  double rho = 0.0;
  for (int it = 0; it < iterations; ++it) {
    VecX w = v;
    for (int k = 0; k < aggregation; ++k) w -= omega * invD.asDiagonal() * (K * w);
    rho = w.norm();
    if (rho == 0.0) return 0.0;
    v = w / rho;
  }
  return rho;
}

AJacobiResult aJacobiRefine(const SpMat& K, const MatX& b, const MatX& x0, const AJacobiOptions& opt) {
  if (opt.aggregation < 1) throw InvalidInput("aggregation must be at least 1");
  const VecX invD = inverseDiagonal(K);
  AJacobiResult out;
  MatX x = x0;
  MatX r = b - K * x;
  double res = r.norm();
  MatX bestX = x;
  double best = res;

  double rho = opt.rho;
  if (opt.chebyshev && rho <= 0.0) rho = std::min(aggregatedSpectralRadius(K, opt.omega, opt.aggregation), 0.9999);
  MatX xPrev = x;
  double w = 1.0;
  for (int s = 0; s < opt.sweeps; ++s) {
    MatX next = x + aggregatedCorrection(K, invD, r, opt.omega, opt.aggregation);
    if (opt.chebyshev) {
      w = s == 0 ? 1.0 : (s == 1 ? 2.0 / (2.0 - rho * rho) : 4.0 / (4.0 - rho * rho * w));
      next = w * (next - xPrev) + xPrev;
    }
    xPrev = x;
    x = next;
    r = b - K * x;
    res = r.norm();
    out.sweeps = s + 1;
    if (!std::isfinite(res) || res > 10.0 * best) {
      out.diverged = true;
      break;
    }
    if (res <= best) {
      best = res;
      bestX = x;
    }
  }
  if (out.diverged) {
    out.x = bestX;
    out.residual = best;
  } else {
    out.x = x;
    out.residual = res;
  }
  return out;
}

}  // namespace knitvh
