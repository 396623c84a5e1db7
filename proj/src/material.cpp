#include "knitvh/material.hpp"

#include "knitvh/log.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace knitvh {

MaterialField MaterialField::uniform(int elementCount, double gammaS, double gammaV) {
  VecX g(2 * elementCount);
  g.head(elementCount).setConstant(gammaS);
  g.tail(elementCount).setConstant(gammaV);
  return MaterialField(std::move(g));
}

void MaterialField::validate() const {
  if (gamma.size() % 2 != 0) throw InvalidInput("material vector must have even length");
  for (Eigen::Index i = 0; i < gamma.size(); ++i)
    if (!std::isfinite(gamma[i]) || gamma[i] < 0.0) throw InvalidInput("material entry must be finite and >= 0", i);
}

Svd3 rotationVariantSvd(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Svd3 out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  if (out.U.determinant() < 0.0) {
    out.U.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  if (out.W.determinant() < 0.0) {
    out.W.col(2) *= -1.0;
    out.sigma[2] *= -1.0;
  }
  return out;
}

Mat3 projectSO3(const Mat3& F) {
  if (F.squaredNorm() == 0.0) return Mat3::Identity();
  const Svd3 svd = rotationVariantSvd(F);
  return svd.U * svd.W.transpose();
}

namespace {

struct NewtonResult {
  Vec3 s;
  std::array<bool, 3> clamped{false, false, false};
  bool converged = false;
};

// Gradient of the product constraint: c_i = prod_{k != i} s_k.
Vec3 productGradient(const Vec3& s) { return {s[1] * s[2], s[0] * s[2], s[0] * s[1]}; }

NewtonResult newtonSL3(const Vec3& sigma, Vec3 s) {
  NewtonResult r;
  for (int i = 0; i < 3; ++i) {
    if (s[i] < kSingularValueFloor) {
      s[i] = kSingularValueFloor;
      r.clamped[i] = true;
    }
  }
  const Vec3 c0 = productGradient(s);
  double lambda = (s - sigma).dot(c0) / std::max(c0.squaredNorm(), 1e-300);
  const double tol = 1e-10 * std::max(1.0, sigma.cwiseAbs().maxCoeff());

  auto residual = [&](const Vec3& sv, double lam, Eigen::Vector4d& res) {
    const Vec3 c = productGradient(sv);
    for (int i = 0; i < 3; ++i) res[i] = r.clamped[i] ? 0.0 : sv[i] - sigma[i] - lam * c[i];
    res[3] = sv.prod() - 1.0;
  };

  Eigen::Vector4d res;
  for (int it = 0; it < 20; ++it) {
    residual(s, lambda, res);
    if (res.cwiseAbs().maxCoeff() < tol) {
      r.converged = true;
      break;
    }
    Eigen::Matrix4d J = Eigen::Matrix4d::Zero();
    const Vec3 c = productGradient(s);
    for (int i = 0; i < 3; ++i) {
      if (r.clamped[i]) {
        J(i, i) = 1.0;
        continue;
      }
      for (int j = 0; j < 3; ++j) {
        if (j == i) {
          J(i, j) = 1.0;
        } else if (!r.clamped[j]) {
          const int k = 3 - i - j;
          J(i, j) = -lambda * s[k];
        }
      }
      J(i, 3) = -c[i];
    }
    for (int j = 0; j < 3; ++j) J(3, j) = r.clamped[j] ? 0.0 : c[j];
    Eigen::FullPivLU<Eigen::Matrix4d> lu(J);
    if (!lu.isInvertible()) break;
    const Eigen::Vector4d step = lu.solve(-res);

    // Backtrack on the residual norm.
    double t = 1.0;
    const double r0 = res.squaredNorm();
    Vec3 sTrial;
    double lTrial = lambda;
    for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
      sTrial = s + t * step.head<3>();
      lTrial = lambda + t * step[3];
      if ((sTrial.array() <= 0.0).any()) continue;
      Eigen::Vector4d rt;
      residual(sTrial, lTrial, rt);
      if (rt.squaredNorm() < r0) break;
    }
    s = sTrial;
    lambda = lTrial;
    for (int i = 0; i < 3; ++i) {
      if (!r.clamped[i] && s[i] < kSingularValueFloor) {
        s[i] = kSingularValueFloor;
        r.clamped[i] = true;
      }
    }
    if (r.clamped[0] && r.clamped[1] && r.clamped[2]) break;
  }
  if (!r.converged) {
    residual(s, lambda, res);
    r.converged = res.cwiseAbs().maxCoeff() < tol;
  }
  r.s = s;
  return r;
}

}  // namespace

SL3Projection projectSingularValuesSL3(const Vec3& sigma) {
  const Vec3 pos = sigma.cwiseMax(kSingularValueFloor);
  std::array<Vec3, 4> starts;
  starts[0] = pos / std::cbrt(pos.prod());
  starts[1] = Vec3(pos[0], pos[1], 1.0 / (pos[0] * pos[1]));
  starts[2] = Vec3(1.0 / (pos[1] * pos[2]), pos[1], pos[2]);
  const double m = 1.0 / std::sqrt(pos[0]);
  starts[3] = Vec3(pos[0], m, m);

  SL3Projection best;
  double bestCost = std::numeric_limits<double>::infinity();
  for (const Vec3& s0 : starts) {
    const NewtonResult r = newtonSL3(sigma, s0);
    if (!r.converged) continue;
    const double cost = (r.s - sigma).squaredNorm();
    if (cost < bestCost) {
      bestCost = cost;
      best.sigmaHat = r.s;
      best.clamped = r.clamped;
      best.converged = true;
    }
  }
  if (!std::isfinite(bestCost)) {
    logWarning("SL(3) projection did not converge; falling back to uniform scaling");
    best.sigmaHat = starts[0];
    best.clamped = {false, false, false};
    best.converged = false;
  }
  return best;
}

SL3Projection projectSL3(const Mat3& F) {
  const Svd3 svd = rotationVariantSvd(F);
  SL3Projection p = projectSingularValuesSL3(svd.sigma);
  p.V = svd.U * p.sigmaHat.asDiagonal() * svd.W.transpose();
  return p;
}

Mat3 sl3SingularValueJacobian(const Vec3& sigma, const SL3Projection& proj) {
  (void)sigma;
  const Vec3& s = proj.sigmaHat;
  const Vec3 c = productGradient(s);
  // Recover the multiplier from the stationarity of any free coordinate.
  double lambda = 0.0;
  double denom = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (proj.clamped[i]) continue;
    lambda += (s[i] - sigma[i]) * c[i];
    denom += c[i] * c[i];
  }
  if (denom > 0.0) lambda /= denom;

  Eigen::Matrix4d K = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 3; ++i) {
    if (proj.clamped[i]) {
      K(i, i) = 1.0;
      continue;
    }
    for (int j = 0; j < 3; ++j) {
      if (j == i) K(i, j) = 1.0;
      else if (!proj.clamped[j]) K(i, j) = -lambda * s[3 - i - j];
    }
    K(i, 3) = -c[i];
    K(3, i) = c[i];
  }
  Mat3 J = Mat3::Zero();
  Eigen::FullPivLU<Eigen::Matrix4d> lu(K);
  if (!lu.isInvertible()) return J;
  for (int k = 0; k < 3; ++k) {
    if (proj.clamped[k]) continue;
    Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
    rhs[k] = 1.0;
    J.col(k) = lu.solve(rhs).head<3>();
  }
  return J;
}

Mat9 spectralMapDerivative(const Svd3& svd, const Vec3& sigmaHat, const Mat3& sigmaJacobian) {
  const Vec3& sg = svd.sigma;
  constexpr double eps = 1e-10;
  double symRatio[3][3] = {};
  double antiRatio[3][3] = {};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double dSigma = sg[j] - sg[i];
      symRatio[i][j] = std::abs(dSigma) > eps ? (sigmaHat[j] - sigmaHat[i]) / dSigma
                                               : sigmaJacobian(i, i) - sigmaJacobian(i, j);
      const double sum = sg[i] + sg[j];
      antiRatio[i][j] = (sigmaHat[i] + sigmaHat[j]) / (std::abs(sum) > eps ? sum : std::copysign(eps, sum));
    }
  }
  Mat9 D;
  for (int col = 0; col < 9; ++col) {
    Mat3 dF = Mat3::Zero();
    dF(col % 3, col / 3) = 1.0;
    const Mat3 dFt = svd.U.transpose() * dF * svd.W;
    Mat3 dPt = Mat3::Zero();
    const Vec3 diag = sigmaJacobian * dFt.diagonal();
    for (int i = 0; i < 3; ++i) dPt(i, i) = diag[i];
    for (int i = 0; i < 3; ++i) {
      for (int j = i + 1; j < 3; ++j) {
        const double s = dFt(i, j) + dFt(j, i);
        const double t = dFt(i, j) - dFt(j, i);
        dPt(i, j) = 0.5 * (s * symRatio[i][j] + t * antiRatio[i][j]);
        dPt(j, i) = 0.5 * (s * symRatio[i][j] - t * antiRatio[i][j]);
      }
    }
    const Mat3 dP = svd.U * dPt * svd.W.transpose();
    D.col(col) = Eigen::Map<const Vec9>(dP.data());
  }
  return D;
}

Mat9 projectSO3Derivative(const Mat3& F) {
  const Svd3 svd = rotationVariantSvd(F);
  return spectralMapDerivative(svd, Vec3::Ones(), Mat3::Zero());
}

Mat9 projectSL3Derivative(const Mat3& F) {
  const Svd3 svd = rotationVariantSvd(F);
  const SL3Projection p = projectSingularValuesSL3(svd.sigma);
  return spectralMapDerivative(svd, p.sigmaHat, sl3SingularValueJacobian(svd.sigma, p));
}

double elementEnergy(const Mat3& F, double gammaS, double gammaV, double volume) {
  double e = 0.0;
  if (gammaS != 0.0) e += gammaS * volume * (F - projectSO3(F)).squaredNorm();
  if (gammaV != 0.0) e += gammaV * volume * (F - projectSL3(F).V).squaredNorm();
  return e;
}

Mat3 elementStress(const Mat3& F, double gammaS, double gammaV, double volume) {
  Mat3 P = Mat3::Zero();
  if (gammaS != 0.0) P += 2.0 * gammaS * volume * (F - projectSO3(F));
  if (gammaV != 0.0) P += 2.0 * gammaV * volume * (F - projectSL3(F).V);
  return P;
}

Mat9 elementStressDerivative(const Mat3& F, double gammaS, double gammaV, double volume) {
  Mat9 H = 2.0 * (gammaS + gammaV) * volume * Mat9::Identity();
  if (gammaS != 0.0) H -= 2.0 * gammaS * volume * projectSO3Derivative(F);
  if (gammaV != 0.0) H -= 2.0 * gammaV * volume * projectSL3Derivative(F);
  return H;
}

Eigen::Matrix<double, 9, 12> deformationJacobian(const ShapeGrad& gradN) {
  Eigen::Matrix<double, 9, 12> G = Eigen::Matrix<double, 9, 12>::Zero();
  // vec index of F(i, j) is i + 3 j; DOF index of node a, coordinate k is 3 a + k.
  for (int a = 0; a < 4; ++a)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) G(i + 3 * j, 3 * a + i) = gradN(j, a);
  return G;
}

Mat3 deformationGradient(const ShapeGrad& gradN, const std::array<Vec3, 4>& x) {
  Mat3 F = Mat3::Zero();
  for (int a = 0; a < 4; ++a) F += x[a] * gradN.col(a).transpose();
  return F;
}

namespace {

Vec12 scatterStress(const Mat3& P, const ShapeGrad& gradN) {
  Vec12 out;
  for (int a = 0; a < 4; ++a) out.segment<3>(3 * a) = P * gradN.col(a);
  return out;
}

}  // namespace

ElementForceAndDGamma elementForceAndDGamma(const Mat3& F, const ShapeGrad& gradN, double gammaS,
                                            double gammaV, double volume) {
  const Mat3 dS = 2.0 * volume * (F - projectSO3(F));
  const Mat3 dV = 2.0 * volume * (F - projectSL3(F).V);
  ElementForceAndDGamma out;
  out.dGammaS = scatterStress(dS, gradN);
  out.dGammaV = scatterStress(dV, gradN);
  out.gradient = gammaS * out.dGammaS + gammaV * out.dGammaV;
  return out;
}

Mat12 elementHessian(const Mat3& F, const ShapeGrad& gradN, double gammaS, double gammaV, double volume,
                     bool projectPsd) {
  Mat9 H = elementStressDerivative(F, gammaS, gammaV, volume);
  H = 0.5 * (H + H.transpose()).eval();
  if (projectPsd) {
    Eigen::SelfAdjointEigenSolver<Mat9> es(H);
    const Vec9 ev = es.eigenvalues().cwiseMax(0.0);
    H = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  }
  const auto G = deformationJacobian(gradN);
  return G.transpose() * H * G;
}

}  // namespace knitvh
