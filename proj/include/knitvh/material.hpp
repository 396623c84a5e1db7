#pragma once

#include "knitvh/common.hpp"

#include <array>

namespace knitvh {

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using ShapeGrad = Eigen::Matrix<double, 3, 4>;  // column a = grad N_a

/// Floor on singular values produced by the volume-preserving projection.
inline constexpr double kSingularValueFloor = 0.01;
/// Floor applied to pivoted / clamped material entries.
inline constexpr double kMaterialFloor = 1e-3;

/// Per-element material parameters stacked as [gammaS(0..nE-1), gammaV(0..nE-1)].
struct MaterialField {
  VecX gamma;

  MaterialField() = default;
  explicit MaterialField(VecX stacked) : gamma(std::move(stacked)) {}
  static MaterialField uniform(int elementCount, double gammaS, double gammaV);

  int elementCount() const { return static_cast<int>(gamma.size() / 2); }
  double gammaS(int e) const { return gamma[e]; }
  double gammaV(int e) const { return gamma[elementCount() + e]; }
  /// Throws InvalidInput on a negative or non-finite entry.
  void validate() const;
};

/// Rotation-variant SVD: F = U diag(sigma) W^T with det U = det W = +1 and sigma sorted in
/// decreasing order; an inverted F gets a negative sigma[2].
struct Svd3 {
  Mat3 U;
  Vec3 sigma;
  Mat3 W;
};
Svd3 rotationVariantSvd(const Mat3& F);

/// Closest rotation in Frobenius norm. F = 0 maps to the identity.
Mat3 projectSO3(const Mat3& F);

struct SL3Projection {
  Mat3 V;
  Vec3 sigmaHat;
  std::array<bool, 3> clamped{false, false, false};
  bool converged = true;
};

/// Closest singular values with unit product and every entry >= kSingularValueFloor. Newton on the
/// Lagrangian (4 unknowns) from a few starting points; the best converged stationary point wins.
SL3Projection projectSingularValuesSL3(const Vec3& sigma);

/// Closest volume-preserving matrix (det = 1) in Frobenius norm.
SL3Projection projectSL3(const Mat3& F);

/// Jacobian d(sigmaHat)/d(sigma) of the SL(3) singular-value map at a projection result.
Mat3 sl3SingularValueJacobian(const Vec3& sigma, const SL3Projection& proj);

/// Differential of a map F = U S W^T -> U Shat W^T, given the singular-value map's Jacobian.
/// Returns the 9x9 matrix acting on column-major vec(dF).
Mat9 spectralMapDerivative(const Svd3& svd, const Vec3& sigmaHat, const Mat3& sigmaJacobian);

Mat9 projectSO3Derivative(const Mat3& F);
Mat9 projectSL3Derivative(const Mat3& F);

/// E = gs * vol * |F - R(F)|^2 + gv * vol * |F - V(F)|^2 (no 1/2 factor).
double elementEnergy(const Mat3& F, double gammaS, double gammaV, double volume);

/// dE/dF for the energy above. The projections drop out of the first derivative.
Mat3 elementStress(const Mat3& F, double gammaS, double gammaV, double volume);

/// Exact d2E/dF2 (9x9, column-major vec).
Mat9 elementStressDerivative(const Mat3& F, double gammaS, double gammaV, double volume);

/// The 9x12 map from element DOFs [x0 x1 x2 x3] to column-major vec(F).
Eigen::Matrix<double, 9, 12> deformationJacobian(const ShapeGrad& gradN);

/// Deformation gradient of an element from its four node positions.
Mat3 deformationGradient(const ShapeGrad& gradN, const std::array<Vec3, 4>& x);

struct ElementForceAndDGamma {
  Vec12 gradient;  // dE/dx_e, the element's contribution to g
  Vec12 dGammaS;   // d(dE/dx_e)/d(gammaS)
  Vec12 dGammaV;   // d(dE/dx_e)/d(gammaV)
};
ElementForceAndDGamma elementForceAndDGamma(const Mat3& F, const ShapeGrad& gradN, double gammaS,
                                            double gammaV, double volume);

/// Element Hessian d2E/dx_e^2. With `projectPsd` the 9x9 stress derivative is clamped to its
/// positive semidefinite part first.
Mat12 elementHessian(const Mat3& F, const ShapeGrad& gradN, double gammaS, double gammaV, double volume,
                     bool projectPsd);

}  // namespace knitvh
