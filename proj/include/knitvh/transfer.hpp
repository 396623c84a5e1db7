#pragma once

#include "knitvh/common.hpp"
#include "knitvh/volmesh.hpp"
#include "knitvh/yarn.hpp"

#include <Eigen/SparseCholesky>

#include <memory>
#include <optional>

namespace knitvh {

/// Weight of the positional term of the shape-fitting objective.
inline constexpr double kShapeFitAlpha = 0.1;
/// Weight of the neighbour-filled targets of elements that contain no yarn.
inline constexpr double kUncoveredWeight = 1e-3;

Mat3 skew(const Vec3& w);
Vec3 unskew(const Mat3& W);
/// Rodrigues exponential of a skew matrix.
Mat3 expSkew(const Mat3& Omega);
/// Logarithm of a rotation with angle in [0, pi]. At pi the axis is the dominant eigenvector of
/// R + I with its largest-magnitude component positive.
Mat3 logRotation(const Mat3& R);

/// Barycentric interpolation of stacked mesh positions onto yarn vertices (stacked 3nY).
VecX v2y(const VolumeMesh& mesh, const VecX& meshPose);

struct SegmentDeformation {
  Mat3 omega;  // skew, exp(omega) = R
  Mat3 S;      // symmetric positive definite stretch
  Mat3 F;
};

/// Deformed normals of a segment: rest normals carried by the minimal rotation onto the deformed
/// direction. Returns [d, n1, n2] with d the deformed edge vector.
Mat3 deformedFrame(const YarnModel& model, const Segment& seg, int segment, const std::vector<Vec3>& deformed);

/// F = R S of one yarn segment. Throws InvalidInput with the segment index if det F <= 0.
SegmentDeformation yarnSegmentF(const YarnModel& model, int segment, const std::vector<Vec3>& deformed);

/// Per element, the embedded rest length of each segment crossing it.
using ElementCoverage = std::vector<std::vector<std::pair<int, double>>>;
ElementCoverage elementCoverage(const VolumeMesh& mesh, const YarnModel& yarn);

/// Length-weighted log-rotation average composed with the length-weighted stretch average over the
/// segments crossing `elem`; nullopt when no yarn crosses it.
std::optional<Mat3> elementTargetF(const VolumeMesh& mesh, const YarnModel& yarn, const std::vector<Vec3>& deformed,
                                   int elem);

struct TargetDeformation {
  /// One target per element; uncovered elements carry the average of their assigned neighbours.
  std::vector<Mat3> perElementF;
  std::vector<char> covered;
  int yarnFrame = -1;
};

/// Targets for every element from segment deformations computed once per segment.
TargetDeformation computeTargets(const VolumeMesh& mesh, const YarnModel& yarn, const ElementCoverage& coverage,
                                 const std::vector<Vec3>& deformed, int frame = -1);

/// The shape-fitting quadratic
///   eps(x) = sum_e w_e V_e |F_e(x) - T_e|^2 + alpha c sum_j m_j |(N x)_j - y_j|^2,
/// with w_e = 1 on covered elements and kUncoveredWeight elsewhere, and c = V / (m h^2) making both
/// terms scale alike. The Hessian is 2 (L kron I3) with the scalar matrix L factorized once.
class ShapeFit {
 public:
  ShapeFit(const VolumeMesh& mesh, const YarnModel& yarn, double alpha = kShapeFitAlpha);

  const VolumeMesh& mesh() const { return *mesh_; }
  const YarnModel& yarn() const { return *yarn_; }
  const ElementCoverage& coverage() const { return coverage_; }
  double alpha() const { return alpha_; }
  double positionScale() const { return positionScale_; }

  TargetDeformation targets(const std::vector<Vec3>& yarnPose, int frame = -1) const;
  /// Unique minimizer of eps for the given targets and yarn pose.
  VecX solve(const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const;
  /// targets + solve.
  VecX y2v(const std::vector<Vec3>& yarnPose) const;

  double objective(const VecX& x, const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const;
  /// The two terms of the objective separately (shape, position).
  std::pair<double, double> objectiveTerms(const VecX& x, const TargetDeformation& t,
                                           const std::vector<Vec3>& yarnPose) const;
  VecX gradient(const VecX& x, const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const;
  /// Full 3n x 3n Hessian 2 (L kron I3).
  SpMat hessian() const;
  const SpMat& scalarMatrix() const { return L_; }
  const VecX& elementWeights() const { return weights_; }

 private:
  MatX rhs(const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const;

  const VolumeMesh* mesh_;
  const YarnModel* yarn_;
  double alpha_;
  double positionScale_ = 1.0;
  ElementCoverage coverage_;
  VecX weights_;
  VecX yarnMass_;
  SpMat L_;
  std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> solver_;
};

/// Nodal forces of per-vertex yarn forces: the force per unit mass is interpolated linearly along
/// each segment and integrated against the shape functions, so a uniform field g maps to M g.
VecX distributeForce(const VolumeMesh& mesh, const YarnModel& yarn, const std::vector<Vec3>& forces);

/// Per-node inverse of the lumped mass with empty nodes mapped to 0.
VecX inverseMass(const VolumeMesh& mesh);

/// a_i = y2v(x_i) - 2 y2v(x_{i-1}) + y2v(x_{i-2}) - dt^2 M^{-1} f_i. Throws InvalidInput for i < 2.
VecX estimateInertia(const ShapeFit& fit, const YarnSequence& seq, int i);

}  // namespace knitvh
