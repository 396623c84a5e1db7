#include "knitvh/transfer.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

namespace knitvh {

Mat3 skew(const Vec3& w) {
  Mat3 W;
  W << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return W;
}

Vec3 unskew(const Mat3& W) { return {W(2, 1), W(0, 2), W(1, 0)}; }

Mat3 expSkew(const Mat3& Omega) {
  const double theta = unskew(Omega).norm();
  const Mat3 O2 = Omega * Omega;
  double a;
  double b;
  if (theta < 1e-6) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Mat3::Identity() + a * Omega + b * O2;
}

Mat3 logRotation(const Mat3& R) {
  const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
  const double theta = std::acos(c);
  const Vec3 v = 0.5 * unskew(R - R.transpose());  // sin(theta) * axis
  if (theta < 1e-6) return skew(v * (1.0 + theta * theta / 6.0));
  if (std::numbers::pi - theta > 1e-6) return skew(v * (theta / std::sin(theta)));
  // Near pi: R + I = 2 a a^T + O(pi - theta).
  const Mat3 B = 0.5 * (R + Mat3::Identity());
  Eigen::Index k;
  B.diagonal().maxCoeff(&k);
  Vec3 axis = B.col(k).normalized();
  if (v.norm() > 1e-12) {
    if (axis.dot(v) < 0.0) axis = -axis;
  } else {
    Eigen::Index m;
    axis.cwiseAbs().maxCoeff(&m);
    if (axis[m] < 0.0) axis = -axis;
  }
  return skew(theta * axis);
}

VecX v2y(const VolumeMesh& mesh, const VecX& meshPose) {
  Eigen::Map<const Eigen::Matrix<double, 3, Eigen::Dynamic>> X(meshPose.data(), 3, mesh.nodeCount());
  Eigen::Matrix<double, 3, Eigen::Dynamic> Y = X * mesh.interpolation.transpose();
  return Eigen::Map<const VecX>(Y.data(), Y.size());
}

Mat3 deformedFrame(const YarnModel& model, const Segment& seg, int segment, const std::vector<Vec3>& deformed) {
  const Vec3 rest = model.restVertices[seg.b] - model.restVertices[seg.a];
  const Vec3 d = deformed[seg.b] - deformed[seg.a];
  if (!(d.norm() > 0.0)) throw InvalidInput("degenerate deformed segment", segment);
  const Mat3 Q = minimalRotation(rest.normalized(), d.normalized());
  Mat3 m;
  m.col(0) = d;
  m.col(1) = Q * model.segmentNormals[segment].n1;
  m.col(2) = Q * model.segmentNormals[segment].n2;
  return m;
}

namespace {

SegmentDeformation segmentDeformation(const YarnModel& model, const Segment& seg, int segment,
                                      const std::vector<Vec3>& deformed) {
  const Mat3 F = deformedFrame(model, seg, segment, deformed) * restFrame(model, seg, segment).inverse();
  if (!(F.determinant() > 0.0)) throw InvalidInput("reflected or degenerate segment deformation", segment);
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  SegmentDeformation out;
  out.F = F;
  out.S = svd.matrixV() * svd.singularValues().asDiagonal() * svd.matrixV().transpose();
  out.S = 0.5 * (out.S + out.S.transpose()).eval();
  out.omega = logRotation(R);
  return out;
}

Mat3 averageDeformation(const std::vector<std::pair<int, double>>& cover, const std::vector<SegmentDeformation>& segs) {
  Mat3 omega = Mat3::Zero();
  Mat3 S = Mat3::Zero();
  double total = 0.0;
  for (const auto& [s, w] : cover) {
    omega += w * segs[s].omega;
    S += w * segs[s].S;
    total += w;
  }
  return expSkew(omega / total) * (S / total);
}

}  // namespace

SegmentDeformation yarnSegmentF(const YarnModel& model, int segment, const std::vector<Vec3>& deformed) {
  const auto segs = model.segments();
  if (segment < 0 || segment >= static_cast<int>(segs.size())) throw InvalidInput("segment index out of range", segment);
  return segmentDeformation(model, segs[segment], segment, deformed);
}

ElementCoverage elementCoverage(const VolumeMesh& mesh, const YarnModel& yarn) {
  const auto segs = yarn.segments();
  ElementCoverage cover(mesh.elementCount());
  for (const auto& p : mesh.pieces) {
    const double len = yarn.restLength(segs[p.segment]) * (p.t1 - p.t0);
    if (len <= 0.0) continue;
    auto& list = cover[p.element];
    if (!list.empty() && list.back().first == p.segment) list.back().second += len;
    else list.emplace_back(p.segment, len);
  }
  return cover;
}

std::optional<Mat3> elementTargetF(const VolumeMesh& mesh, const YarnModel& yarn, const std::vector<Vec3>& deformed,
                                   int elem) {
  const auto cover = elementCoverage(mesh, yarn);
  if (cover.at(elem).empty()) return std::nullopt;
  const auto segs = yarn.segments();
  std::vector<SegmentDeformation> defs(segs.size());
  for (const auto& [s, w] : cover[elem]) defs[s] = segmentDeformation(yarn, segs[s], s, deformed);
  return averageDeformation(cover[elem], defs);
}

TargetDeformation computeTargets(const VolumeMesh& mesh, const YarnModel& yarn, const ElementCoverage& coverage,
                                 const std::vector<Vec3>& deformed, int frame) {
  if (static_cast<int>(deformed.size()) != yarn.vertexCount())
    throw InvalidInput("yarn pose vertex count differs from the yarn model");
  const auto segs = yarn.segments();
  std::vector<SegmentDeformation> defs(segs.size());
  for (size_t s = 0; s < segs.size(); ++s) defs[s] = segmentDeformation(yarn, segs[s], static_cast<int>(s), deformed);

  const int ne = mesh.elementCount();
  TargetDeformation t;
  t.yarnFrame = frame;
  t.perElementF.assign(ne, Mat3::Identity());
  t.covered.assign(ne, 0);
  std::vector<char> assigned(ne, 0);
  int count = 0;
  for (int e = 0; e < ne; ++e) {
    if (coverage[e].empty()) continue;
    t.perElementF[e] = averageDeformation(coverage[e], defs);
    t.covered[e] = 1;
    assigned[e] = 1;
    ++count;
  }
  if (count == 0) throw InvalidInput("no element contains yarn");

  // Fill uncovered elements layer by layer from already assigned neighbours.
  std::vector<std::vector<int>> adj(ne);
  for (const auto& [a, b] : elementAdjacency(mesh)) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  while (count < ne) {
    std::vector<std::pair<int, Mat3>> layer;
    for (int e = 0; e < ne; ++e) {
      if (assigned[e]) continue;
      Mat3 sum = Mat3::Zero();
      int n = 0;
      for (int f : adj[e])
        if (assigned[f]) {
          sum += t.perElementF[f];
          ++n;
        }
      if (n > 0) layer.emplace_back(e, sum / n);
    }
    if (layer.empty()) break;  // disconnected remainder keeps the identity
    for (const auto& [e, F] : layer) {
      t.perElementF[e] = F;
      assigned[e] = 1;
      ++count;
    }
  }
  return t;
}

ShapeFit::ShapeFit(const VolumeMesh& mesh, const YarnModel& yarn, double alpha)
    : mesh_(&mesh), yarn_(&yarn), alpha_(alpha) {
  if (!(alpha >= 0.0)) throw InvalidInput("alpha must be non-negative");
  coverage_ = elementCoverage(mesh, yarn);
  const int ne = mesh.elementCount();
  const int n = mesh.nodeCount();
  weights_.resize(ne);
  for (int e = 0; e < ne; ++e) weights_[e] = coverage_[e].empty() ? kUncoveredWeight : 1.0;
  yarnMass_ = yarn.vertexMasses();

  double h = mesh.cellSize;
  if (!(h > 0.0)) h = std::cbrt(6.0 * mesh.totalVolume() / std::max(ne, 1));
  positionScale_ = mesh.totalVolume() / (yarnMass_.sum() * h * h);

  std::vector<Triplet> trips;
  trips.reserve(16 * ne);
  for (int e = 0; e < ne; ++e) {
    const ShapeGrad& G = mesh.shapeGradients[e];
    const Eigen::Matrix4d block = weights_[e] * mesh.elementVolume[e] * G.transpose() * G;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) trips.emplace_back(mesh.tets[e][a], mesh.tets[e][b], block(a, b));
  }
  SpMat L(n, n);
  L.setFromTriplets(trips.begin(), trips.end());
  const SpMat& N = mesh.interpolation;
  L += (alpha_ * positionScale_) * SpMat(N.transpose() * yarnMass_.asDiagonal() * N);
  L_ = L;
  solver_ = std::make_shared<Eigen::SimplicialLDLT<SpMat>>(L_);
  if (solver_->info() != Eigen::Success || (solver_->vectorD().array() <= 0.0).any())
    throw NumericalError("singular shape-fitting system");
}

TargetDeformation ShapeFit::targets(const std::vector<Vec3>& yarnPose, int frame) const {
  return computeTargets(*mesh_, *yarn_, coverage_, yarnPose, frame);
}

MatX ShapeFit::rhs(const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const {
  const int n = mesh_->nodeCount();
  MatX B = MatX::Zero(n, 3);
  for (int e = 0; e < mesh_->elementCount(); ++e) {
    const ShapeGrad& G = mesh_->shapeGradients[e];
    // Row i of F is sum_a x_{a,i} gradN_a^T, so coordinate i sees target row i.
    const Eigen::Matrix<double, 4, 3> contrib =
        weights_[e] * mesh_->elementVolume[e] * G.transpose() * t.perElementF[e].transpose();
    for (int a = 0; a < 4; ++a) B.row(mesh_->tets[e][a]) += contrib.row(a);
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> Y(yarnPose.front().data(),
                                                                                 yarn_->vertexCount(), 3);
  B += (alpha_ * positionScale_) * (mesh_->interpolation.transpose() * (yarnMass_.asDiagonal() * Y));
  return B;
}

VecX ShapeFit::solve(const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const {
  const MatX X = solver_->solve(rhs(t, yarnPose));
  if (solver_->info() != Eigen::Success || !X.allFinite()) throw NumericalError("shape-fitting solve failed");
  VecX x(3 * X.rows());
  for (Eigen::Index a = 0; a < X.rows(); ++a) x.segment<3>(3 * a) = X.row(a).transpose();
  return x;
}

VecX ShapeFit::y2v(const std::vector<Vec3>& yarnPose) const { return solve(targets(yarnPose), yarnPose); }

std::pair<double, double> ShapeFit::objectiveTerms(const VecX& x, const TargetDeformation& t,
                                                   const std::vector<Vec3>& yarnPose) const {
  double shape = 0.0;
  for (int e = 0; e < mesh_->elementCount(); ++e)
    shape += weights_[e] * mesh_->elementVolume[e] * (mesh_->deformationGradient(e, x) - t.perElementF[e]).squaredNorm();
  const VecX y = v2y(*mesh_, x);
  double pos = 0.0;
  for (int j = 0; j < yarn_->vertexCount(); ++j) pos += yarnMass_[j] * (y.segment<3>(3 * j) - yarnPose[j]).squaredNorm();
  return {shape, alpha_ * positionScale_ * pos};
}

double ShapeFit::objective(const VecX& x, const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const {
  const auto [shape, pos] = objectiveTerms(x, t, yarnPose);
  return shape + pos;
}

VecX ShapeFit::gradient(const VecX& x, const TargetDeformation& t, const std::vector<Vec3>& yarnPose) const {
  const int n = mesh_->nodeCount();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> X(x.data(), n, 3);
  const MatX G = 2.0 * (L_ * X - rhs(t, yarnPose));
  VecX g(3 * n);
  for (int a = 0; a < n; ++a) g.segment<3>(3 * a) = G.row(a).transpose();
  return g;
}

SpMat ShapeFit::hessian() const {
  std::vector<Triplet> trips;
  trips.reserve(3 * L_.nonZeros());
  for (int k = 0; k < L_.outerSize(); ++k)
    for (SpMat::InnerIterator it(L_, k); it; ++it)
      for (int c = 0; c < 3; ++c) trips.emplace_back(3 * it.row() + c, 3 * it.col() + c, 2.0 * it.value());
  SpMat H(3 * L_.rows(), 3 * L_.cols());
  H.setFromTriplets(trips.begin(), trips.end());
  return H;
}

VecX distributeForce(const VolumeMesh& mesh, const YarnModel& yarn, const std::vector<Vec3>& forces) {
  if (static_cast<int>(forces.size()) != yarn.vertexCount()) throw InvalidInput("one force per yarn vertex is required");
  const VecX mY = yarn.vertexMasses();
  std::vector<Vec3> acc(forces.size());
  for (size_t j = 0; j < forces.size(); ++j) acc[j] = mY[j] > 0.0 ? Vec3(forces[j] / mY[j]) : Vec3::Zero();
  const auto segs = yarn.segments();
  VecX f = VecX::Zero(mesh.dofCount());
  for (const auto& p : mesh.pieces) {
    if (p.t1 <= p.t0) continue;
    const Segment& s = segs[p.segment];
    const double mass = yarn.restLength(s) * yarn.linearDensity[s.polyline];
    const Vec3& a = yarn.restVertices[s.a];
    const Vec3& b = yarn.restVertices[s.b];
    // Simpson's rule is exact for the quadratic integrand N_i(t) acc(t).
    const double ts[3] = {p.t0, 0.5 * (p.t0 + p.t1), p.t1};
    const double ws[3] = {1.0, 4.0, 1.0};
    for (int q = 0; q < 3; ++q) {
      const Eigen::Vector4d l = mesh.barycentricCoordinates(p.element, a + ts[q] * (b - a));
      const Vec3 accT = (1.0 - ts[q]) * acc[s.a] + ts[q] * acc[s.b];
      const double w = mass * (p.t1 - p.t0) * ws[q] / 6.0;
      for (int k = 0; k < 4; ++k) f.segment<3>(3 * mesh.tets[p.element][k]) += w * l[k] * accT;
    }
  }
  return f;
}

VecX inverseMass(const VolumeMesh& mesh) {
  VecX inv(mesh.nodeCount());
  for (int i = 0; i < mesh.nodeCount(); ++i) inv[i] = mesh.lumpedMass[i] > 0.0 ? 1.0 / mesh.lumpedMass[i] : 0.0;
  return inv;
}

VecX estimateInertia(const ShapeFit& fit, const YarnSequence& seq, int i) {
  if (i < 2) throw InvalidInput("inertia needs two previous frames", i);
  if (i >= seq.frameCount()) throw InvalidInput("frame index out of range", i);
  const VolumeMesh& mesh = fit.mesh();
  VecX a = fit.y2v(seq.frames[i]) - 2.0 * fit.y2v(seq.frames[i - 1]) + fit.y2v(seq.frames[i - 2]);
  if (!seq.externalForce.empty()) {
    const VecX f = distributeForce(mesh, fit.yarn(), seq.forceAt(i, fit.yarn().vertexCount()));
    const VecX inv = inverseMass(mesh);
    for (int n = 0; n < mesh.nodeCount(); ++n) a.segment<3>(3 * n) -= seq.dt * seq.dt * inv[n] * f.segment<3>(3 * n);
  }
  return a;
}

}  // namespace knitvh
