#include "knitvh/patch.hpp"
#include "knitvh/transfer.hpp"
#include "knitvh/volmesh.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <random>

using namespace knitvh;

namespace {

// exp(A) by 12-term Taylor series after scaling by 2^-s, then squaring.
Mat3 taylorExp(const Mat3& A) {
  int s = 0;
  while (A.norm() / std::pow(2.0, s) > 0.5) ++s;
  const Mat3 B = A / std::pow(2.0, s);
  Mat3 term = Mat3::Identity();
  Mat3 E = Mat3::Identity();
  for (int k = 1; k <= 12; ++k) {
    term = term * B / k;
    E += term;
  }
  for (int i = 0; i < s; ++i) E = E * E;
  return E;
}

// Log of a rotation through Eigen's angle-axis conversion.
Mat3 angleAxisLog(const Mat3& R) {
  const Eigen::AngleAxisd aa(R);
  return skew(aa.angle() * aa.axis());
}

YarnModel segmentModel(const Vec3& a, const Vec3& b) {
  YarnModel m;
  m.restVertices = {a, b};
  m.deformedVertices = m.restVertices;
  m.polylines = {{0, 1}};
  m.linearDensity = {1e-3};
  return computeSegmentNormals(m);
}

struct Fixture {
  YarnModel yarn = ribPatch({.rows = 3, .stitches = 3, .verticesPerStitch = 8});
  VolumeMesh mesh = buildVolumeMesh(yarn, 1.6e-3);
};

std::vector<Vec3> smoothPose(const YarnModel& m, double amp) {
  std::vector<Vec3> p = m.restVertices;
  for (auto& x : p) x += amp * Vec3(std::sin(90.0 * x.y()), 0.3 * std::sin(70.0 * x.x()), 0.5 * std::cos(60.0 * x.x() + 40.0 * x.y()));
  return p;
}

}  // namespace

TEST(V2Y, RestAndRigidPosesReproduce) {
  Fixture f;
  const VecX rest = f.mesh.restPositions();
  const VecX y = v2y(f.mesh, rest);
  EXPECT_NEAR((y - flatten(f.yarn.restVertices)).lpNorm<Eigen::Infinity>(), 0.0, 1e-15);
  const Mat3 Q = Eigen::AngleAxisd(1.1, Vec3(0.2, -1, 0.4).normalized()).toRotationMatrix();
  const Vec3 t(0.1, 0.2, -0.3);
  VecX moved(rest.size());
  for (int n = 0; n < f.mesh.nodeCount(); ++n) moved.segment<3>(3 * n) = Q * f.mesh.nodes[n] + t;
  const VecX ym = v2y(f.mesh, moved);
  for (int v = 0; v < f.yarn.vertexCount(); ++v)
    EXPECT_NEAR((ym.segment<3>(3 * v) - (Q * f.yarn.restVertices[v] + t)).norm(), 0.0, 1e-12);
}

TEST(V2Y, MatchesManualBarycentricEvaluation) {
  Fixture f;
  std::mt19937 rng(4);
  std::normal_distribution<double> n01;
  VecX x(f.mesh.dofCount());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = n01(rng);
  const VecX y = v2y(f.mesh, x);
  for (int v = 0; v < f.yarn.vertexCount(); ++v) {
    Vec3 p = Vec3::Zero();
    const auto& tet = f.mesh.tets[f.mesh.hostElement[v]];
    for (int k = 0; k < 4; ++k) p += f.mesh.barycentric[v][k] * x.segment<3>(3 * tet[k]);
    EXPECT_NEAR((y.segment<3>(3 * v) - p).norm(), 0.0, 1e-12);
  }
}

TEST(SegmentF, QuarterTurnAboutZ) {
  const YarnModel m = segmentModel(Vec3(0, 0, 0), Vec3(1, 0, 0));
  const SegmentDeformation d = yarnSegmentF(m, 0, {Vec3(0, 0, 0), Vec3(0, 1, 0)});
  EXPECT_NEAR((d.omega - 0.5 * std::numbers::pi * skew(Vec3::UnitZ())).norm(), 0.0, 1e-10);
  EXPECT_NEAR((d.S - Mat3::Identity()).norm(), 0.0, 1e-10);
  EXPECT_NEAR((expSkew(d.omega) * d.S - d.F).norm(), 0.0, 1e-8);
}

TEST(SegmentF, AxialStretchMatchesSvdOracle) {
  const Vec3 a(0.1, 0.2, 0.3);
  const Vec3 dir = Vec3(1, 2, -1).normalized();
  const YarnModel m = segmentModel(a, a + 0.01 * dir);
  const SegmentDeformation d = yarnSegmentF(m, 0, {a, a + 0.012 * dir});
  EXPECT_NEAR(d.omega.norm(), 0.0, 1e-10);
  Eigen::JacobiSVD<Mat3> svd(d.F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 S = svd.matrixV() * svd.singularValues().asDiagonal() * svd.matrixV().transpose();
  EXPECT_NEAR((d.S - S).norm(), 0.0, 1e-10);
  EXPECT_NEAR((d.S * dir - 1.2 * dir).norm(), 0.0, 1e-10);
  EXPECT_NEAR((d.S - d.S.transpose()).norm(), 0.0, 1e-14);
  EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat3>(d.S).eigenvalues().minCoeff(), 0.0);
}

TEST(SegmentF, DegenerateDeformedSegmentRejected) {
  const YarnModel m = segmentModel(Vec3(0, 0, 0), Vec3(1, 0, 0));
  try {
    yarnSegmentF(m, 0, {Vec3(0.5, 0, 0), Vec3(0.5, 0, 0)});
    FAIL() << "expected InvalidInput";
  } catch (const InvalidInput& e) {
    EXPECT_EQ(e.index, 0);
  }
}

TEST(SegmentF, RandomDeformationsReconstruct) {
  Fixture f;
  const auto pose = smoothPose(f.yarn, 5e-4);
  const int ns = static_cast<int>(f.yarn.segments().size());
  for (int s = 0; s < ns; s += 5) {
    const SegmentDeformation d = yarnSegmentF(f.yarn, s, pose);
    EXPECT_NEAR((expSkew(d.omega) * d.S - d.F).norm(), 0.0, 1e-8);
    EXPECT_NEAR((d.omega + d.omega.transpose()).norm(), 0.0, 1e-14);
    EXPECT_LT(unskew(d.omega).norm(), std::numbers::pi);
  }
}

TEST(LogRotation, InvertsExponentialIncludingHalfTurn) {
  std::mt19937 rng(9);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 50; ++i) {
    const Vec3 axis = Vec3(n01(rng), n01(rng), n01(rng)).normalized();
    const double angle = 3.1 * (i + 0.5) / 50.0;
    const Mat3 R = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    EXPECT_NEAR((expSkew(logRotation(R)) - R).norm(), 0.0, 1e-10);
    EXPECT_NEAR((logRotation(R) - angleAxisLog(R)).norm(), 0.0, 1e-8);
  }
  const Mat3 half = Eigen::AngleAxisd(std::numbers::pi, Vec3(0, -1, 0)).toRotationMatrix();
  EXPECT_NEAR((logRotation(half) - std::numbers::pi * skew(Vec3::UnitY())).norm(), 0.0, 1e-8);
}

TEST(ElementTarget, IdenticalSegmentsGiveTheirF) {
  // Parallel strands under one rotation about an axis normal to them share the same segment F.
  const YarnModel bar = yarnBar({.strandsY = 3, .strandsZ = 2, .verticesPerStrand = 15, .length = 0.03, .spacing = 2e-3});
  const VolumeMesh mesh = buildVolumeMesh(bar, 2.5e-3);
  const Mat3 C = Eigen::AngleAxisd(0.4, Vec3::UnitZ()).toRotationMatrix() * Vec3(1.1, 1.0, 1.0).asDiagonal();
  std::vector<Vec3> pose(bar.vertexCount());
  for (int v = 0; v < bar.vertexCount(); ++v) pose[v] = C * bar.restVertices[v];
  int checked = 0;
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const auto T = elementTargetF(mesh, bar, pose, e);
    if (!T) continue;
    EXPECT_NEAR((*T - C).norm(), 0.0, 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(ElementTarget, OppositeRotationsCancel) {
  YarnModel m;
  m.restVertices = {Vec3(0.1, 0.1, 0.1), Vec3(0.9, 0.1, 0.1), Vec3(0.1, 0.2, 0.1), Vec3(0.9, 0.2, 0.1)};
  m.deformedVertices = m.restVertices;
  m.polylines = {{0, 1}, {2, 3}};
  m.linearDensity = {1e-3, 1e-3};
  m = computeSegmentNormals(m);
  const VolumeMesh mesh = buildVolumeMesh(m, 1.0);
  const double th = 0.3;
  const Mat3 Rp = Eigen::AngleAxisd(th, Vec3::UnitZ()).toRotationMatrix();
  const Mat3 Rm = Eigen::AngleAxisd(-th, Vec3::UnitZ()).toRotationMatrix();
  std::vector<Vec3> pose = {m.restVertices[0], m.restVertices[0] + Rp * (m.restVertices[1] - m.restVertices[0]),
                            m.restVertices[2], m.restVertices[2] + Rm * (m.restVertices[3] - m.restVertices[2])};
  const auto cover = elementCoverage(mesh, m);
  for (int e = 0; e < mesh.elementCount(); ++e) {
    if (cover[e].size() != 2 || std::abs(cover[e][0].second - cover[e][1].second) > 1e-12) continue;
    EXPECT_NEAR((*elementTargetF(mesh, m, pose, e) - Mat3::Identity()).norm(), 0.0, 1e-12);
  }
}

TEST(ElementTarget, MatchesTaylorExponentialOracle) {
  Fixture f;
  std::mt19937 rng(21);
  std::normal_distribution<double> n01;
  std::vector<Vec3> pose = f.yarn.restVertices;
  for (auto& p : pose) p += 3e-4 * Vec3(n01(rng), n01(rng), n01(rng));
  const auto cover = elementCoverage(f.mesh, f.yarn);
  const auto segs = f.yarn.segments();
  int checked = 0;
  for (int e = 0; e < f.mesh.elementCount(); ++e) {
    if (cover[e].size() < 3) continue;
    Mat3 omega = Mat3::Zero();
    Mat3 S = Mat3::Zero();
    double total = 0.0;
    for (const auto& [s, len] : cover[e]) {
      const Mat3 F = deformedFrame(f.yarn, segs[s], s, pose) * restFrame(f.yarn, segs[s], s).inverse();
      Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
      omega += len * angleAxisLog(svd.matrixU() * svd.matrixV().transpose());
      S += len * svd.matrixV() * svd.singularValues().asDiagonal() * svd.matrixV().transpose();
      total += len;
    }
    const Mat3 oracle = taylorExp(omega / total) * (S / total);
    EXPECT_NEAR((*elementTargetF(f.mesh, f.yarn, pose, e) - oracle).norm(), 0.0, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(ElementTarget, UncoveredElementSignalled) {
  Fixture f;
  const auto cover = elementCoverage(f.mesh, f.yarn);
  for (int e = 0; e < f.mesh.elementCount(); ++e)
    if (cover[e].empty()) {
      EXPECT_FALSE(elementTargetF(f.mesh, f.yarn, f.yarn.restVertices, e).has_value());
      return;
    }
}

TEST(Y2V, RestPoseGivesRestMesh) {
  Fixture f;
  const ShapeFit fit(f.mesh, f.yarn);
  const VecX x = fit.y2v(f.yarn.restVertices);
  EXPECT_NEAR((x - f.mesh.restPositions()).lpNorm<Eigen::Infinity>(), 0.0, 1e-8);
}

TEST(Y2V, TranslatedYarnTranslatesMesh) {
  Fixture f;
  const ShapeFit fit(f.mesh, f.yarn);
  const Vec3 t(0.01, -0.02, 0.005);
  std::vector<Vec3> pose = f.yarn.restVertices;
  for (auto& p : pose) p += t;
  const VecX x = fit.y2v(pose);
  for (int n = 0; n < f.mesh.nodeCount(); ++n) EXPECT_NEAR((x.segment<3>(3 * n) - f.mesh.nodes[n] - t).norm(), 0.0, 1e-8);
  const VecX y = v2y(f.mesh, x);
  EXPECT_LT((y - flatten(pose)).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(SegmentF, ConjugatedByRotationOfAllYarnData) {
  // Rotating rest vertices, rest normals and the deformed pose by Q maps F to Q F Q^T.
  Fixture f;
  const auto pose = smoothPose(f.yarn, 5e-4);
  const Mat3 Q = Eigen::AngleAxisd(0.8, Vec3(1, 1, 0).normalized()).toRotationMatrix();
  YarnModel r = f.yarn;
  std::vector<Vec3> rpose(pose.size());
  for (int v = 0; v < r.vertexCount(); ++v) {
    r.restVertices[v] = Q * f.yarn.restVertices[v];
    rpose[v] = Q * pose[v];
  }
  for (auto& n : r.segmentNormals) {
    n.n1 = Q * n.n1;
    n.n2 = Q * n.n2;
  }
  const int ns = static_cast<int>(f.yarn.segments().size());
  for (int s = 0; s < ns; s += 3) {
    const Mat3 F = yarnSegmentF(f.yarn, s, pose).F;
    EXPECT_NEAR((yarnSegmentF(r, s, rpose).F - Q * F * Q.transpose()).norm(), 0.0, 1e-10);
  }
}

TEST(Y2V, SolveMatchesDenseNormalEquations) {
  const YarnModel yarn = ribPatch({.rows = 2, .stitches = 2, .verticesPerStitch = 8});
  const VolumeMesh mesh = buildVolumeMesh(yarn, 2e-3);
  ASSERT_LE(mesh.nodeCount(), 300);
  const ShapeFit fit(mesh, yarn);
  const auto pose = smoothPose(yarn, 3e-4);
  const TargetDeformation t = fit.targets(pose);
  const int n = mesh.dofCount();
  // The objective is quadratic: probe its Hessian with gradient differences of unit vectors.
  const VecX zero = VecX::Zero(n);
  const VecX g0 = fit.gradient(zero, t, pose);
  MatX H(n, n);
  for (int j = 0; j < n; ++j) H.col(j) = fit.gradient(VecX::Unit(n, j), t, pose) - g0;
  // The gradient agrees with central differences of the objective.
  std::mt19937 rng(1);
  std::normal_distribution<double> n01;
  VecX x0(n), dir(n);
  for (int i = 0; i < n; ++i) {
    x0[i] = mesh.restPositions()[i] + 1e-4 * n01(rng);
    dir[i] = n01(rng);
  }
  const double h = 1e-7;
  const double fd = (fit.objective(x0 + h * dir, t, pose) - fit.objective(x0 - h * dir, t, pose)) / (2 * h);
  EXPECT_NEAR(fd, fit.gradient(x0, t, pose).dot(dir), 1e-6 * std::abs(fd) + 1e-12);

  const VecX dense = H.ldlt().solve(-g0);
  const VecX x = fit.solve(t, pose);
  EXPECT_LT((x - dense).norm() / dense.norm(), 1e-8);
  EXPECT_LT(fit.gradient(x, t, pose).norm(), 1e-8 * g0.norm());

  // Not worse than the rest pose or the interpolation pseudo-inverse.
  const MatX N = MatX(mesh.interpolation);
  const MatX Y = Eigen::Map<const MatX>(flatten(pose).data(), 3, yarn.vertexCount()).transpose();
  const MatX Xp = N.completeOrthogonalDecomposition().solve(Y);
  VecX pinv(n);
  for (int i = 0; i < mesh.nodeCount(); ++i) pinv.segment<3>(3 * i) = Xp.row(i).transpose();
  const double best = fit.objective(x, t, pose);
  EXPECT_LE(best, fit.objective(mesh.restPositions(), t, pose));
  EXPECT_LE(best, fit.objective(pinv, t, pose));
  for (int k = 0; k < 20; ++k) {
    VecX p(n);
    for (int i = 0; i < n; ++i) p[i] = 1e-5 * n01(rng);
    EXPECT_LE(best, fit.objective(x + p, t, pose));
  }
}

TEST(Inertia, VanishesForConstantAndUniformMotion) {
  Fixture f;
  const ShapeFit fit(f.mesh, f.yarn);
  YarnSequence seq;
  seq.dt = 0.01;
  const Vec3 v(0.1, -0.05, 0.02);
  for (int i = 0; i < 3; ++i) {
    std::vector<Vec3> frame = f.yarn.restVertices;
    for (auto& p : frame) p += i * seq.dt * v;
    seq.frames.push_back(frame);
  }
  EXPECT_LT(estimateInertia(fit, seq, 2).lpNorm<Eigen::Infinity>(), 1e-12);
  YarnSequence still = seq;
  still.frames.assign(3, f.yarn.restVertices);
  EXPECT_LT(estimateInertia(fit, still, 2).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_THROW(estimateInertia(fit, seq, 1), InvalidInput);
}

TEST(Inertia, FreeFallCancelsGravity) {
  Fixture f;
  const ShapeFit fit(f.mesh, f.yarn);
  const Vec3 g(0, 0, -9.81);
  YarnSequence seq;
  seq.dt = 0.01;
  const VecX m = f.yarn.vertexMasses();
  std::vector<Vec3> force(f.yarn.vertexCount());
  for (int v = 0; v < f.yarn.vertexCount(); ++v) force[v] = m[v] * g;
  for (int i = 0; i < 3; ++i) {
    std::vector<Vec3> frame = f.yarn.restVertices;
    const double t = i * seq.dt;
    for (auto& p : frame) p += 0.5 * t * t * g;
    seq.frames.push_back(frame);
    seq.externalForce.push_back(force);
  }
  const VecX a = estimateInertia(fit, seq, 2);
  // Massless nodes carry no inertia; the check covers nodes with mass.
  for (int n = 0; n < f.mesh.nodeCount(); ++n)
    if (f.mesh.lumpedMass[n] > 0.0) EXPECT_NEAR(a.segment<3>(3 * n).norm(), 0.0, 1e-9);
}

TEST(Forces, UniformAccelerationMapsToLumpedMass) {
  Fixture f;
  const Vec3 g(0.3, -9.81, 1.0);
  const VecX m = f.yarn.vertexMasses();
  std::vector<Vec3> force(f.yarn.vertexCount());
  for (int v = 0; v < f.yarn.vertexCount(); ++v) force[v] = m[v] * g;
  const VecX fn = distributeForce(f.mesh, f.yarn, force);
  for (int n = 0; n < f.mesh.nodeCount(); ++n)
    EXPECT_NEAR((fn.segment<3>(3 * n) - f.mesh.lumpedMass[n] * g).norm(), 0.0, 1e-12 * g.norm() * m.sum());
}
