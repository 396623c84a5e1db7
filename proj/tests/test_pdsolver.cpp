#include "knitvh/ajacobi.hpp"
#include "knitvh/cms.hpp"
#include "knitvh/eigs.hpp"
#include "knitvh/equilibrium.hpp"
#include "knitvh/patch.hpp"
#include "knitvh/pd_solver.hpp"
#include "knitvh/volmesh.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <random>

using namespace knitvh;

namespace {

struct BarFixture {
  YarnModel yarn = yarnBar({});
  VolumeMesh mesh = buildVolumeMesh(yarn, 5e-3);
};

MatX dense(const SpMat& A) { return MatX(A); }

VolumeMesh singleTet(double mass) {
  VolumeMesh m = VolumeMesh::fromTets({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)}, {{0, 1, 2, 3}});
  m.lumpedMass.setConstant(mass);
  return m;
}

// Diagonally dominant SPD matrix with random off-diagonal couplings.
SpMat randomSpd(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  MatX A = MatX::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (u(rng) > 0.6) A(i, j) = A(j, i) = u(rng);
  for (int i = 0; i < n; ++i) A(i, i) = A.row(i).cwiseAbs().sum() + 0.5 + std::abs(u(rng));
  return A.sparseView();
}

}  // namespace

TEST(AssembleGlobal, ZeroMaterialGivesMassOverDt2) {
  BarFixture f;
  const double dt = 0.01;
  const SpMat K = assembleGlobal(f.mesh, MaterialField::uniform(f.mesh.elementCount(), 0, 0), dt);
  MatX expect = MatX::Zero(f.mesh.dofCount(), f.mesh.dofCount());
  for (int i = 0; i < f.mesh.nodeCount(); ++i)
    for (int c = 0; c < 3; ++c) expect(3 * i + c, 3 * i + c) = f.mesh.lumpedMass[i] / (dt * dt);
  EXPECT_EQ((dense(K) - expect).norm(), 0.0);
}

TEST(AssembleGlobal, LinearInMaterial) {
  BarFixture f;
  const int ne = f.mesh.elementCount();
  const SpMat M = assembleGlobal(f.mesh, MaterialField::uniform(ne, 0, 0), 0.01);
  const SpMat K1 = assembleGlobal(f.mesh, MaterialField::uniform(ne, 3, 2), 0.01);
  const SpMat K2 = assembleGlobal(f.mesh, MaterialField::uniform(ne, 6, 4), 0.01);
  EXPECT_LT((dense(K2 - M) - 2.0 * dense(K1 - M)).norm(), 1e-12 * dense(K2).norm());
  EXPECT_LT((dense(K1) - dense(K1).transpose()).norm(), 1e-12 * dense(K1).norm());
  EXPECT_EQ(Eigen::LLT<MatX>(dense(K1)).info(), Eigen::Success);
}

TEST(AssembleGlobal, TwoTetsMatchHandAssembly) {
  std::vector<Vec3> nodes{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(1, 1, 1)};
  const std::vector<Tet> tets{{0, 1, 2, 3}, {1, 2, 3, 4}};
  VolumeMesh mesh = VolumeMesh::fromTets(nodes, tets);
  mesh.lumpedMass << 1, 2, 3, 4, 5;
  const MaterialField gamma(Eigen::Vector4d(2, 3, 5, 7));
  const double dt = 0.1;
  MatX K = MatX::Zero(15, 15);
  for (int i = 0; i < 5; ++i) K.block<3, 3>(3 * i, 3 * i) += mesh.lumpedMass[i] / (dt * dt) * Mat3::Identity();
  const double g[2] = {2 + 5, 3 + 7};
  for (int e = 0; e < 2; ++e) {
    const auto& t = tets[e];
    Mat3 Dm;
    for (int c = 0; c < 3; ++c) Dm.col(c) = nodes[t[c + 1]] - nodes[t[0]];
    const double vol = std::abs(Dm.determinant()) / 6.0;
    const Mat3 inv = Dm.inverse();
    std::array<Vec3, 4> grad;
    for (int c = 0; c < 3; ++c) grad[c + 1] = inv.row(c).transpose();
    grad[0] = -(grad[1] + grad[2] + grad[3]);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) K.block<3, 3>(3 * t[a], 3 * t[b]) += 2 * vol * g[e] * grad[a].dot(grad[b]) * Mat3::Identity();
  }
  EXPECT_LT((dense(assembleGlobal(mesh, gamma, dt)) - K).norm(), 1e-12 * K.norm());
}

TEST(Elasticity, RigidPosesHaveNoForce) {
  BarFixture f;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  VecX g(2 * f.mesh.elementCount());
  for (auto& v : g) v = u(rng);
  const Mat3 Q = Eigen::AngleAxisd(1.1, Vec3(1, -2, 0.5).normalized()).toRotationMatrix();
  VecX x(f.mesh.dofCount());
  for (int i = 0; i < f.mesh.nodeCount(); ++i) x.segment<3>(3 * i) = Q * f.mesh.nodes[i] + Vec3(0.1, 0.2, -0.3);
  const VecX grad = elasticGradient(f.mesh, MaterialField(g), x);
  EXPECT_LT(grad.lpNorm<Eigen::Infinity>(), 1e-10 * g.maxCoeff() * f.mesh.cellSize * f.mesh.cellSize);
}

TEST(PdStep, RestStateWithoutForceStaysPut) {
  BarFixture f;
  PdSolver pd(f.mesh, MaterialField::uniform(f.mesh.elementCount(), 10, 40), 1.0 / 150, {});
  SolverState s;
  s.x = f.mesh.restPositions();
  s.v = VecX::Zero(s.x.size());
  s.dt = 1.0 / 150;
  const SolverState next = pd.step(s, VecX::Zero(s.x.size()));
  EXPECT_LT((next.x - s.x).lpNorm<Eigen::Infinity>(), 1e-12);
  EXPECT_LT(next.v.lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(PdStep, FreeFallFollowsImplicitEulerKinematics) {
  BarFixture f;
  const double dt = 1.0 / 150;
  PdSolver pd(f.mesh, MaterialField::uniform(f.mesh.elementCount(), 10, 40), dt, {});
  const Vec3 g(0, 0, -9.81);
  VecX force(f.mesh.dofCount());
  for (int i = 0; i < f.mesh.nodeCount(); ++i) force.segment<3>(3 * i) = f.mesh.lumpedMass[i] * g;
  SolverState s;
  s.x = f.mesh.restPositions();
  s.v = VecX::Zero(s.x.size());
  for (int k = 1; k <= 10; ++k) {
    s = pd.step(s, force);
    // v_k = k g dt, x_k = x_0 + dt^2 g k (k + 1) / 2.
    const Vec3 shift = dt * dt * g * (k * (k + 1) / 2.0);
    for (int i = 0; i < f.mesh.nodeCount(); ++i) {
      if (f.mesh.lumpedMass[i] == 0.0) continue;
      ASSERT_LT((s.x.segment<3>(3 * i) - f.mesh.nodes[i] - shift).norm(), 1e-8) << k;
    }
  }
}

TEST(PdMinimize, ObjectiveNeverIncreases) {
  BarFixture f;
  std::vector<char> pins(f.mesh.nodeCount(), 0);
  for (int i = 0; i < f.mesh.nodeCount(); ++i) pins[i] = f.mesh.nodes[i].x() < f.mesh.nodes[0].x() + 1e-9;
  PdSolver pd(f.mesh, MaterialField::uniform(f.mesh.elementCount(), 5, 20), 1.0 / 30, pins, {.iterations = 60});
  VecX y = f.mesh.restPositions();
  for (int i = 0; i < f.mesh.nodeCount(); ++i) {
    const Vec3 p = f.mesh.nodes[i];
    y.segment<3>(3 * i) += Vec3(0.2 * p.x(), 0.3 * p.x() * p.x(), -0.1 * p.y());
  }
  std::vector<double> trace;
  pd.minimize(y, f.mesh.restPositions(), {}, &trace);
  ASSERT_EQ(trace.size(), 60u);
  for (size_t k = 1; k < trace.size(); ++k) EXPECT_LE(trace[k], trace[k - 1] * (1 + 1e-12)) << k;
}

TEST(PdMinimize, SingleTetStretchMatchesNewtonOracle) {
  const VolumeMesh mesh = singleTet(1e-3);
  const double dt = 0.05, gs = 2.0, gv = 6.0;
  const MaterialField gamma = MaterialField::uniform(1, gs, gv);
  std::vector<char> pins{1, 1, 1, 0};
  VecX y = mesh.restPositions();
  y.segment<3>(9) = Vec3(0.3, 0.2, 1.8);
  VecX x0 = mesh.restPositions();

  // Oracle: Newton on the free node with analytic stress and a finite-difference Hessian.
  const double m = 1e-3 / (dt * dt);
  auto grad = [&](const Vec3& p) {
    std::array<Vec3, 4> x{mesh.nodes[0], mesh.nodes[1], mesh.nodes[2], p};
    const Mat3 P = elementStress(deformationGradient(mesh.shapeGradients[0], x), gs, gv, mesh.elementVolume[0]);
    return Vec3(m * (p - y.segment<3>(9)) + P * mesh.shapeGradients[0].col(3));
  };
  Vec3 p = y.segment<3>(9);
  for (int it = 0; it < 100 && grad(p).norm() > 1e-13; ++it) {
    Mat3 H;
    for (int c = 0; c < 3; ++c) {
      Vec3 e = Vec3::Zero();
      e[c] = 1e-6;
      H.col(c) = (grad(p + e) - grad(p - e)) / 2e-6;
    }
    p -= H.ldlt().solve(grad(p));
  }
  ASSERT_LT(grad(p).norm(), 1e-10);

  PdSolver pd(mesh, gamma, dt, pins, {.iterations = 3000});
  const VecX x = pd.minimize(y, x0);
  EXPECT_LT((x.segment<3>(9) - p).norm(), 1e-6);

  // A short PD run followed by the Newton polish reaches the gate in a few steps.
  PdSolver shortPd(mesh, gamma, dt, pins, {.iterations = 30});
  EquilibriumProblem prob(mesh, dt, y);
  prob.pinnedNode = pins;
  const PolishResult r = newtonPolish(prob, gamma, shortPd.minimize(y, x0), 1e-5);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 5);
  EXPECT_LT((r.x.segment<3>(9) - p).norm(), 1e-6);
}

TEST(NewtonPolish, EquilibriumNeedsNoIterations) {
  BarFixture f;
  EquilibriumProblem prob(f.mesh, 0.01, f.mesh.restPositions());
  const PolishResult r = newtonPolish(prob, MaterialField::uniform(f.mesh.elementCount(), 1, 1), f.mesh.restPositions());
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 0);
}

TEST(NewtonPolish, PureInertiaIsSolvedByTarget) {
  BarFixture f;
  VecX y = f.mesh.restPositions();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1e-3, 1e-3);
  for (auto& v : y) v += u(rng);
  EquilibriumProblem prob(f.mesh, 0.01, y);
  const MaterialField zero = MaterialField::uniform(f.mesh.elementCount(), 0, 0);
  EXPECT_EQ(prob.residual(zero, y).norm(), 0.0);
  EXPECT_EQ(newtonPolish(prob, zero, y).iterations, 0);
}

TEST(Collider, ProjectsPenetratingNodes) {
  const Collider ground = Collider::plane(Vec3::Zero(), Vec3::UnitZ());
  EXPECT_FALSE(ground.project(Vec3(0.1, 0.2, 0.01)));
  EXPECT_NEAR((*ground.project(Vec3(0.1, 0.2, -0.01)) - Vec3(0.1, 0.2, 0)).norm(), 0.0, 1e-15);
  const Collider ball = Collider::sphere(Vec3(0, 0, 1), 0.5);
  EXPECT_NEAR((*ball.project(Vec3(0, 0.1, 1)) - Vec3(0, 0.5, 1)).norm(), 0.0, 1e-15);
  VecX x(6);
  x << 0, 0, 1, 0, 0, -0.5;
  const auto hits = collideProject(x, {ground});
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].first, 1);
}

TEST(Collider, BarRestsOnGround) {
  BarFixture f;
  const double dt = 1.0 / 150;
  PdSolver pd(f.mesh, MaterialField::uniform(f.mesh.elementCount(), 20, 80), dt, {});
  double zmin = INFINITY;
  for (const auto& p : f.mesh.nodes) zmin = std::min(zmin, p.z());
  SolverState s;
  s.x = f.mesh.restPositions();
  s.v = VecX::Zero(s.x.size());
  s.colliders = {Collider::plane(Vec3(0, 0, zmin - 2e-3), Vec3::UnitZ())};
  VecX force(f.mesh.dofCount());
  for (int i = 0; i < f.mesh.nodeCount(); ++i) force.segment<3>(3 * i) = f.mesh.lumpedMass[i] * Vec3(0, 0, -9.81);
  for (int k = 0; k < 60; ++k) s = pd.step(s, force);
  double lowest = INFINITY;
  for (int i = 0; i < f.mesh.nodeCount(); ++i) lowest = std::min(lowest, s.x[3 * i + 2]);
  EXPECT_GE(lowest, zmin - 2e-3 - 1e-4 * f.mesh.cellSize);
  EXPECT_LT(lowest, zmin - 2e-3 + 1e-4);  // it did land
}

namespace {

struct CmsFixture {
  BarFixture bar;
  SpMat K;
  std::vector<int> labels;
  CmsFixture(int domains) {
    const VolumeMesh& mesh = bar.mesh;
    K = assembleScalarGlobal(mesh, MaterialField::uniform(mesh.elementCount(), 3, 5), 0.01, mesh.lumpedMass);
    std::vector<int> freeIndex(mesh.nodeCount());
    for (int i = 0; i < mesh.nodeCount(); ++i) freeIndex[i] = i;
    labels = nodeDomains(mesh, slabPartition(mesh, domains), freeIndex, mesh.nodeCount());
  }
};

}  // namespace

TEST(Cms, CompleteBasesReproduceDirectSolve) {
  for (int domains : {1, 2}) {
    CmsFixture f(domains);
    ASSERT_LE(3 * f.K.rows(), 600);
    const DomainDecomposition dd = buildCms(f.K, f.labels, static_cast<int>(f.K.rows()));
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    MatX b(f.K.rows(), 3);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(rng);
    const MatX exact = Eigen::LLT<MatX>(dense(f.K)).solve(b);
    EXPECT_LT((dd.solve(b) - exact).norm() / exact.norm(), 1e-8) << domains;
  }
}

TEST(Cms, BoundaryModesAloneSolveBoundaryLoads) {
  CmsFixture f(2);
  const DomainDecomposition dd = buildCms(f.K, f.labels, 0);
  MatX b = MatX::Zero(f.K.rows(), 1);
  for (int i : dd.boundaryDofs) b(i, 0) = 1.0 + 0.1 * i;
  const MatX exact = Eigen::LLT<MatX>(dense(f.K)).solve(b);
  EXPECT_LT((dd.solve(b) - exact).norm() / exact.norm(), 1e-10);
}

TEST(Cms, ModeInvariants) {
  CmsFixture f(2);
  const DomainDecomposition dd = buildCms(f.K, f.labels, 20);
  const MatX Kd = dense(f.K);
  ASSERT_EQ(dd.domainCount(), 2);
  std::vector<int> seen(f.K.rows(), 0);
  for (int i : dd.boundaryDofs) ++seen[i];
  for (int d = 0; d < 2; ++d) {
    const auto& in = dd.internalDofs[d];
    for (int i : in) ++seen[i];
    const MatX Kii = Kd(in, in), Kib = Kd(in, dd.boundaryDofs);
    EXPECT_LT((Kii * dd.Psi[d] + Kib).norm(), 1e-8 * Kib.norm());
    MatX L = dd.Phi[d].transpose() * Kii * dd.Phi[d];
    const double scale = L.diagonal().cwiseAbs().maxCoeff();
    L.diagonal().setZero();
    EXPECT_LT(L.norm(), 1e-8 * scale);
  }
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(AJacobi, AggregatedSweepsEqualPlainSweeps) {
  std::mt19937_64 rng(21);
  const int n = 50;
  const SpMat K = randomSpd(n, rng);
  std::normal_distribution<double> nd;
  MatX b(n, 2), x0(n, 2);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = nd(rng), x0.data()[i] = nd(rng);
  const double w = 2.0 / 3.0;
  const MatX Kd = dense(K);
  const VecX invD = Kd.diagonal().cwiseInverse();
  MatX plain = x0;
  for (int k = 0; k < 20; ++k) plain += w * invD.asDiagonal() * (b - Kd * plain);
  const AJacobiResult r = aJacobiRefine(K, b, x0, {.sweeps = 10, .aggregation = 2, .omega = w});
  EXPECT_FALSE(r.diverged);
  EXPECT_LT((r.x - plain).norm() / plain.norm(), 1e-12);
}

TEST(AJacobi, ExactStartIsFixed) {
  std::mt19937_64 rng(22);
  const SpMat K = randomSpd(30, rng);
  const MatX x = MatX::Random(30, 1);
  const AJacobiResult r = aJacobiRefine(K, K * x, x);
  EXPECT_LT((r.x - x).norm(), 1e-12);
}

TEST(AJacobi, DiagonalSystemSolvedInOneSweep) {
  VecX d(5);
  d << 1, 2, 3, 4, 5;
  const SpMat K = MatX(d.asDiagonal()).sparseView();
  const MatX b = MatX::Ones(5, 1);
  const AJacobiResult r = aJacobiRefine(K, b, MatX::Zero(5, 1), {.sweeps = 1, .aggregation = 1, .omega = 1.0});
  EXPECT_LT((r.x.col(0) - d.cwiseInverse()).norm(), 1e-15);
}

TEST(Eigs, SparsePathMatchesDenseSolver) {
  // Path graph Laplacian plus a small diagonal shift: large enough for the iterative path.
  const int n = 1200;
  std::vector<Eigen::Triplet<double>> t;
  for (int i = 0; i < n; ++i) {
    t.emplace_back(i, i, (i == 0 || i == n - 1 ? 1.0 : 2.0) + 1e-3 * (1 + std::sin(i)));
    if (i + 1 < n) t.emplace_back(i, i + 1, -1.0), t.emplace_back(i + 1, i, -1.0);
  }
  SpMat A(n, n);
  A.setFromTriplets(t.begin(), t.end());
  const EigenPairs p = smallestEigenpairs(A, 6);
  Eigen::SelfAdjointEigenSolver<MatX> es(dense(A));
  ASSERT_TRUE(p.converged);
  for (int k = 0; k < 6; ++k) {
    EXPECT_NEAR(p.values[k], es.eigenvalues()[k], 1e-8 * es.eigenvalues()[k]);
    EXPECT_LT((A * p.vectors.col(k) - p.values[k] * p.vectors.col(k)).norm(), 1e-6 * p.values[k]);
  }
  EXPECT_LT((p.vectors.transpose() * p.vectors - MatX::Identity(6, 6)).norm(), 1e-10);
}
