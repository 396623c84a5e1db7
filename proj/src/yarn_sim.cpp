#include "knitvh/yarn_sim.hpp"

#include "knitvh/equilibrium.hpp"

#include <Eigen/SparseCholesky>

#include <cmath>
#include <set>
#include <unordered_map>

namespace knitvh {

Vec3 PinMotion::target(const YarnModel& model, size_t k, int step) const {
  const double s = rampSteps > 0 ? std::min(1.0, static_cast<double>(step) / rampSteps) : 1.0;
  return path ? path(k, s) : model.restVertices[vertices[k]];
}

namespace {

struct Spring {
  int i;
  int j;
  double rest;
  double weight;
};

std::vector<Spring> buildSprings(const YarnModel& model, const YarnSimOptions& opt) {
  std::vector<Spring> springs;
  for (const auto& run : model.polylines) {
    for (size_t k = 1; k < run.size(); ++k) {
      const double L = (model.restVertices[run[k]] - model.restVertices[run[k - 1]]).norm();
      springs.push_back({run[k - 1], run[k], L, opt.stretchStiffness / L});
    }
    for (size_t k = 2; k < run.size() && opt.bendStiffness > 0.0; ++k) {
      const double L = 0.5 * ((model.restVertices[run[k]] - model.restVertices[run[k - 1]]).norm() +
                              (model.restVertices[run[k - 1]] - model.restVertices[run[k - 2]]).norm());
      const double rest = (model.restVertices[run[k]] - model.restVertices[run[k - 2]]).norm();
      springs.push_back({run[k - 2], run[k], rest, opt.bendStiffness / L});
    }
  }
  for (const auto& [a, b] : model.links)
    springs.push_back({a, b, (model.restVertices[a] - model.restVertices[b]).norm(), opt.linkStiffness});
  return springs;
}

std::set<std::pair<int, int>> excludedPairs(const std::vector<Spring>& springs) {
  std::set<std::pair<int, int>> out;
  for (const auto& s : springs) out.emplace(std::min(s.i, s.j), std::max(s.i, s.j));
  return out;
}

struct CellHash {
  size_t operator()(const std::array<long, 3>& k) const {
    return static_cast<size_t>(k[0] * 73856093L ^ k[1] * 19349663L ^ k[2] * 83492791L);
  }
};

std::vector<std::pair<int, int>> contactPairs(const std::vector<Vec3>& x, double radius,
                                              const std::set<std::pair<int, int>>& excluded) {
  std::vector<std::pair<int, int>> out;
  if (radius <= 0.0) return out;
  std::unordered_map<std::array<long, 3>, std::vector<int>, CellHash> grid;
  auto key = [&](const Vec3& p) {
    return std::array<long, 3>{static_cast<long>(std::floor(p.x() / radius)), static_cast<long>(std::floor(p.y() / radius)),
                               static_cast<long>(std::floor(p.z() / radius))};
  };
  for (size_t i = 0; i < x.size(); ++i) grid[key(x[i])].push_back(static_cast<int>(i));
  for (size_t i = 0; i < x.size(); ++i) {
    const auto k = key(x[i]);
    for (long dx = -1; dx <= 1; ++dx)
      for (long dy = -1; dy <= 1; ++dy)
        for (long dz = -1; dz <= 1; ++dz) {
          auto it = grid.find({k[0] + dx, k[1] + dy, k[2] + dz});
          if (it == grid.end()) continue;
          for (int j : it->second) {
            if (j <= static_cast<int>(i)) continue;
            if (excluded.count({static_cast<int>(i), j})) continue;
            if ((x[i] - x[j]).norm() < radius) out.emplace_back(static_cast<int>(i), j);
          }
        }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

double yarnElasticEnergy(const YarnModel& model, const std::vector<Vec3>& x, const YarnSimOptions& opt) {
  double E = 0.0;
  for (const auto& s : buildSprings(model, opt)) {
    const double len = (x[s.j] - x[s.i]).norm();
    E += 0.5 * s.weight * (len - s.rest) * (len - s.rest);
  }
  return E;
}

YarnSequence simulateYarn(const YarnModel& model, int steps, double dt, const std::vector<Vec3>& forces,
                          const PinMotion& pins, const YarnSimOptions& opt, const FrameCallback& onFrame) {
  model.validate();
  if (!(dt > 0.0)) throw InvalidInput("dt must be positive");
  if (steps < 0) throw InvalidInput("step count must be non-negative");
  const int n = model.vertexCount();
  if (!forces.empty() && static_cast<int>(forces.size()) != n) throw InvalidInput("one force per vertex is required");
  for (int v : pins.vertices)
    if (v < 0 || v >= n) throw InvalidInput("pinned vertex out of range", v);

  const std::vector<Spring> springs = buildSprings(model, opt);
  const auto excluded = excludedPairs(springs);
  VecX mass = model.vertexMasses();
  const double meanMass = mass.mean();
  double meanLength = 0.0;
  const auto segs = model.segments();
  for (const auto& s : segs) meanLength += model.restLength(s);
  meanLength /= static_cast<double>(segs.size());

  std::vector<char> pinned(n, 0);
  for (int v : pins.vertices) pinned[v] = 1;
  std::vector<int> freeIndex(n, -1);
  std::vector<int> freeVerts;
  for (int i = 0; i < n; ++i)
    if (!pinned[i]) {
      freeIndex[i] = static_cast<int>(freeVerts.size());
      freeVerts.push_back(i);
    }
  const int nf = static_cast<int>(freeVerts.size());

  std::vector<Vec3> ext(n, Vec3::Zero());
  for (int i = 0; i < n; ++i) ext[i] = mass[i] * opt.gravity + (forces.empty() ? Vec3::Zero() : forces[i]);

  YarnSequence seq;
  seq.dt = dt;
  seq.pinnedVertices = pins.vertices;
  std::vector<Vec3> x = model.deformedVertices;
  std::vector<Vec3> v(n, Vec3::Zero());
  seq.frames.push_back(x);
  seq.externalForce.push_back(ext);
  if (onFrame) onFrame(0, x);

  std::vector<std::pair<int, int>> activeContacts{{-1, -1}};
  std::vector<int> activeColliders{-1};
  Eigen::SimplicialLDLT<SpMat> ldlt;
  std::vector<Spring> stepSprings;
  const double colliderWeight = opt.colliderStiffness / (dt * dt);

  for (int step = 1; step <= steps; ++step) {
    // Predicted positions and pin targets.
    std::vector<Vec3> y(n);
    for (int i = 0; i < n; ++i) y[i] = x[i] + dt * v[i] + (mass[i] > 0.0 ? Vec3(dt * dt * ext[i] / mass[i]) : Vec3::Zero());
    std::vector<Vec3> xn = y;
    for (size_t k = 0; k < pins.vertices.size(); ++k) xn[pins.vertices[k]] = pins.target(model, k, step);

    const auto contacts = contactPairs(x, opt.contactRadius, excluded);
    std::vector<int> colliding;
    for (int i = 0; i < n; ++i)
      if (!pinned[i])
        for (const auto& c : opt.colliders)
          if (c.project(y[i]) || c.project(x[i])) {
            colliding.push_back(i);
            break;
          }
    if (contacts != activeContacts || colliding != activeColliders) {
      activeContacts = contacts;
      activeColliders = colliding;
      stepSprings = springs;
      for (const auto& [i, j] : contacts) stepSprings.push_back({i, j, opt.contactRadius, opt.contactStiffness});
      std::vector<Triplet> trips;
      for (int k = 0; k < nf; ++k) trips.emplace_back(k, k, std::max(mass[freeVerts[k]], 1e-12 * meanMass) / (dt * dt));
      for (const auto& s : stepSprings) {
        const int a = freeIndex[s.i];
        const int b = freeIndex[s.j];
        if (a >= 0) trips.emplace_back(a, a, s.weight);
        if (b >= 0) trips.emplace_back(b, b, s.weight);
        if (a >= 0 && b >= 0) {
          trips.emplace_back(a, b, -s.weight);
          trips.emplace_back(b, a, -s.weight);
        }
      }
      for (int i : colliding) trips.emplace_back(freeIndex[i], freeIndex[i], colliderWeight * std::max(mass[i], meanMass));
      SpMat A(nf, nf);
      A.setFromTriplets(trips.begin(), trips.end());
      ldlt.compute(A);
      if (ldlt.info() != Eigen::Success) throw NumericalError("yarn system factorization failed");
    }

    for (int it = 0; it < opt.iterations && nf > 0; ++it) {
      MatX rhs(nf, 3);
      for (int k = 0; k < nf; ++k) {
        const int i = freeVerts[k];
        rhs.row(k) = std::max(mass[i], 1e-12 * meanMass) / (dt * dt) * y[i].transpose();
      }
      for (const auto& s : stepSprings) {
        Vec3 d = xn[s.j] - xn[s.i];
        const double len = d.norm();
        const Vec3 p = len > 0.0 ? Vec3(s.rest * d / len) : Vec3(s.rest * Vec3::UnitX());
        const int a = freeIndex[s.i];
        const int b = freeIndex[s.j];
        // w |x_j - x_i - p|^2 / 2 with pinned ends moved to the right-hand side.
        if (a >= 0) rhs.row(a) += s.weight * (-p + (b < 0 ? xn[s.j] : Vec3::Zero())).transpose();
        if (b >= 0) rhs.row(b) += s.weight * (p + (a < 0 ? xn[s.i] : Vec3::Zero())).transpose();
      }
      for (int i : colliding) {
        Vec3 target = xn[i];
        for (const auto& c : opt.colliders)
          if (auto q = c.project(target)) target = *q;
        rhs.row(freeIndex[i]) += colliderWeight * std::max(mass[i], meanMass) * target.transpose();
      }
      const MatX X = ldlt.solve(rhs);
      if (!X.allFinite()) throw DivergenceError("non-finite yarn state", step);
      double change = 0.0;
      for (int k = 0; k < nf; ++k) {
        change = std::max(change, (X.row(k).transpose() - xn[freeVerts[k]]).norm());
        xn[freeVerts[k]] = X.row(k).transpose();
      }
      if (change <= opt.tolerance) break;
    }
    for (int i = 0; i < n; ++i) {
      if (pinned[i]) continue;
      for (const auto& c : opt.colliders)
        if (auto q = c.project(xn[i])) xn[i] = *q;
    }
    double maxDisp = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!xn[i].allFinite()) throw DivergenceError("non-finite yarn state", step);
      maxDisp = std::max(maxDisp, (xn[i] - x[i]).norm());
    }
    if (maxDisp > 10.0 * meanLength) throw DivergenceError("yarn displacement blow-up", step);
    for (int i = 0; i < n; ++i) v[i] = opt.velocityRetention * (xn[i] - x[i]) / dt;
    x = std::move(xn);
    seq.frames.push_back(x);
    seq.externalForce.push_back(ext);
    if (onFrame) onFrame(step, x);
  }
  return seq;
}

}  // namespace knitvh
