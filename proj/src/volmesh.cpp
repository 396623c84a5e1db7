#include "knitvh/volmesh.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <set>

namespace knitvh {

namespace {

// Six tetrahedra sharing the voxel diagonal (0,0,0)-(1,1,1); each follows one axis permutation.
constexpr int kAxisOrders[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};

VoxelKey add(VoxelKey k, int axis, int step) {
  k[axis] += step;
  return k;
}

bool containsKey(const std::vector<VoxelKey>& sorted, const VoxelKey& k) {
  return std::binary_search(sorted.begin(), sorted.end(), k);
}

long findKey(const std::vector<VoxelKey>& sorted, const VoxelKey& k) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), k);
  if (it == sorted.end() || *it != k) return -1;
  return it - sorted.begin();
}

// Occupied voxels of the yarn reduced to the largest face-connected component.
std::vector<VoxelKey> occupiedVoxels(const YarnModel& yarn, double cellSize) {
  if (!(cellSize > 0.0) || !std::isfinite(cellSize)) throw InvalidInput("cell size must be positive");
  const auto segs = yarn.segments();
  if (segs.empty()) throw InvalidInput("yarn has no segments");

  std::vector<std::vector<VoxelKey>> perSegment(segs.size());
  std::set<VoxelKey> all;
  for (size_t s = 0; s < segs.size(); ++s) {
    perSegment[s] = traverseSegment(yarn.restVertices[segs[s].a], yarn.restVertices[segs[s].b], cellSize);
    all.insert(perSegment[s].begin(), perSegment[s].end());
  }
  const std::vector<VoxelKey> cells(all.begin(), all.end());

  std::vector<int> component(cells.size(), -1);
  std::vector<size_t> sizes;
  for (size_t seed = 0; seed < cells.size(); ++seed) {
    if (component[seed] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    size_t count = 0;
    std::deque<size_t> queue{seed};
    component[seed] = id;
    while (!queue.empty()) {
      const size_t c = queue.front();
      queue.pop_front();
      ++count;
      for (int axis = 0; axis < 3; ++axis) {
        for (int step : {-1, 1}) {
          const long n = findKey(cells, add(cells[c], axis, step));
          if (n >= 0 && component[n] < 0) {
            component[n] = id;
            queue.push_back(static_cast<size_t>(n));
          }
        }
      }
    }
    sizes.push_back(count);
  }
  const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  std::vector<VoxelKey> kept;
  for (size_t c = 0; c < cells.size(); ++c)
    if (component[c] == keep) kept.push_back(cells[c]);
  for (size_t s = 0; s < segs.size(); ++s)
    for (const auto& k : perSegment[s])
      if (!containsKey(kept, k))
        throw InvalidInput("yarn segment outside the largest connected voxel component", static_cast<long>(s));
  return kept;
}

std::vector<VoxelKey> voxelCorners(const std::vector<VoxelKey>& voxels) {
  std::vector<VoxelKey> corners;
  corners.reserve(8 * voxels.size());
  for (const auto& v : voxels)
    for (int c = 0; c < 8; ++c) corners.push_back({v[0] + (c & 1), v[1] + ((c >> 1) & 1), v[2] + ((c >> 2) & 1)});
  std::sort(corners.begin(), corners.end());
  corners.erase(std::unique(corners.begin(), corners.end()), corners.end());
  return corners;
}

void computeGeometry(VolumeMesh& mesh) {
  const int ne = mesh.elementCount();
  mesh.elementVolume.resize(ne);
  mesh.elementJacobian.resize(ne);
  mesh.shapeGradients.resize(ne);
  for (int e = 0; e < ne; ++e) {
    Tet& t = mesh.tets[e];
    for (int v : t)
      if (v < 0 || v >= mesh.nodeCount()) throw InvalidInput("tet node index out of range", e);
    auto edgeMatrix = [&]() {
      Mat3 Dm;
      for (int k = 0; k < 3; ++k) Dm.col(k) = mesh.nodes[t[k + 1]] - mesh.nodes[t[0]];
      return Dm;
    };
    Mat3 Dm = edgeMatrix();
    double det = Dm.determinant();
    if (det < 0.0) {
      std::swap(t[2], t[3]);
      Dm = edgeMatrix();
      det = Dm.determinant();
    }
    const double scale = std::pow(Dm.colwise().norm().maxCoeff(), 3);
    if (!(det > 1e-12 * scale)) throw InvalidInput("degenerate tetrahedron", e);
    const Mat3 inv = Dm.inverse();
    mesh.elementJacobian[e] = Dm;
    mesh.elementVolume[e] = det / 6.0;
    ShapeGrad g;
    for (int k = 0; k < 3; ++k) g.col(k + 1) = inv.row(k).transpose();
    g.col(0) = -(g.col(1) + g.col(2) + g.col(3));
    mesh.shapeGradients[e] = g;
  }
}

// Elements whose closed voxel contains p, ascending; every element when the mesh has no grid.
std::vector<int> candidateElements(const VolumeMesh& mesh, const Vec3& p) {
  std::vector<int> out;
  if (mesh.voxels.empty()) {
    out.resize(mesh.elementCount());
    for (int e = 0; e < mesh.elementCount(); ++e) out[e] = e;
    return out;
  }
  std::array<std::vector<int>, 3> axisCells;
  for (int i = 0; i < 3; ++i) {
    const double u = p[i] / mesh.cellSize;
    const double r = std::round(u);
    if (std::abs(u - r) < 1e-9) axisCells[i] = {static_cast<int>(r) - 1, static_cast<int>(r)};
    else axisCells[i] = {static_cast<int>(std::floor(u))};
  }
  for (int x : axisCells[0])
    for (int y : axisCells[1])
      for (int z : axisCells[2]) {
        const long v = findKey(mesh.voxels, {x, y, z});
        if (v < 0) continue;
        for (int k = 0; k < 6; ++k) out.push_back(static_cast<int>(6 * v + k));
      }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> candidateElements(const VolumeMesh& mesh, const Vec3& a, const Vec3& b) {
  if (mesh.voxels.empty()) return candidateElements(mesh, a);
  std::set<int> out;
  for (const auto& cell : traverseSegment(a, b, mesh.cellSize)) {
    const long v = findKey(mesh.voxels, cell);
    if (v < 0) continue;
    for (int k = 0; k < 6; ++k) out.insert(static_cast<int>(6 * v + k));
  }
  for (int e : candidateElements(mesh, a)) out.insert(e);
  for (int e : candidateElements(mesh, b)) out.insert(e);
  return {out.begin(), out.end()};
}

constexpr double kBaryTol = 1e-10;

}  // namespace

Mat3 VolumeMesh::deformationGradient(int e, const VecX& x) const {
  Mat3 F = Mat3::Zero();
  for (int a = 0; a < 4; ++a) F += x.segment<3>(3 * tets[e][a]) * shapeGradients[e].col(a).transpose();
  return F;
}

Eigen::Matrix<double, 9, 12> VolumeMesh::diffOperator(int e) const { return deformationJacobian(shapeGradients[e]); }

Eigen::Vector4d VolumeMesh::barycentricCoordinates(int e, const Vec3& p) const {
  const Vec3 rel = p - nodes[tets[e][0]];
  Eigen::Vector4d l;
  for (int a = 1; a < 4; ++a) l[a] = shapeGradients[e].col(a).dot(rel);
  l[0] = 1.0 - l[1] - l[2] - l[3];
  return l;
}

std::array<int, 12> VolumeMesh::elementDofs(int e) const {
  std::array<int, 12> d;
  for (int a = 0; a < 4; ++a)
    for (int k = 0; k < 3; ++k) d[3 * a + k] = 3 * tets[e][a] + k;
  return d;
}

double VolumeMesh::totalVolume() const {
  double v = 0.0;
  for (double x : elementVolume) v += x;
  return v;
}

Vec3 VolumeMesh::elementCentroid(int e) const {
  Vec3 c = Vec3::Zero();
  for (int v : tets[e]) c += nodes[v];
  return 0.25 * c;
}

VolumeMesh VolumeMesh::fromTets(std::vector<Vec3> nodes, std::vector<Tet> tets) {
  VolumeMesh mesh;
  mesh.nodes = std::move(nodes);
  mesh.tets = std::move(tets);
  computeGeometry(mesh);
  mesh.lumpedMass = VecX::Zero(mesh.nodeCount());
  return mesh;
}

std::vector<VoxelKey> traverseSegment(const Vec3& a, const Vec3& b, double cellSize) {
  const Vec3 u0 = a / cellSize;
  const Vec3 d = (b - a) / cellSize;
  VoxelKey cur{static_cast<int>(std::floor(u0[0])), static_cast<int>(std::floor(u0[1])),
               static_cast<int>(std::floor(u0[2]))};
  int step[3];
  double tMax[3];
  double tDelta[3];
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    step[i] = d[i] > 0.0 ? 1 : (d[i] < 0.0 ? -1 : 0);
    if (step[i] > 0) tMax[i] = (cur[i] + 1 - u0[i]) / d[i];
    else if (step[i] < 0) tMax[i] = (u0[i] - cur[i]) / -d[i];
    else tMax[i] = inf;
    tDelta[i] = step[i] != 0 ? 1.0 / std::abs(d[i]) : inf;
  }
  std::set<VoxelKey> out{cur};
  constexpr double eps = 1e-12;
  while (true) {
    const double t = std::min({tMax[0], tMax[1], tMax[2]});
    if (t >= 1.0 - eps) break;
    int tied[3];
    int nt = 0;
    for (int i = 0; i < 3; ++i)
      if (tMax[i] <= t + eps) tied[nt++] = i;
    // Every cell sharing the crossed face, edge or corner.
    for (int mask = 1; mask < (1 << nt); ++mask) {
      VoxelKey k = cur;
      for (int j = 0; j < nt; ++j)
        if (mask & (1 << j)) k[tied[j]] += step[tied[j]];
      out.insert(k);
    }
    for (int j = 0; j < nt; ++j) {
      cur[tied[j]] += step[tied[j]];
      tMax[tied[j]] += tDelta[tied[j]];
    }
  }
  return {out.begin(), out.end()};
}

VolumeMesh voxelize(const YarnModel& yarn, double cellSize) {
  yarn.validate();
  const std::vector<VoxelKey> voxels = occupiedVoxels(yarn, cellSize);
  const std::vector<VoxelKey> corners = voxelCorners(voxels);

  VolumeMesh mesh;
  mesh.cellSize = cellSize;
  mesh.voxels = voxels;
  mesh.nodes.reserve(corners.size());
  for (const auto& c : corners) mesh.nodes.emplace_back(c[0] * cellSize, c[1] * cellSize, c[2] * cellSize);
  mesh.tets.reserve(6 * voxels.size());
  for (const auto& v : voxels) {
    for (const auto& order : kAxisOrders) {
      VoxelKey p = v;
      Tet t;
      t[0] = static_cast<int>(findKey(corners, p));
      for (int k = 0; k < 3; ++k) {
        p[order[k]] += 1;
        t[k + 1] = static_cast<int>(findKey(corners, p));
      }
      mesh.tets.push_back(t);
    }
  }
  computeGeometry(mesh);
  mesh.lumpedMass = VecX::Zero(mesh.nodeCount());
  embedYarn(mesh, yarn);
  return mesh;
}

double autoCellSize(const YarnModel& yarn, double nodeRatio) {
  yarn.validate();
  const auto segs = yarn.segments();
  if (segs.empty()) throw InvalidInput("yarn has no segments");
  const double target = nodeRatio * yarn.vertexCount();
  Vec3 lo = yarn.restVertices.front();
  Vec3 hi = lo;
  for (const auto& p : yarn.restVertices) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double minLen = std::numeric_limits<double>::infinity();
  for (const auto& s : segs) minLen = std::min(minLen, yarn.restLength(s));
  double logLo = std::log(0.25 * minLen);
  double logHi = std::log(std::max((hi - lo).norm(), minLen) * 2.0);
  double best = std::exp(logHi);
  double bestErr = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (logLo + logHi);
    const double h = std::exp(mid);
    double count = 0.0;
    bool valid = true;
    try {
      count = static_cast<double>(voxelCorners(occupiedVoxels(yarn, h)).size());
    } catch (const InvalidInput&) {
      valid = false;
    }
    if (valid && std::abs(count - target) < bestErr) {
      bestErr = std::abs(count - target);
      best = h;
    }
    // Too many nodes (or a disconnected grid) means the cells are too small.
    if (!valid || count > target) logLo = mid;
    else logHi = mid;
  }
  return best;
}

void embedYarn(VolumeMesh& mesh, const YarnModel& yarn) {
  const int nv = yarn.vertexCount();
  mesh.hostElement.assign(nv, -1);
  mesh.barycentric.assign(nv, Eigen::Vector4d::Zero());
  std::vector<Triplet> trips;
  trips.reserve(4 * nv);
  for (int j = 0; j < nv; ++j) {
    const Vec3& p = yarn.restVertices[j];
    for (int e : candidateElements(mesh, p)) {
      Eigen::Vector4d l = mesh.barycentricCoordinates(e, p);
      if (l.minCoeff() < -kBaryTol) continue;
      l = l.cwiseMax(0.0).cwiseMin(1.0);
      l /= l.sum();
      mesh.hostElement[j] = e;
      mesh.barycentric[j] = l;
      break;
    }
    if (mesh.hostElement[j] < 0) throw InvalidInput("yarn vertex outside all tets", j);
    for (int a = 0; a < 4; ++a) trips.emplace_back(j, mesh.tets[mesh.hostElement[j]][a], mesh.barycentric[j][a]);
  }
  mesh.interpolation.resize(nv, mesh.nodeCount());
  mesh.interpolation.setFromTriplets(trips.begin(), trips.end());

  mesh.pieces.clear();
  const auto segs = yarn.segments();
  for (size_t s = 0; s < segs.size(); ++s) {
    for (const auto& iv : clipSegment(mesh, yarn.restVertices[segs[s].a], yarn.restVertices[segs[s].b]))
      mesh.pieces.push_back({static_cast<int>(s), iv.element, iv.t0, iv.t1});
  }
}

std::vector<ElementInterval> clipSegment(const VolumeMesh& mesh, const Vec3& a, const Vec3& b) {
  const std::vector<int> cands = candidateElements(mesh, a, b);
  if ((b - a).squaredNorm() == 0.0) {
    for (int e : cands)
      if (mesh.barycentricCoordinates(e, a).minCoeff() >= -kBaryTol) return {{e, 0.0, 0.0}};
    throw InvalidInput("point outside the mesh");
  }
  struct Range {
    int e;
    double lo, hi;
  };
  std::vector<Range> ranges;
  std::vector<double> breaks{0.0, 1.0};
  for (int e : cands) {
    const Eigen::Vector4d l0 = mesh.barycentricCoordinates(e, a);
    const Eigen::Vector4d l1 = mesh.barycentricCoordinates(e, b);
    double lo = 0.0;
    double hi = 1.0;
    for (int k = 0; k < 4; ++k) {
      const double slope = l1[k] - l0[k];
      if (std::abs(slope) < 1e-15) {
        if (l0[k] < -kBaryTol) hi = -1.0;
        continue;
      }
      const double t = (-kBaryTol - l0[k]) / slope;
      if (slope > 0.0) lo = std::max(lo, t);
      else hi = std::min(hi, t);
    }
    if (lo <= hi) {
      ranges.push_back({e, lo, hi});
      breaks.push_back(std::clamp(lo, 0.0, 1.0));
      breaks.push_back(std::clamp(hi, 0.0, 1.0));
    }
  }
  std::sort(breaks.begin(), breaks.end());
  std::vector<double> uniq;
  for (double t : breaks)
    if (uniq.empty() || t - uniq.back() > 1e-12) uniq.push_back(t);
  uniq.back() = 1.0;
  uniq.front() = 0.0;

  std::vector<ElementInterval> out;
  for (size_t k = 0; k + 1 < uniq.size(); ++k) {
    const double mid = 0.5 * (uniq[k] + uniq[k + 1]);
    int owner = -1;
    for (const auto& r : ranges) {
      if (mid >= r.lo && mid <= r.hi) {
        owner = r.e;
        break;
      }
    }
    if (owner < 0) throw InvalidInput("segment leaves the mesh");
    if (!out.empty() && out.back().element == owner) out.back().t1 = uniq[k + 1];
    else out.push_back({owner, uniq[k], uniq[k + 1]});
  }
  return out;
}

void distributeSegmentMass(const VolumeMesh& mesh, const Vec3& a, const Vec3& b, double mass, VecX& nodalMass) {
  for (const auto& iv : clipSegment(mesh, a, b)) {
    const Tet& t = mesh.tets[iv.element];
    if (iv.t1 == iv.t0) {
      const Eigen::Vector4d l = mesh.barycentricCoordinates(iv.element, a);
      for (int k = 0; k < 4; ++k) nodalMass[t[k]] += mass * l[k];
      continue;
    }
    const Eigen::Vector4d l0 = mesh.barycentricCoordinates(iv.element, a + iv.t0 * (b - a));
    const Eigen::Vector4d l1 = mesh.barycentricCoordinates(iv.element, a + iv.t1 * (b - a));
    const double m = mass * (iv.t1 - iv.t0);
    for (int k = 0; k < 4; ++k) nodalMass[t[k]] += 0.5 * m * (l0[k] + l1[k]);
  }
}

void lumpMass(VolumeMesh& mesh, const YarnModel& yarn) {
  if (mesh.hostElement.size() != yarn.restVertices.size()) throw InvalidInput("mesh has no yarn embedding");
  const auto segs = yarn.segments();
  mesh.lumpedMass = VecX::Zero(mesh.nodeCount());
  for (const auto& piece : mesh.pieces) {
    const Segment& s = segs[piece.segment];
    const Vec3& a = yarn.restVertices[s.a];
    const Vec3& b = yarn.restVertices[s.b];
    const double m = yarn.restLength(s) * yarn.linearDensity[s.polyline] * (piece.t1 - piece.t0);
    const Eigen::Vector4d l0 = mesh.barycentricCoordinates(piece.element, a + piece.t0 * (b - a));
    const Eigen::Vector4d l1 = mesh.barycentricCoordinates(piece.element, a + piece.t1 * (b - a));
    const Tet& t = mesh.tets[piece.element];
    for (int k = 0; k < 4; ++k) mesh.lumpedMass[t[k]] += 0.5 * m * (l0[k] + l1[k]);
  }
}

VolumeMesh buildVolumeMesh(const YarnModel& yarn, double cellSize) {
  VolumeMesh mesh = voxelize(yarn, cellSize);
  lumpMass(mesh, yarn);
  return mesh;
}

namespace {
constexpr int kFaces[4][3] = {{1, 2, 3}, {0, 3, 2}, {0, 1, 3}, {0, 2, 1}};
}

std::vector<std::pair<int, int>> elementAdjacency(const VolumeMesh& mesh) {
  std::map<std::array<int, 3>, std::vector<int>> faces;
  for (int e = 0; e < mesh.elementCount(); ++e) {
    for (const auto& f : kFaces) {
      std::array<int, 3> key{mesh.tets[e][f[0]], mesh.tets[e][f[1]], mesh.tets[e][f[2]]};
      std::sort(key.begin(), key.end());
      faces[key].push_back(e);
    }
  }
  std::vector<std::pair<int, int>> out;
  for (const auto& [key, els] : faces)
    for (size_t i = 0; i < els.size(); ++i)
      for (size_t j = i + 1; j < els.size(); ++j) out.emplace_back(std::min(els[i], els[j]), std::max(els[i], els[j]));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::array<int, 3>> boundaryFaces(const VolumeMesh& mesh) {
  std::map<std::array<int, 3>, std::pair<int, std::array<int, 3>>> faces;
  for (int e = 0; e < mesh.elementCount(); ++e) {
    for (const auto& f : kFaces) {
      std::array<int, 3> oriented{mesh.tets[e][f[0]], mesh.tets[e][f[1]], mesh.tets[e][f[2]]};
      std::array<int, 3> key = oriented;
      std::sort(key.begin(), key.end());
      auto& slot = faces[key];
      slot.first += 1;
      slot.second = oriented;
    }
  }
  std::vector<std::array<int, 3>> out;
  for (const auto& [key, v] : faces)
    if (v.first == 1) out.push_back(v.second);
  return out;
}

}  // namespace knitvh
