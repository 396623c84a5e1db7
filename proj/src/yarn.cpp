#include "knitvh/yarn.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <sstream>

namespace knitvh {

std::vector<Vec3> unflatten(const VecX& x) {
  std::vector<Vec3> pts(x.size() / 3);
  for (size_t i = 0; i < pts.size(); ++i) pts[i] = x.segment<3>(3 * i);
  return pts;
}

std::vector<Segment> YarnModel::segments() const {
  std::vector<Segment> out;
  for (size_t p = 0; p < polylines.size(); ++p) {
    const auto& run = polylines[p];
    for (size_t k = 1; k < run.size(); ++k) out.push_back({run[k - 1], run[k], static_cast<int>(p)});
  }
  return out;
}

double YarnModel::totalMass() const {
  double m = 0.0;
  for (const auto& s : segments()) m += restLength(s) * linearDensity[s.polyline];
  return m;
}

VecX YarnModel::vertexMasses() const {
  VecX m = VecX::Zero(vertexCount());
  for (const auto& s : segments()) {
    const double half = 0.5 * restLength(s) * linearDensity[s.polyline];
    m[s.a] += half;
    m[s.b] += half;
  }
  return m;
}

void YarnModel::validate() const {
  const int n = vertexCount();
  if (deformedVertices.size() != restVertices.size())
    throw InvalidInput("rest and deformed vertex counts differ");
  if (linearDensity.size() != polylines.size())
    throw InvalidInput("one linear density per polyline is required");
  for (size_t p = 0; p < polylines.size(); ++p) {
    if (polylines[p].size() < 2) throw InvalidInput("polyline with fewer than two vertices", static_cast<long>(p));
    for (int v : polylines[p])
      if (v < 0 || v >= n) throw InvalidInput("polyline vertex index out of range", static_cast<long>(p));
    if (!(linearDensity[p] > 0.0)) throw InvalidInput("linear density must be positive", static_cast<long>(p));
  }
  const auto segs = segments();
  for (size_t s = 0; s < segs.size(); ++s)
    if (!(restLength(segs[s]) > 0.0)) throw InvalidInput("zero-length rest segment", static_cast<long>(s));
  if (!segmentNormals.empty() && segmentNormals.size() != segs.size())
    throw InvalidInput("segment normal count does not match segment count");
  for (const auto& [i, j] : links)
    if (i < 0 || j < 0 || i >= n || j >= n || i == j) throw InvalidInput("bad stitch link");
}

Mat3 minimalRotation(const Vec3& from, const Vec3& to) {
  const double c = from.dot(to);
  if (c < -1.0 + 1e-12) {
    // Rotate by pi about the axis perpendicular to `from` that is closest to the least aligned
    // coordinate axis.
    Eigen::Index k;
    from.cwiseAbs().minCoeff(&k);
    Vec3 axis = Vec3::Unit(k) - from[k] * from;
    axis.normalize();
    return 2.0 * axis * axis.transpose() - Mat3::Identity();
  }
  const Vec3 v = from.cross(to);
  Mat3 vx;
  vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return Mat3::Identity() + vx + vx * vx / (1.0 + c);
}

namespace {

SegmentFrame orthonormalize(const Vec3& d, const Vec3& n1Guess) {
  SegmentFrame f;
  f.n1 = (n1Guess - n1Guess.dot(d) * d).normalized();
  f.n2 = d.cross(f.n1);
  return f;
}

}  // namespace

YarnModel computeSegmentNormals(YarnModel model) {
  const auto segs = model.segments();
  model.segmentNormals.assign(segs.size(), {});
  size_t s = 0;
  for (const auto& run : model.polylines) {
    Vec3 prevDir = Vec3::Zero();
    Vec3 n1 = Vec3::Zero();
    for (size_t k = 1; k < run.size(); ++k, ++s) {
      const Vec3 e = model.restVertices[run[k]] - model.restVertices[run[k - 1]];
      const double len = e.norm();
      if (!(len > 0.0)) throw InvalidInput("zero-length rest segment", static_cast<long>(s));
      const Vec3 d = e / len;
      if (k == 1) {
        Eigen::Index axis;
        d.cwiseAbs().minCoeff(&axis);
        n1 = Vec3::Unit(axis);
      } else {
        n1 = minimalRotation(prevDir, d) * n1;
      }
      model.segmentNormals[s] = orthonormalize(d, n1);
      n1 = model.segmentNormals[s].n1;
      prevDir = d;
    }
  }
  return model;
}

Mat3 restFrame(const YarnModel& model, const Segment& s, int segment) {
  Mat3 m;
  m.col(0) = model.restVertices[s.b] - model.restVertices[s.a];
  m.col(1) = model.segmentNormals[segment].n1;
  m.col(2) = model.segmentNormals[segment].n2;
  return m;
}

std::vector<Vec3> YarnSequence::forceAt(int i, int vertexCount) const {
  if (externalForce.empty()) return std::vector<Vec3>(vertexCount, Vec3::Zero());
  return externalForce.at(i);
}

void YarnSequence::validate(const YarnModel& model) const {
  if (!(dt > 0.0)) throw InvalidInput("sequence dt must be positive");
  for (size_t f = 0; f < frames.size(); ++f)
    if (static_cast<int>(frames[f].size()) != model.vertexCount())
      throw InvalidInput("frame vertex count differs from the yarn model", static_cast<long>(f));
  if (!externalForce.empty() && externalForce.size() != frames.size())
    throw InvalidInput("external force must be given for every frame");
}

}  // namespace knitvh
