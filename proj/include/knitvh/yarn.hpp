#pragma once

#include "knitvh/common.hpp"

#include <array>
#include <utility>

namespace knitvh {

struct Segment {
  int a = 0;
  int b = 0;
  int polyline = 0;
};

/// Two rest-frame material normals of a segment. {d, n1, n2} is right handed.
struct SegmentFrame {
  Vec3 n1 = Vec3::UnitY();
  Vec3 n2 = Vec3::UnitZ();
};

/// Polyline yarn model: rest and deformed vertices, polylines as vertex-index runs, per-segment rest
/// normals and a constant linear density (kg/m) per polyline. `links` are optional vertex pairs held
/// together by stitch springs in the yarn simulator (they carry no mass and are not segments).
struct YarnModel {
  std::vector<Vec3> restVertices;
  std::vector<Vec3> deformedVertices;
  std::vector<std::vector<int>> polylines;
  std::vector<SegmentFrame> segmentNormals;
  std::vector<double> linearDensity;
  std::vector<std::pair<int, int>> links;

  int vertexCount() const { return static_cast<int>(restVertices.size()); }
  /// Segments in polyline order; segment s of the model is segments()[s].
  std::vector<Segment> segments() const;
  double restLength(const Segment& s) const { return (restVertices[s.b] - restVertices[s.a]).norm(); }
  double totalMass() const;
  /// Lumped yarn vertex masses: half of every adjacent segment's mass.
  VecX vertexMasses() const;

  /// Throws InvalidInput when the structural invariants do not hold.
  void validate() const;
};

/// Parallel-transports an arbitrary initial normal along each polyline. Throws InvalidInput with the
/// segment index on a zero-length rest segment.
YarnModel computeSegmentNormals(YarnModel model);

/// Minimal rotation taking unit vector `from` onto unit vector `to`. Antiparallel inputs rotate by pi
/// about a deterministic perpendicular axis.
Mat3 minimalRotation(const Vec3& from, const Vec3& to);

/// Rest direction and normals of a segment.
Mat3 restFrame(const YarnModel& model, const Segment& seg, int segment);

struct YarnSequence {
  std::vector<std::vector<Vec3>> frames;
  double dt = 1.0 / 150.0;
  /// Per frame, per vertex external force (N). May be empty (no force).
  std::vector<std::vector<Vec3>> externalForce;
  /// Pinned vertex indices (same set for every frame); targets per frame are the pinned entries of
  /// the frame itself.
  std::vector<int> pinnedVertices;

  int frameCount() const { return static_cast<int>(frames.size()); }
  /// Force of frame i; zero when the sequence carries none.
  std::vector<Vec3> forceAt(int i, int vertexCount) const;
  void validate(const YarnModel& model) const;
};

}  // namespace knitvh
