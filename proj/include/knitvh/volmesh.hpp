#pragma once

#include "knitvh/common.hpp"
#include "knitvh/material.hpp"
#include "knitvh/yarn.hpp"

#include <array>
#include <string>

namespace knitvh {

using VoxelKey = std::array<int, 3>;
using Tet = std::array<int, 4>;

/// The part of a yarn segment (parameter interval [t0, t1]) that lies inside one element.
struct EmbeddedPiece {
  int segment = 0;
  int element = 0;
  double t0 = 0.0;
  double t1 = 0.0;
};

/// Interval of a segment inside a single element.
struct ElementInterval {
  int element = 0;
  double t0 = 0.0;
  double t1 = 0.0;
};

/// Tetrahedral volume mesh enclosing a yarn model. Geometry is stored at the rest pose; the
/// embedding (host elements, barycentric weights, segment pieces) ties yarn vertices and segments
/// to elements.
struct VolumeMesh {
  std::vector<Vec3> nodes;
  std::vector<Tet> tets;
  std::vector<double> elementVolume;
  /// Rest edge matrix [x1-x0, x2-x0, x3-x0]: maps natural to material coordinates.
  std::vector<Mat3> elementJacobian;
  std::vector<ShapeGrad> shapeGradients;
  VecX lumpedMass;

  // Voxel grid the mesh was built from (empty for meshes built from explicit tets). Voxel v owns
  // elements 6v .. 6v+5.
  double cellSize = 0.0;
  std::vector<VoxelKey> voxels;

  // Yarn embedding.
  std::vector<int> hostElement;
  std::vector<Eigen::Vector4d> barycentric;
  /// Scalar interpolation map N (yarn vertices x mesh nodes); applied per coordinate.
  SpMat interpolation;
  std::vector<EmbeddedPiece> pieces;

  int nodeCount() const { return static_cast<int>(nodes.size()); }
  int elementCount() const { return static_cast<int>(tets.size()); }
  int dofCount() const { return 3 * nodeCount(); }
  VecX restPositions() const { return flatten(nodes); }

  /// Deformation gradient of element e for stacked node positions x.
  Mat3 deformationGradient(int e, const VecX& x) const;
  /// The 3x3x12 differential operator as the 9x12 map onto column-major vec(F).
  Eigen::Matrix<double, 9, 12> diffOperator(int e) const;
  Eigen::Vector4d barycentricCoordinates(int e, const Vec3& p) const;
  /// Stacked DOF indices of element e.
  std::array<int, 12> elementDofs(int e) const;
  double totalVolume() const;
  Vec3 elementCentroid(int e) const;

  /// Builds geometry for explicit nodes and tets; negatively oriented tets are reordered and a
  /// degenerate tet throws InvalidInput with its index.
  static VolumeMesh fromTets(std::vector<Vec3> nodes, std::vector<Tet> tets);
};

/// Voxel cells touched by segment a-b (closed cells: passing through an edge or a corner adds
/// every cell sharing it, so consecutive cells are face connected).
std::vector<VoxelKey> traverseSegment(const Vec3& a, const Vec3& b, double cellSize);

/// Voxelizes the rest yarn, keeps the largest face-connected component, splits every voxel into six
/// tetrahedra and embeds the yarn. Throws InvalidInput for cellSize <= 0, an empty yarn, or a yarn
/// segment outside the kept component.
VolumeMesh voxelize(const YarnModel& yarn, double cellSize);

/// Cell size whose mesh has about half as many nodes as the yarn has vertices.
double autoCellSize(const YarnModel& yarn, double nodeRatio = 0.5);

/// Locates yarn vertices and clips rest segments against elements (fills hostElement, barycentric,
/// interpolation, pieces). Ties go to the lowest element index.
void embedYarn(VolumeMesh& mesh, const YarnModel& yarn);

/// Parameter intervals of segment a-b inside mesh elements, partitioning [0, 1].
std::vector<ElementInterval> clipSegment(const VolumeMesh& mesh, const Vec3& a, const Vec3& b);

/// Adds the exact line integral of the shape functions times `mass` along a-b to nodalMass.
/// A zero-length segment deposits `mass` by barycentric weights at the point.
void distributeSegmentMass(const VolumeMesh& mesh, const Vec3& a, const Vec3& b, double mass,
                           VecX& nodalMass);

/// m_i = sum_j L_j rho_j int_0^1 N_i(x_j(t)) dt over the embedded pieces.
void lumpMass(VolumeMesh& mesh, const YarnModel& yarn);

/// voxelize + lumpMass.
VolumeMesh buildVolumeMesh(const YarnModel& yarn, double cellSize);

/// Face-adjacent element pairs (i < j), sorted.
std::vector<std::pair<int, int>> elementAdjacency(const VolumeMesh& mesh);

/// Boundary triangles (faces used by exactly one tet), outward oriented.
std::vector<std::array<int, 3>> boundaryFaces(const VolumeMesh& mesh);

}  // namespace knitvh
