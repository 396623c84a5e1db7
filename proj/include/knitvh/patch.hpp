#pragma once

#include "knitvh/common.hpp"
#include "knitvh/yarn.hpp"

#include <cstdint>

namespace knitvh {

/// Rows of sinusoidal yarn along x, stacked along y, odd rows shifted by half a stitch so loops of
/// neighbouring rows interleave. Consecutive stitches alternate front and back (z), giving a
/// 1x1-rib-like relief; rows are joined by stitch links at every loop top.
struct RibPatchOptions {
  int rows = 20;
  int stitches = 25;
  int verticesPerStitch = 10;
  double stitchWidth = 4e-3;
  double rowSpacing = 3e-3;
  double loopAmplitude = 2e-3;  // y undulation, above half the row spacing so rows overlap
  double depth = 0.8e-3;          // z relief
  double linearDensity = 3e-4;
  /// Uniform random perturbation of vertex positions (fraction of the stitch width).
  double jitter = 0.0;
  std::uint64_t seed = 1;
};
YarnModel ribPatch(const RibPatchOptions& opt);

/// Straight parallel strands along x on a strandsY x strandsZ grid.
struct BarOptions {
  int strandsY = 2;
  int strandsZ = 2;
  int verticesPerStrand = 21;
  double length = 0.1;
  double spacing = 5e-3;
  double linearDensity = 1e-2;
};
YarnModel yarnBar(const BarOptions& opt);

/// Vertices within `tolerance` of the minimum (or maximum) coordinate along `axis` at rest.
std::vector<int> extremeVertices(const YarnModel& model, int axis, bool maxSide, double tolerance);

/// Axis-aligned bounding box diagonal of a point set.
double boundingBoxDiagonal(const std::vector<Vec3>& pts);

}  // namespace knitvh
