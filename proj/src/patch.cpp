#include "knitvh/patch.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace knitvh {

YarnModel ribPatch(const RibPatchOptions& opt) {
  if (opt.rows < 1 || opt.stitches < 1 || opt.verticesPerStitch < 4) throw InvalidInput("patch too small");
  YarnModel m;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const int perRow = opt.stitches * opt.verticesPerStitch + 1;
  for (int r = 0; r < opt.rows; ++r) {
    std::vector<int> run;
    for (int k = 0; k < perRow; ++k) {
      const double t = static_cast<double>(k) / opt.verticesPerStitch;
      const double u = t + 0.5 * (r % 2);  // odd rows shifted by half a stitch
      Vec3 p(t * opt.stitchWidth, r * opt.rowSpacing + opt.loopAmplitude * std::sin(2.0 * std::numbers::pi * u),
             opt.depth * std::cos(std::numbers::pi * u));
      if (opt.jitter > 0.0) p += opt.jitter * opt.stitchWidth * Vec3(unit(rng), unit(rng), unit(rng));
      run.push_back(static_cast<int>(m.restVertices.size()));
      m.restVertices.push_back(p);
    }
    m.polylines.push_back(std::move(run));
    m.linearDensity.push_back(opt.linearDensity);
  }
  // Each loop top of row r is held by the loop bottom of row r + 1 above it.
  for (int r = 0; r + 1 < opt.rows; ++r)
    for (int s = 0; s < opt.stitches; ++s) {
      const int k = s * opt.verticesPerStitch + (r % 2 ? 3 : 1) * opt.verticesPerStitch / 4;
      m.links.emplace_back(m.polylines[r][k], m.polylines[r + 1][k]);
    }
  m.deformedVertices = m.restVertices;
  return computeSegmentNormals(std::move(m));
}

YarnModel yarnBar(const BarOptions& opt) {
  if (opt.strandsY < 1 || opt.strandsZ < 1 || opt.verticesPerStrand < 2) throw InvalidInput("bar too small");
  YarnModel m;
  for (int a = 0; a < opt.strandsY; ++a)
    for (int b = 0; b < opt.strandsZ; ++b) {
      std::vector<int> run;
      for (int k = 0; k < opt.verticesPerStrand; ++k) {
        run.push_back(static_cast<int>(m.restVertices.size()));
        m.restVertices.emplace_back(opt.length * k / (opt.verticesPerStrand - 1), a * opt.spacing, b * opt.spacing);
      }
      m.polylines.push_back(std::move(run));
      m.linearDensity.push_back(opt.linearDensity);
    }
  m.deformedVertices = m.restVertices;
  return computeSegmentNormals(std::move(m));
}

std::vector<int> extremeVertices(const YarnModel& model, int axis, bool maxSide, double tolerance) {
  if (axis < 0 || axis > 2) throw InvalidInput("axis must be 0, 1 or 2", axis);
  double lo = INFINITY;
  double hi = -INFINITY;
  for (const auto& p : model.restVertices) {
    lo = std::min(lo, p[axis]);
    hi = std::max(hi, p[axis]);
  }
  std::vector<int> out;
  for (int i = 0; i < model.vertexCount(); ++i) {
    const double c = model.restVertices[i][axis];
    if (maxSide ? c >= hi - tolerance : c <= lo + tolerance) out.push_back(i);
  }
  return out;
}

double boundingBoxDiagonal(const std::vector<Vec3>& pts) {
  if (pts.empty()) return 0.0;
  Vec3 lo = pts.front();
  Vec3 hi = pts.front();
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

}  // namespace knitvh
