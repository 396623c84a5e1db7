#pragma once

#include "knitvh/common.hpp"
#include "knitvh/pd_solver.hpp"
#include "knitvh/yarn.hpp"

#include <functional>

namespace knitvh {

struct YarnSimOptions {
  /// Spring weights: stretch uses ks / L, bending (vertices i-1, i+1) uses kb / L.
  double stretchStiffness = 1.0;
  double bendStiffness = 0.01;
  double linkStiffness = 1.0;
  /// Vertex-pair penalty below `contactRadius` (0 disables contact).
  double contactRadius = 0.0;
  double contactStiffness = 1.0;
  double colliderStiffness = 1e4;  // multiple of vertex mass / dt^2
  int iterations = 20;
  /// Stop the local/global loop early once no vertex moves more than this (m); 0 runs all iterations.
  double tolerance = 0.0;
  /// Velocity kept after each step (1 = undamped).
  double velocityRetention = 1.0;
  Vec3 gravity = Vec3::Zero();
  std::vector<Collider> colliders;
};

/// Pinned vertices follow `path(k, s)` with the ramp parameter s = min(step / rampSteps, 1); an empty
/// path keeps them at their rest positions.
struct PinMotion {
  std::vector<int> vertices;
  std::function<Vec3(size_t k, double s)> path;
  int rampSteps = 1;

  Vec3 target(const YarnModel& model, size_t k, int step) const;
};

/// Receives every frame (index, positions) as soon as it is computed.
using FrameCallback = std::function<void(int, const std::vector<Vec3>&)>;

/// Spring energy of the yarn at positions x (no inertia, no gravity).
double yarnElasticEnergy(const YarnModel& model, const std::vector<Vec3>& x, const YarnSimOptions& opt);

/// Implicit-Euler PD of the spring model. Frame 0 is the initial (deformed) pose; `steps` more frames
/// follow. `forces` is a constant per-vertex external force (may be empty). Throws DivergenceError
/// with the frame index on NaN or a displacement above 10 mean rest segment lengths in one step.
YarnSequence simulateYarn(const YarnModel& model, int steps, double dt, const std::vector<Vec3>& forces,
                          const PinMotion& pins, const YarnSimOptions& opt, const FrameCallback& onFrame = {});

}  // namespace knitvh
