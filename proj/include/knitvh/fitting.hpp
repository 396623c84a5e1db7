#pragma once

#include "knitvh/common.hpp"
#include "knitvh/equilibrium.hpp"
#include "knitvh/material.hpp"
#include "knitvh/transfer.hpp"
#include "knitvh/volmesh.hpp"
#include "knitvh/yarn.hpp"

#include <functional>
#include <optional>
#include <string>

namespace knitvh {

struct FitOptions {
  int gdIterations = 12;
  int gnIterations = 30;
  double gdStep = 0.01;
  double gnStep = 1.0;
  int maxHalvings = 8;
  /// Gauss-Newton stops when the loss drops by less than this fraction over `gnWindow` iterations.
  double gnRelativeDecrease = 1e-4;
  int gnWindow = 3;
  /// Residual gate for adjoint evaluations and the tighter Newton target behind it.
  double equilibriumTol = 1e-5;
  double newtonTol = 1e-9;
  int newtonIterations = 50;
  int pdIterations = 5;
  /// Levenberg-Marquardt damping relative to trace(P) / dim(P), P the Gauss-Newton matrix.
  double kappaScale = 1e-1;
  /// Random probes estimating trace(P) when P is not formed.
  int traceProbes = 8;
  /// Levenberg-Marquardt adaptation: the damping factor shrinks by lmDecrease after a full step and
  /// grows by lmIncrease after a shortened or rejected one, within [lmMin, lmMax].
  double lmDecrease = 0.1;
  double lmIncrease = 10.0;
  double lmMin = 1e-3;
  double lmMax = 1e6;
  /// Rejected Gauss-Newton steps retried with more damping before the phase ends.
  int lmRetries = 4;
  /// Directions of at most this many unknowns are solved through explicit sensitivities.
  int denseDirectionLimit = 64;
  /// Time step of the equilibrium problem of static samples; 0 uses the sequence time step.
  double staticDt = 0.0;
};

/// One yarn pose turned into a quasi-static mesh problem.
struct FitSample {
  int frame = -1;
  std::vector<Vec3> yarnPose;
  TargetDeformation targets;
  VecX shapeFit;  // y2v of the pose
  VecX inertia;   // a, zero for static samples
  /// Equilibrium problem target y = shapeFit - inertia; pinned nodes sit at shapeFit.
  EquilibriumProblem problem;
  double weight = 0.0;
};

/// Builds the sample of frame i (inertia from frames i-2, i-1 when i >= 2 and `dynamic`, else the
/// static form with the external force only). Pinned yarn vertices pin their host tets' nodes.
FitSample makeSample(const ShapeFit& fit, const YarnSequence& seq, int frame, bool dynamic, double staticDt = 0.0);

/// Counters shared by every evaluation of a fitting run.
struct FitStats {
  long equilibriumSolves = 0;
  long adjointEvaluations = 0;
  long gateViolations = 0;
  double worstAdjointResidual = 0.0;
};

struct ConvergenceRecord {
  std::string stage;
  int sample = 0;
  int iteration = 0;
  std::string phase;
  double loss = 0.0;
  double step = 0.0;
  double gradientNorm = 0.0;
};

/// Loss, gradients and search directions of one sample.
class SampleObjective {
 public:
  SampleObjective(const ShapeFit& fit, const FitSample& sample, FitOptions opt, FitStats* stats = nullptr);

  const FitSample& sample() const { return *sample_; }
  const ShapeFit& shapeFit() const { return *fit_; }

  /// eps(x): the shape-fitting objective of the sample's pose.
  double loss(const VecX& x) const;
  VecX lossGradientX(const VecX& x) const;

  struct Equilibrium {
    VecX x;
    double residual = 0.0;
    bool converged = false;
  };
  /// PD warm-up from `warm` (or the shape fit) followed by Newton polish.
  Equilibrium equilibrium(const MaterialField& gamma, const VecX* warm = nullptr) const;

  /// d eps / d gamma at an equilibrium x. Throws NumericalError when x fails the residual gate.
  VecX adjointGradient(const VecX& x, const MaterialField& gamma) const;

  /// Gauss-Newton direction in the span of `basis` (identity when empty): solves
  /// (Z^T G Z + kappa I) d = -grad with Z = dx/dq and kappa = dampingFactor * damping(). Entries
  /// flagged in `fixed` stay zero. Large problems use the sparse block system with two adjoint
  /// vectors.
  VecX gaussNewtonDirection(const VecX& x, const MaterialField& gamma, const VecX& gradient,
                            const MatX& basis = {}, const std::vector<char>& fixed = {},
                            double dampingFactor = 1.0) const;

  /// The block system [[G, -J^T, 0], [-J, 0, C], [0, C^T, kappa I]] [mu; nu; d] = [0; 0; -grad].
  VecX kktDirection(const VecX& x, const MaterialField& gamma, const VecX& gradient, double kappa,
                    const std::vector<char>& fixed = {}) const;

  /// Forgets the cached equilibrium so the next solve starts from the shape fit.
  void resetWarmStart() const { lastX_.resize(0); }

  /// kappaScale * trace(P) / (active entries), with P = Z^T G Z on the entries not in `fixed`.
  /// Exact for small problems, a deterministic Hutchinson estimate otherwise.
  double damping(const VecX& x, const MaterialField& gamma, const std::vector<char>& fixed = {}) const;
  /// dg/dx (exact) on free DOFs and dg/dgamma on free rows.
  SpMat freeJacobian(const VecX& x, const MaterialField& gamma) const;
  SpMat freeGammaJacobian(const VecX& x, const MaterialField& gamma) const;
  SpMat freeLossHessian() const;

 private:
  const ShapeFit* fit_;
  const FitSample* sample_;
  FitOptions opt_;
  FitStats* stats_;
  std::vector<int> free_;
  SpMat Gfree_;
  mutable VecX lastX_;
};

struct SampleFitResult {
  MaterialField gamma;
  VecX x;
  double initialLoss = 0.0;
  double loss = 0.0;
  int gdIterations = 0;
  int gnIterations = 0;
  bool stalled = false;
  std::vector<int> pivoted;
};

using ConvergenceSink = std::function<void(const ConvergenceRecord&)>;

/// `gdIterations` gradient-descent then up to `gnIterations` Gauss-Newton iterations with
/// safeguarded steps. With a basis, updates are basis * dq floored at the material floor.
SampleFitResult fitSample(const SampleObjective& obj, const MaterialField& gamma0, const FitOptions& opt,
                          const MatX& basis = {}, const ConvergenceSink& sink = {}, const std::string& stage = "full",
                          int sampleIndex = 0, const VecX* warm = nullptr);

struct SafeguardState {
  std::vector<char> cached;   // entries floored by an earlier step
  std::vector<char> pivoted;  // entries removed from the Gauss-Newton system
};

struct StepResult {
  MaterialField gamma;
  VecX x;
  double loss = 0.0;
  double step = 0.0;
  bool accepted = false;
};

/// Line search along d from gamma with halving; negative trial entries are floored and cached.
/// `evaluate` returns the loss and equilibrium of a trial material (nullopt when unusable).
using TrialEvaluator = std::function<std::optional<std::pair<double, VecX>>(const MaterialField&)>;
StepResult safeguardedUpdate(const MaterialField& gamma, const VecX& d, double step, double currentLoss,
                             int maxHalvings, SafeguardState& state, const TrialEvaluator& evaluate);

/// Clamps direction entries that would lower cached entries; returns true if any was clamped.
bool clampCachedDirection(VecX& d, const SafeguardState& state);

struct SequenceFitResult {
  MaterialField gamma;
  double totalLoss = 0.0;
  std::vector<double> sampleLosses;
  int stalledSamples = 0;
  double weight = 0.0;
};

/// Single pass over samples; gamma <- (w gamma + w_k gamma_k) / (w + w_k) with w_k the elastic
/// energy of sample k's shape fit under the running material and w the running maximum.
SequenceFitResult fitSequence(const std::vector<SampleObjective>& objectives, const MaterialField& gamma0,
                              const FitOptions& opt, const MatX& basis = {}, const ConvergenceSink& sink = {},
                              const std::string& stage = "full");

/// Equilibrium loss summed over samples.
double sequenceLoss(const std::vector<SampleObjective>& objectives, const MaterialField& gamma);

struct UniformSweep {
  MaterialField best;
  double bestLoss = 0.0;
  std::vector<std::pair<double, double>> losses;  // (gamma, loss), loss infinite when unusable
};

/// Sequence loss of gammaS = gammaV = 10^k for k in [kMin, kMax], each from fresh warm starts.
/// Throws NumericalError when no candidate reaches equilibrium.
UniformSweep uniformSweep(const std::vector<SampleObjective>& objectives, int elementCount, int kMin = -1,
                          int kMax = 7);

/// Combinatorial Laplacian of the face-adjacency graph of elements.
SpMat elementLaplacian(const VolumeMesh& mesh);

/// The r lowest Laplacian eigenvectors (orthonormal, first column constant and positive).
MatX harmonicBasis(const VolumeMesh& mesh, int r);

/// diag(H, H) for the stacked material vector.
MatX stackedBasis(const MatX& H);

struct HarmonicResult {
  MaterialField gamma;
  std::vector<int> ranks;          // stage ranks; 0 marks the full stage
  std::vector<double> stageLosses;  // total loss after each stage
  std::vector<int> stalledSamples;  // per stage
};

using StageSink = std::function<void(const HarmonicResult&)>;

/// Progressive fit in harmonic subspaces of increasing rank, then the full space. A stage whose
/// total loss exceeds the previous one keeps the previous material. Every stage starts its
/// equilibria from the shape fits, so passing the result of finished stages as `resume` continues
/// the run exactly; `onStage` sees the result after each stage.
HarmonicResult harmonicFit(const VolumeMesh& mesh, const std::vector<SampleObjective>& objectives,
                           const MaterialField& gamma0, const FitOptions& opt, const std::vector<int>& ranks = {1, 10, 30},
                           bool fullStage = true, const ConvergenceSink& sink = {}, const HarmonicResult* resume = nullptr,
                           const StageSink& onStage = {});

}  // namespace knitvh
