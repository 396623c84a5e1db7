#include "knitvh/fitting.hpp"

#include "knitvh/log.hpp"
#include "knitvh/pd_solver.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <cmath>
#include <random>

namespace knitvh {

FitSample makeSample(const ShapeFit& fit, const YarnSequence& seq, int frame, bool dynamic, double staticDt) {
  if (frame < 0 || frame >= seq.frameCount()) throw InvalidInput("sample frame out of range", frame);
  const VolumeMesh& mesh = fit.mesh();
  FitSample s;
  s.frame = frame;
  s.yarnPose = seq.frames[frame];
  s.targets = fit.targets(s.yarnPose, frame);
  s.shapeFit = fit.solve(s.targets, s.yarnPose);
  double dt = seq.dt;
  if (dynamic && frame >= 2) {
    s.inertia = estimateInertia(fit, seq, frame);
  } else {
    if (staticDt > 0.0) dt = staticDt;
    s.inertia = VecX::Zero(mesh.dofCount());
    if (!seq.externalForce.empty()) {
      const VecX f = distributeForce(mesh, fit.yarn(), seq.forceAt(frame, fit.yarn().vertexCount()));
      const VecX inv = inverseMass(mesh);
      for (int n = 0; n < mesh.nodeCount(); ++n) s.inertia.segment<3>(3 * n) = -dt * dt * inv[n] * f.segment<3>(3 * n);
    }
  }
  s.problem = EquilibriumProblem(mesh, dt, s.shapeFit - s.inertia);
  for (int v : seq.pinnedVertices) {
    if (v < 0 || v >= fit.yarn().vertexCount()) throw InvalidInput("pinned vertex out of range", v);
    for (int n : mesh.tets[mesh.hostElement[v]]) s.problem.pinnedNode[n] = 1;
  }
  return s;
}

SampleObjective::SampleObjective(const ShapeFit& fit, const FitSample& sample, FitOptions opt, FitStats* stats)
    : fit_(&fit), sample_(&sample), opt_(opt), stats_(stats) {
  free_ = sample.problem.freeDofs();
  Gfree_ = restrictMatrix(fit.hessian(), free_);
}

double SampleObjective::loss(const VecX& x) const { return fit_->objective(x, sample_->targets, sample_->yarnPose); }

VecX SampleObjective::lossGradientX(const VecX& x) const {
  return fit_->gradient(x, sample_->targets, sample_->yarnPose);
}

SampleObjective::Equilibrium SampleObjective::equilibrium(const MaterialField& gamma, const VecX* warm) const {
  const EquilibriumProblem& problem = sample_->problem;
  const VolumeMesh& mesh = fit_->mesh();
  VecX x0 = warm ? *warm : (lastX_.size() ? lastX_ : sample_->shapeFit);
  for (int n = 0; n < mesh.nodeCount(); ++n)
    if (problem.pinnedNode[n]) x0.segment<3>(3 * n) = sample_->shapeFit.segment<3>(3 * n);
  if (stats_) ++stats_->equilibriumSolves;

  PolishResult r = newtonPolish(problem, gamma, x0, opt_.newtonTol, opt_.newtonIterations);
  if (r.residual >= opt_.equilibriumTol && opt_.pdIterations > 0) {
    // Newton from the warm start failed; restart from a projective-dynamics solve.
    PdOptions pdo;
    pdo.iterations = opt_.pdIterations;
    PdSolver pd(mesh, gamma, problem.dt, problem.pinnedNode, pdo);
    const VecX xPd = pd.minimize(problem.target, x0);
    PolishResult r2 = newtonPolish(problem, gamma, xPd, opt_.newtonTol, opt_.newtonIterations);
    if (r2.residual < r.residual) r = std::move(r2);
  }
  Equilibrium out{r.x, r.residual, r.residual < opt_.equilibriumTol};
  if (out.converged) lastX_ = out.x;
  return out;
}

SpMat SampleObjective::freeJacobian(const VecX& x, const MaterialField& gamma) const {
  return restrictMatrix(sample_->problem.jacobian(gamma, x, false), free_);
}

SpMat SampleObjective::freeGammaJacobian(const VecX& x, const MaterialField& gamma) const {
  const SpMat C = forceGammaJacobian(fit_->mesh(), gamma, x);
  SpMat S(free_.size(), C.rows());
  std::vector<Triplet> trips;
  for (size_t k = 0; k < free_.size(); ++k) trips.emplace_back(k, free_[k], 1.0);
  S.setFromTriplets(trips.begin(), trips.end());
  return S * C;
}

SpMat SampleObjective::freeLossHessian() const { return Gfree_; }

namespace {

VecX gatherFree(const VecX& v, const std::vector<int>& free) {
  VecX out(free.size());
  for (size_t k = 0; k < free.size(); ++k) out[k] = v[free[k]];
  return out;
}

struct JacobianSolver {
  Eigen::SimplicialLDLT<SpMat> ldlt;
  explicit JacobianSolver(SpMat J) {
    ldlt.compute(J);
    if (ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0.0).all()) return;
    const double shift = 1e-8 * J.diagonal().cwiseAbs().maxCoeff();
    logWarning("equilibrium Jacobian is not positive definite; adding a diagonal shift");
    for (int i = 0; i < J.rows(); ++i) J.coeffRef(i, i) += shift;
    ldlt.compute(J);
    if (ldlt.info() != Eigen::Success) throw NumericalError("singular equilibrium Jacobian");
  }
};

}  // namespace

VecX SampleObjective::adjointGradient(const VecX& x, const MaterialField& gamma) const {
  const double residual = sample_->problem.residual(gamma, x).lpNorm<Eigen::Infinity>();
  if (stats_) {
    ++stats_->adjointEvaluations;
    stats_->worstAdjointResidual = std::max(stats_->worstAdjointResidual, residual);
  }
  if (!(residual < opt_.equilibriumTol)) {
    if (stats_) ++stats_->gateViolations;
    throw NumericalError("equilibrium residual above the gate: " + std::to_string(residual));
  }
  JacobianSolver J(freeJacobian(x, gamma));
  const VecX lambda = J.ldlt.solve(gatherFree(lossGradientX(x), free_));
  return -(freeGammaJacobian(x, gamma).transpose() * lambda);
}

double SampleObjective::damping(const VecX& x, const MaterialField& gamma, const std::vector<char>& fixed) const {
  JacobianSolver J(freeJacobian(x, gamma));
  SpMat C = freeGammaJacobian(x, gamma);
  const int ng = static_cast<int>(C.cols());
  std::vector<int> active;
  for (int j = 0; j < ng; ++j)
    if (fixed.empty() || !fixed[j]) active.push_back(j);
  if (active.empty()) return 0.0;
  const int na = static_cast<int>(active.size());
  double trace = 0.0;
  if (na <= opt_.denseDirectionLimit) {
    const MatX Z = J.ldlt.solve(MatX(C)(Eigen::all, active));
    trace = (Z.transpose() * (Gfree_ * Z)).trace();
  } else {
    // v^T P v = |Z v|_G^2 with Rademacher v.
    std::mt19937_64 rng(1);
    std::bernoulli_distribution coin(0.5);
    const int probes = std::max(opt_.traceProbes, 1);
    for (int p = 0; p < probes; ++p) {
      VecX v = VecX::Zero(ng);
      for (int j : active) v[j] = coin(rng) ? 1.0 : -1.0;
      const VecX z = J.ldlt.solve(C * v);
      trace += z.dot(Gfree_ * z) / probes;
    }
  }
  return opt_.kappaScale * trace / na;
}

VecX SampleObjective::kktDirection(const VecX& x, const MaterialField& gamma, const VecX& gradient, double kappa,
                                   const std::vector<char>& fixed) const {
  const SpMat J = freeJacobian(x, gamma);
  const SpMat C = freeGammaJacobian(x, gamma);
  const int nx = static_cast<int>(J.rows());
  const int ng = static_cast<int>(C.cols());
  std::vector<int> active;
  std::vector<int> col(ng, -1);
  for (int j = 0; j < ng; ++j)
    if (fixed.empty() || !fixed[j]) {
      col[j] = static_cast<int>(active.size());
      active.push_back(j);
    }
  const int na = static_cast<int>(active.size());
  // The blocks differ by many orders of magnitude; scale the three unknown blocks by (a, b, c) so
  // that kappa c^2, |C| b c and |J| a b are all of order one.
  auto maxAbs = [](const SpMat& A) { return A.nonZeros() ? A.coeffs().cwiseAbs().maxCoeff() : 0.0; };
  const double nJ = std::max(maxAbs(J), 1e-300), nC = std::max(maxAbs(C), 1e-300);
  const double sc = kappa > 0.0 ? 1.0 / std::sqrt(kappa) : 1.0;
  const double sb = 1.0 / (nC * sc);
  const double sa = 1.0 / (nJ * sb);
  std::vector<Triplet> trips;
  trips.reserve(Gfree_.nonZeros() + 2 * J.nonZeros() + 2 * C.nonZeros() + na);
  auto addBlock = [&](const SpMat& A, int r0, int c0, double s) {
    for (int k = 0; k < A.outerSize(); ++k)
      for (SpMat::InnerIterator it(A, k); it; ++it) trips.emplace_back(r0 + it.row(), c0 + it.col(), s * it.value());
  };
  addBlock(Gfree_, 0, 0, sa * sa);
  addBlock(J, 0, nx, -sa * sb);
  addBlock(J, nx, 0, -sa * sb);
  for (int k = 0; k < C.outerSize(); ++k) {
    if (col[k] < 0) continue;
    for (SpMat::InnerIterator it(C, k); it; ++it) {
      trips.emplace_back(nx + it.row(), 2 * nx + col[k], sb * sc * it.value());
      trips.emplace_back(2 * nx + col[k], nx + it.row(), sb * sc * it.value());
    }
  }
  for (int a = 0; a < na; ++a) trips.emplace_back(2 * nx + a, 2 * nx + a, sc * sc * kappa);
  SpMat A(2 * nx + na, 2 * nx + na);
  A.setFromTriplets(trips.begin(), trips.end());
  A.makeCompressed();
  VecX rhs = VecX::Zero(2 * nx + na);
  for (int a = 0; a < na; ++a) rhs[2 * nx + a] = -sc * gradient[active[a]];

  Eigen::SparseLU<SpMat> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw NumericalError("block system factorization failed");
  VecX sol = lu.solve(rhs);
  for (int refine = 0; refine < 2 && sol.allFinite(); ++refine) sol += lu.solve(VecX(rhs - A * sol));
  if (lu.info() != Eigen::Success || !sol.allFinite()) throw NumericalError("block system solve failed");
  VecX d = VecX::Zero(ng);
  for (int a = 0; a < na; ++a) d[active[a]] = sc * sol[2 * nx + a];
  return d;
}

VecX SampleObjective::gaussNewtonDirection(const VecX& x, const MaterialField& gamma, const VecX& gradient,
                                           const MatX& basis, const std::vector<char>& fixed,
                                           double dampingFactor) const {
  const int ng = 2 * gamma.elementCount();
  const bool reduced = basis.size() > 0;
  const int m = reduced ? static_cast<int>(basis.cols()) : ng;
  int active = m;
  if (!fixed.empty())
    for (char f : fixed) active -= f ? 1 : 0;
  const VecX g = reduced ? VecX(basis.transpose() * gradient) : gradient;

  if (reduced || active <= opt_.denseDirectionLimit) {
    JacobianSolver J(freeJacobian(x, gamma));
    const SpMat C = freeGammaJacobian(x, gamma);
    MatX Cq = reduced ? MatX(C * basis) : MatX(C);
    if (!fixed.empty())
      for (int j = 0; j < m; ++j)
        if (fixed[j]) Cq.col(j).setZero();
    const MatX Z = -J.ldlt.solve(Cq);
    MatX P = Z.transpose() * (Gfree_ * Z);
    const double kappa = dampingFactor * opt_.kappaScale * P.trace() / std::max(active, 1);
    for (int j = 0; j < m; ++j) P(j, j) += kappa;
    VecX rhs = -g;
    if (!fixed.empty())
      for (int j = 0; j < m; ++j)
        if (fixed[j]) rhs[j] = 0.0;
    Eigen::LDLT<MatX> ldlt(0.5 * (P + P.transpose()));
    VecX d = ldlt.solve(rhs);
    if (ldlt.info() != Eigen::Success || !d.allFinite()) return rhs;
    return d;
  }
  double kappa = dampingFactor * damping(x, gamma, fixed);
  for (int attempt = 0; attempt <= 4; ++attempt, kappa *= 10.0) {
    try {
      VecX d = kktDirection(x, gamma, gradient, kappa, fixed);
      if (d.dot(gradient) <= 0.0) return d;
    } catch (const NumericalError&) {
    }
    logWarning("block system indefinite; increasing damping");
  }
  logWarning("falling back to the gradient direction");
  VecX d = -gradient;
  if (!fixed.empty())
    for (int j = 0; j < ng; ++j)
      if (fixed[j]) d[j] = 0.0;
  return d;
}

bool clampCachedDirection(VecX& d, const SafeguardState& state) {
  bool any = false;
  for (Eigen::Index j = 0; j < d.size(); ++j) {
    const bool frozen = (!state.cached.empty() && state.cached[j] && d[j] < 0.0) ||
                        (!state.pivoted.empty() && state.pivoted[j]);
    if (frozen && d[j] != 0.0) {
      d[j] = 0.0;
      any = true;
    }
  }
  return any;
}

StepResult safeguardedUpdate(const MaterialField& gamma, const VecX& d, double step, double currentLoss,
                             int maxHalvings, SafeguardState& state, const TrialEvaluator& evaluate) {
  StepResult out;
  out.gamma = gamma;
  out.loss = currentLoss;
  if (d.size() != gamma.gamma.size()) throw InvalidInput("direction size differs from the material");
  if (d.lpNorm<Eigen::Infinity>() == 0.0) return out;
  const Eigen::Index n = d.size();
  if (state.cached.empty()) state.cached.assign(n, 0);
  if (state.pivoted.empty()) state.pivoted.assign(n, 0);
  double t = step;
  for (int h = 0; h <= maxHalvings; ++h, t *= 0.5) {
    MaterialField trial(gamma.gamma + t * d);
    std::vector<int> floored;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (state.pivoted[j]) {
        trial.gamma[j] = kMaterialFloor;
      } else if (!(trial.gamma[j] >= 0.0)) {
        trial.gamma[j] = kMaterialFloor;
        floored.push_back(static_cast<int>(j));
      }
    }
    const auto r = evaluate(trial);
    if (r && r->first < currentLoss) {
      for (int j : floored) state.cached[j] = 1;
      out.gamma = std::move(trial);
      out.loss = r->first;
      out.x = r->second;
      out.step = t;
      out.accepted = true;
      return out;
    }
  }
  return out;
}

SampleFitResult fitSample(const SampleObjective& obj, const MaterialField& gamma0, const FitOptions& opt,
                          const MatX& basis, const ConvergenceSink& sink, const std::string& stage, int sampleIndex,
                          const VecX* warm) {
  gamma0.validate();
  const bool reduced = basis.size() > 0;
  const Eigen::Index ng = gamma0.gamma.size();
  SampleFitResult res;
  res.gamma = gamma0;
  auto eq = obj.equilibrium(gamma0, warm);
  if (!eq.converged) throw NumericalError("initial equilibrium did not converge");
  res.x = eq.x;
  res.loss = res.initialLoss = obj.loss(eq.x);

  SafeguardState state;
  state.cached.assign(ng, 0);
  state.pivoted.assign(ng, 0);
  const TrialEvaluator evaluate = [&](const MaterialField& trial) -> std::optional<std::pair<double, VecX>> {
    const auto e = obj.equilibrium(trial, &res.x);
    if (!e.converged) return std::nullopt;
    return std::make_pair(obj.loss(e.x), e.x);
  };

  int accepted = 0;
  bool done = false;
  double lm = 1.0;
  std::vector<double> gnHistory;
  for (int phase = 0; phase < 2 && !done; ++phase) {
    const bool gn = phase == 1;
    const int iterations = gn ? opt.gnIterations : opt.gdIterations;
    if (gn) gnHistory.push_back(res.loss);
    for (int it = 0; it < iterations; ++it) {
      const VecX grad = obj.adjointGradient(res.x, res.gamma);
      const double gnorm = reduced ? (basis.transpose() * grad).lpNorm<Eigen::Infinity>() : grad.lpNorm<Eigen::Infinity>();
      if (gnorm == 0.0 || res.loss == 0.0) {
        done = true;
        break;
      }
      auto direction = [&](const std::vector<char>& fixed) -> VecX {
        if (gn) {
          const VecX dq = obj.gaussNewtonDirection(res.x, res.gamma, grad, basis, fixed, lm);
          return reduced ? VecX(basis * dq) : dq;
        }
        VecX d = reduced ? VecX(-(basis * (basis.transpose() * grad))) : VecX(-grad);
        const double dn = d.lpNorm<Eigen::Infinity>();
        if (dn > 0.0) d *= std::max(res.gamma.gamma.lpNorm<Eigen::Infinity>(), kMaterialFloor) / dn;
        return d;
      };
      StepResult step;
      bool descent = true;
      for (int retry = 0;; ++retry) {
        VecX d = direction(reduced ? std::vector<char>{} : state.pivoted);
        if (!reduced) {
          const VecX raw = d;
          const bool clamped = clampCachedDirection(d, state);
          if (clamped && d.dot(grad) >= 0.0) {
            // The clamped direction no longer descends: pivot the offending entries out.
            for (Eigen::Index j = 0; j < ng; ++j)
              if (state.cached[j] && raw[j] < 0.0) state.pivoted[j] = 1;
            d = direction(state.pivoted);
            clampCachedDirection(d, state);
          }
        }
        if (!(d.dot(grad) < 0.0)) {
          descent = false;
          break;
        }
        step = safeguardedUpdate(res.gamma, d, gn ? opt.gnStep : opt.gdStep, res.loss, opt.maxHalvings, state, evaluate);
        if (!gn) break;
        // Levenberg-Marquardt: trust the quadratic model more after a full step, less otherwise.
        if (step.accepted && step.step == opt.gnStep) lm = std::max(lm * opt.lmDecrease, opt.lmMin);
        else lm = std::min(lm * opt.lmIncrease, opt.lmMax);
        if (step.accepted || retry >= opt.lmRetries) break;
      }
      if (!descent) break;
      if (sink) sink({stage, sampleIndex, it, gn ? "gn" : "gd", step.accepted ? step.loss : res.loss, step.step, gnorm});
      if (!step.accepted) break;
      ++accepted;
      res.gamma = step.gamma;
      res.x = step.x;
      res.loss = step.loss;
      if (gn) {
        ++res.gnIterations;
        gnHistory.push_back(res.loss);
        const int k = static_cast<int>(gnHistory.size()) - 1;
        if (k >= opt.gnWindow) {
          const double before = gnHistory[k - opt.gnWindow];
          if (before - res.loss < opt.gnRelativeDecrease * before) break;
        }
      } else {
        ++res.gdIterations;
      }
    }
  }
  res.stalled = accepted == 0 && !done && res.loss > 0.0;
  for (Eigen::Index j = 0; j < ng; ++j)
    if (state.pivoted[j]) res.pivoted.push_back(static_cast<int>(j));
  return res;
}

double sequenceLoss(const std::vector<SampleObjective>& objectives, const MaterialField& gamma) {
  double total = 0.0;
  for (const auto& obj : objectives) {
    const auto eq = obj.equilibrium(gamma);
    if (!eq.converged) throw NumericalError("equilibrium did not converge while evaluating the loss");
    total += obj.loss(eq.x);
  }
  return total;
}

UniformSweep uniformSweep(const std::vector<SampleObjective>& objectives, int elementCount, int kMin, int kMax) {
  UniformSweep out;
  out.bestLoss = INFINITY;
  for (int k = kMin; k <= kMax; ++k) {
    const double g = std::pow(10.0, k);
    const MaterialField trial = MaterialField::uniform(elementCount, g, g);
    double loss = INFINITY;
    try {
      for (const auto& o : objectives) o.resetWarmStart();
      loss = sequenceLoss(objectives, trial);
    } catch (const NumericalError&) {
    }
    out.losses.emplace_back(g, loss);
    if (loss < out.bestLoss) {
      out.bestLoss = loss;
      out.best = trial;
    }
  }
  for (const auto& o : objectives) o.resetWarmStart();
  if (!std::isfinite(out.bestLoss)) throw NumericalError("no uniform material reaches equilibrium");
  return out;
}

SequenceFitResult fitSequence(const std::vector<SampleObjective>& objectives, const MaterialField& gamma0,
                              const FitOptions& opt, const MatX& basis, const ConvergenceSink& sink,
                              const std::string& stage) {
  if (objectives.empty()) throw InvalidInput("no samples to fit");
  SequenceFitResult out;
  MaterialField running = gamma0;
  double w = 0.0;
  for (size_t k = 0; k < objectives.size(); ++k) {
    const SampleObjective& obj = objectives[k];
    const SampleFitResult fit = fitSample(obj, running, opt, basis, sink, stage, static_cast<int>(k));
    if (fit.stalled) {
      ++out.stalledSamples;
      logWarning("sample " + std::to_string(k) + " stalled");
    }
    const double wk = elasticEnergy(obj.shapeFit().mesh(), running, obj.sample().shapeFit);
    if (w > 0.0 && w + wk > 0.0) running = MaterialField((w * running.gamma + wk * fit.gamma.gamma) / (w + wk));
    else running = fit.gamma;
    w = std::max(w, wk);
  }
  out.gamma = running;
  out.weight = w;
  for (const auto& obj : objectives) {
    const auto eq = obj.equilibrium(running);
    if (!eq.converged) throw NumericalError("equilibrium did not converge while evaluating the loss");
    out.sampleLosses.push_back(obj.loss(eq.x));
    out.totalLoss += out.sampleLosses.back();
  }
  return out;
}

}  // namespace knitvh
