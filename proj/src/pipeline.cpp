#include "knitvh/pipeline.hpp"

#include "knitvh/equilibrium.hpp"
#include "knitvh/io.hpp"
#include "knitvh/log.hpp"
#include "knitvh/transfer.hpp"
#include "knitvh/volmesh.hpp"

#include <Eigen/Geometry>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace knitvh {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------------------------
// Scenario

Scenario::Scenario(const ScenarioConfig& cfg, const YarnModel& model) : cfg_(cfg) {
  const std::string& k = cfg.kind;
  if (k != "rest" && k != "stretch" && k != "twist" && k != "hang" && k != "drape")
    throw InvalidInput("unknown scenario '" + k + "'");
  if (cfg.axis < 0 || cfg.axis > 2) throw InvalidInput("scenario axis must be 0, 1 or 2", cfg.axis);
  if (cfg.rampSteps < 1) throw InvalidInput("rampSteps must be positive");
  double lo = INFINITY;
  double hi = -INFINITY;
  for (const auto& p : model.restVertices) {
    lo = std::min(lo, p[cfg.axis]);
    hi = std::max(hi, p[cfg.axis]);
  }
  extent_ = hi - lo;
  auto add = [&](const std::vector<int>& vs, int g) {
    for (int v : vs) {
      pinned_.push_back(v);
      group_.push_back(g);
    }
  };
  if (k == "stretch" || k == "twist") {
    add(extremeVertices(model, cfg.axis, false, cfg.pinTolerance), 0);
    const auto moving = extremeVertices(model, cfg.axis, true, cfg.pinTolerance);
    add(moving, 1);
    for (int v : moving) center_ += model.restVertices[v];
    center_ /= static_cast<double>(moving.size());
  } else if (k == "hang") {
    add(extremeVertices(model, cfg.axis, true, cfg.pinTolerance), 0);
  }
}

Vec3 Scenario::apply(int group, double s, const Vec3& p) const {
  if (group != 1) return p;
  const Vec3 axis = Vec3::Unit(cfg_.axis);
  if (cfg_.kind == "stretch") return p + s * cfg_.amount * extent_ * axis;
  if (cfg_.kind == "twist") return center_ + Eigen::AngleAxisd(s * cfg_.amount, axis) * (p - center_);
  return p;
}

double Scenario::rampParameter(int step) const { return std::min(1.0, static_cast<double>(step) / cfg_.rampSteps); }

PinMotion Scenario::yarnMotion(const YarnModel& model) const {
  PinMotion m;
  m.vertices = pinned_;
  m.rampSteps = cfg_.rampSteps;
  m.path = [this, &model](size_t k, double s) { return apply(group_[k], s, model.restVertices[pinned_[k]]); };
  return m;
}

std::vector<int> meshPinGroups(const VolumeMesh& mesh, const Scenario& scenario) {
  std::vector<int> g(mesh.nodeCount(), -1);
  const auto& pins = scenario.pinnedVertices();
  for (size_t k = 0; k < pins.size(); ++k)
    for (int n : mesh.tets[mesh.hostElement[pins[k]]]) g[n] = std::max(g[n], scenario.groups()[k]);
  return g;
}

// ---------------------------------------------------------------------------------------------
// Config

namespace {

json vec(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput("expected a 3-vector, got " + j.dump());
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json scenarioJson(const ScenarioConfig& s) {
  return {{"kind", s.kind}, {"axis", s.axis}, {"amount", s.amount}, {"rampSteps", s.rampSteps},
          {"pinTolerance", s.pinTolerance}, {"gravity", vec(s.gravity)}};
}

ScenarioConfig scenarioFrom(const json& j, ScenarioConfig s = {}) {
  s.kind = j.value("kind", s.kind);
  s.axis = j.value("axis", s.axis);
  s.amount = j.value("amount", s.amount);
  s.rampSteps = j.value("rampSteps", s.rampSteps);
  s.pinTolerance = j.value("pinTolerance", s.pinTolerance);
  if (j.contains("gravity")) s.gravity = vec(j["gravity"]);
  return s;
}

template <class T>
void read(const json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

}  // namespace

json configToJson(const PipelineConfig& c) {
  json j;
  j["paths"] = {{"yarn", c.paths.yarn},           {"out", c.paths.out},           {"sequence", c.paths.sequence},
                {"material", c.paths.material},   {"reference", c.paths.reference}, {"simulation", c.paths.simulation}};
  j["seed"] = c.seed;
  j["asset"] = {{"kind", c.asset},
                {"rib",
                 {{"rows", c.rib.rows},
                  {"stitches", c.rib.stitches},
                  {"verticesPerStitch", c.rib.verticesPerStitch},
                  {"stitchWidth", c.rib.stitchWidth},
                  {"rowSpacing", c.rib.rowSpacing},
                  {"loopAmplitude", c.rib.loopAmplitude},
                  {"depth", c.rib.depth},
                  {"linearDensity", c.rib.linearDensity},
                  {"jitter", c.rib.jitter}}},
                {"bar",
                 {{"strandsY", c.bar.strandsY},
                  {"strandsZ", c.bar.strandsZ},
                  {"verticesPerStrand", c.bar.verticesPerStrand},
                  {"length", c.bar.length},
                  {"spacing", c.bar.spacing},
                  {"linearDensity", c.bar.linearDensity}}}};
  j["cellSize"] = c.cellSize > 0.0 ? json(c.cellSize) : json("auto");
  j["nodeRatio"] = c.nodeRatio;
  const auto& y = c.yarnSim;
  j["yarnSim"] = {{"dt", c.dt},
                  {"steps", c.steps},
                  {"stretchStiffness", y.stretchStiffness},
                  {"bendStiffness", y.bendStiffness},
                  {"linkStiffness", y.linkStiffness},
                  {"contactRadius", y.contactRadius},
                  {"contactStiffness", y.contactStiffness},
                  {"colliderStiffness", y.colliderStiffness},
                  {"iterations", y.iterations},
                  {"velocityRetention", y.velocityRetention}};
  j["scenario"] = scenarioJson(c.scenario);
  j["colliders"] = json::array();
  for (const auto& col : c.colliders) {
    if (col.kind == Collider::Kind::Plane)
      j["colliders"].push_back({{"type", "plane"}, {"point", vec(col.point)}, {"normal", vec(col.normal)}});
    else
      j["colliders"].push_back({{"type", "sphere"}, {"center", vec(col.point)}, {"radius", col.radius}});
  }
  const auto& f = c.fit;
  const auto& o = f.options;
  j["fit"] = {{"samples", f.samples},
              {"dynamic", f.dynamic},
              {"ranks", f.ranks},
              {"fullStage", f.fullStage},
              {"initialGamma", f.initialGamma ? json::array({f.initialGamma->first, f.initialGamma->second}) : json("auto")},
              {"lossCeiling", f.lossCeiling},
              {"resume", f.resume},
              {"gdIterations", o.gdIterations},
              {"gnIterations", o.gnIterations},
              {"gdStep", o.gdStep},
              {"gnStep", o.gnStep},
              {"maxHalvings", o.maxHalvings},
              {"gnRelativeDecrease", o.gnRelativeDecrease},
              {"gnWindow", o.gnWindow},
              {"equilibriumTol", o.equilibriumTol},
              {"newtonTol", o.newtonTol},
              {"newtonIterations", o.newtonIterations},
              {"pdIterations", o.pdIterations},
              {"kappaScale", o.kappaScale},
              {"traceProbes", o.traceProbes},
              {"lmDecrease", o.lmDecrease},
              {"lmIncrease", o.lmIncrease},
              {"lmMin", o.lmMin},
              {"lmMax", o.lmMax},
              {"lmRetries", o.lmRetries},
              {"denseDirectionLimit", o.denseDirectionLimit},
              {"staticDt", o.staticDt}};
  const auto& s = c.simulate;
  j["simulate"] = {{"dt", s.dt},
                   {"steps", s.steps},
                   {"iterations", s.pd.iterations},
                   {"global", s.pd.global == PdOptions::Global::Cms ? "cms" : "direct"},
                   {"domains", s.pd.domains},
                   {"modesPerDomain", s.pd.modesPerDomain},
                   {"jacobiSweeps", s.pd.jacobi.sweeps},
                   {"collisionStiffness", s.pd.collisionStiffness},
                   {"scenario", s.scenario ? scenarioJson(*s.scenario) : json(nullptr)}};
  return j;
}

PipelineConfig configFromJson(const json& j) {
  PipelineConfig c;
  try {
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      read(p, "yarn", c.paths.yarn);
      read(p, "out", c.paths.out);
      read(p, "sequence", c.paths.sequence);
      read(p, "material", c.paths.material);
      read(p, "reference", c.paths.reference);
      read(p, "simulation", c.paths.simulation);
    }
    read(j, "seed", c.seed);
    if (j.contains("asset")) {
      const auto& a = j["asset"];
      read(a, "kind", c.asset);
      if (a.contains("rib")) {
        const auto& r = a["rib"];
        read(r, "rows", c.rib.rows);
        read(r, "stitches", c.rib.stitches);
        read(r, "verticesPerStitch", c.rib.verticesPerStitch);
        read(r, "stitchWidth", c.rib.stitchWidth);
        read(r, "rowSpacing", c.rib.rowSpacing);
        read(r, "loopAmplitude", c.rib.loopAmplitude);
        read(r, "depth", c.rib.depth);
        read(r, "linearDensity", c.rib.linearDensity);
        read(r, "jitter", c.rib.jitter);
      }
      if (a.contains("bar")) {
        const auto& b = a["bar"];
        read(b, "strandsY", c.bar.strandsY);
        read(b, "strandsZ", c.bar.strandsZ);
        read(b, "verticesPerStrand", c.bar.verticesPerStrand);
        read(b, "length", c.bar.length);
        read(b, "spacing", c.bar.spacing);
        read(b, "linearDensity", c.bar.linearDensity);
      }
    }
    if (j.contains("cellSize") && j["cellSize"].is_number()) c.cellSize = j["cellSize"].get<double>();
    read(j, "nodeRatio", c.nodeRatio);
    if (j.contains("yarnSim")) {
      const auto& y = j["yarnSim"];
      read(y, "dt", c.dt);
      read(y, "steps", c.steps);
      read(y, "stretchStiffness", c.yarnSim.stretchStiffness);
      read(y, "bendStiffness", c.yarnSim.bendStiffness);
      read(y, "linkStiffness", c.yarnSim.linkStiffness);
      read(y, "contactRadius", c.yarnSim.contactRadius);
      read(y, "contactStiffness", c.yarnSim.contactStiffness);
      read(y, "colliderStiffness", c.yarnSim.colliderStiffness);
      read(y, "iterations", c.yarnSim.iterations);
      read(y, "velocityRetention", c.yarnSim.velocityRetention);
    }
    if (j.contains("scenario")) c.scenario = scenarioFrom(j["scenario"]);
    if (j.contains("colliders")) {
      for (const auto& col : j["colliders"]) {
        const std::string type = col.at("type").get<std::string>();
        if (type == "plane")
          c.colliders.push_back(Collider::plane(vec(col.at("point")), vec(col.at("normal"))));
        else if (type == "sphere")
          c.colliders.push_back(Collider::sphere(vec(col.at("center")), col.at("radius").get<double>()));
        else
          throw InvalidInput("unknown collider type '" + type + "'");
      }
    }
    if (j.contains("fit")) {
      const auto& f = j["fit"];
      auto& o = c.fit.options;
      read(f, "samples", c.fit.samples);
      read(f, "dynamic", c.fit.dynamic);
      read(f, "ranks", c.fit.ranks);
      read(f, "fullStage", c.fit.fullStage);
      if (f.contains("initialGamma") && f["initialGamma"].is_array()) {
        const auto g = f["initialGamma"].get<std::vector<double>>();
        if (g.size() != 2) throw InvalidInput("initialGamma needs two entries");
        c.fit.initialGamma = std::make_pair(g[0], g[1]);
      }
      read(f, "lossCeiling", c.fit.lossCeiling);
      read(f, "resume", c.fit.resume);
      read(f, "gdIterations", o.gdIterations);
      read(f, "gnIterations", o.gnIterations);
      read(f, "gdStep", o.gdStep);
      read(f, "gnStep", o.gnStep);
      read(f, "maxHalvings", o.maxHalvings);
      read(f, "gnRelativeDecrease", o.gnRelativeDecrease);
      read(f, "gnWindow", o.gnWindow);
      read(f, "equilibriumTol", o.equilibriumTol);
      read(f, "newtonTol", o.newtonTol);
      read(f, "newtonIterations", o.newtonIterations);
      read(f, "pdIterations", o.pdIterations);
      read(f, "kappaScale", o.kappaScale);
      read(f, "traceProbes", o.traceProbes);
      read(f, "lmDecrease", o.lmDecrease);
      read(f, "lmIncrease", o.lmIncrease);
      read(f, "lmMin", o.lmMin);
      read(f, "lmMax", o.lmMax);
      read(f, "lmRetries", o.lmRetries);
      read(f, "denseDirectionLimit", o.denseDirectionLimit);
      read(f, "staticDt", o.staticDt);
    }
    if (j.contains("simulate")) {
      const auto& s = j["simulate"];
      read(s, "dt", c.simulate.dt);
      read(s, "steps", c.simulate.steps);
      read(s, "iterations", c.simulate.pd.iterations);
      if (s.contains("global")) {
        const std::string g = s["global"].get<std::string>();
        if (g == "cms") c.simulate.pd.global = PdOptions::Global::Cms;
        else if (g == "direct") c.simulate.pd.global = PdOptions::Global::Direct;
        else throw InvalidInput("unknown global solver '" + g + "'");
      }
      read(s, "domains", c.simulate.pd.domains);
      read(s, "modesPerDomain", c.simulate.pd.modesPerDomain);
      read(s, "jacobiSweeps", c.simulate.pd.jacobi.sweeps);
      read(s, "collisionStiffness", c.simulate.pd.collisionStiffness);
      if (s.contains("scenario") && !s["scenario"].is_null()) c.simulate.scenario = scenarioFrom(s["scenario"], c.scenario);
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad config: ") + e.what());
  }
  c.rib.seed = c.seed;
  const auto& o = c.fit.options;
  if (!(c.dt > 0.0) || c.simulate.dt < 0.0 || o.staticDt < 0.0) throw InvalidInput("dt must be positive");
  if (c.steps < 0 || c.simulate.steps < 0) throw InvalidInput("step counts must be non-negative");
  if (!(o.equilibriumTol > 0.0) || !(o.newtonTol > 0.0) || !(o.gnRelativeDecrease > 0.0) || !(o.kappaScale > 0.0) ||
      !(o.gdStep > 0.0) || !(o.gnStep > 0.0) || !(c.fit.lossCeiling > 0.0))
    throw InvalidInput("tolerances and step sizes must be positive");
  if (!(o.lmMin > 0.0) || !(o.lmMax >= o.lmMin) || !(o.lmDecrease > 0.0 && o.lmDecrease <= 1.0) ||
      !(o.lmIncrease >= 1.0) || o.lmRetries < 0)
    throw InvalidInput("bad damping adaptation settings");
  if (c.cellSize < 0.0 || !(c.nodeRatio > 0.0)) throw InvalidInput("bad cell size");
  if (c.asset != "rib" && c.asset != "bar") throw InvalidInput("unknown asset '" + c.asset + "'");
  for (int r : c.fit.ranks)
    if (r < 1) throw InvalidInput("harmonic ranks must be positive", r);
  return c;
}

PipelineConfig loadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidInput("bad config " + path + ": " + e.what());
  }
  return configFromJson(j);
}

std::string configHash(const PipelineConfig& cfg) {
  json j = configToJson(cfg);
  j["fit"].erase("resume");
  const std::string s = j.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

YarnModel buildModel(const PipelineConfig& cfg) {
  if (!cfg.paths.yarn.empty()) return readYarn(cfg.paths.yarn);
  if (cfg.asset == "bar") return yarnBar(cfg.bar);
  return ribPatch(cfg.rib);
}

// ---------------------------------------------------------------------------------------------
// Commands

namespace {

using Clock = std::chrono::steady_clock;

double secondsSince(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Merges `section` into out/summary.json under `name`.
void writeSummary(const PipelineConfig& cfg, const std::string& name, json section) {
  const fs::path path = fs::path(cfg.paths.out) / "summary.json";
  json j = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      in >> j;
    } catch (const json::exception&) {
      j = json::object();
    }
  }
  section["configHash"] = configHash(cfg);
  j[name] = std::move(section);
  std::ofstream(path) << j.dump(2) << '\n';
}

void prepareOut(const PipelineConfig& cfg) {
  fs::create_directories(cfg.paths.out);
  json j = configToJson(cfg);
  j["configHash"] = configHash(cfg);
  std::ofstream(fs::path(cfg.paths.out) / "config.json") << j.dump(2) << '\n';
}

/// The model a sequence was generated from, falling back to the config's model.
YarnModel sequenceModel(const PipelineConfig& cfg) {
  const fs::path p = fs::path(cfg.sequenceDir()) / "model.yarn";
  return fs::exists(p) ? readYarn(p) : buildModel(cfg);
}

VolumeMesh meshFor(const PipelineConfig& cfg, const YarnModel& model) {
  const double h = cfg.cellSize > 0.0 ? cfg.cellSize : autoCellSize(model, cfg.nodeRatio);
  return buildVolumeMesh(model, h);
}

double axisLength(const std::vector<Vec3>& x, const std::vector<int>& pins, const std::vector<int>& groups, int axis) {
  double a = 0.0, b = 0.0;
  int na = 0, nb = 0;
  for (size_t k = 0; k < pins.size(); ++k) {
    if (groups[k] == 1) {
      b += x[pins[k]][axis];
      ++nb;
    } else {
      a += x[pins[k]][axis];
      ++na;
    }
  }
  return na && nb ? b / nb - a / na : 0.0;
}

}  // namespace

int cmdGenerate(const PipelineConfig& cfg) {
  const auto t0 = Clock::now();
  prepareOut(cfg);
  const std::string hash = configHash(cfg);
  const fs::path out = cfg.paths.out;
  const YarnModel model = buildModel(cfg);
  writeYarn(out / "model.yarn", model, nullptr, "config " + hash);
  const Scenario scenario(cfg.scenario, model);
  YarnSimOptions opt = cfg.yarnSim;
  opt.gravity = cfg.scenario.gravity;
  opt.colliders = cfg.colliders;

  YarnSequence meta;
  meta.dt = cfg.dt;
  meta.pinnedVertices = scenario.pinnedVertices();
  if (cfg.scenario.gravity.norm() > 0.0) {
    const VecX m = model.vertexMasses();
    std::vector<Vec3> f(model.vertexCount());
    for (int i = 0; i < model.vertexCount(); ++i) f[i] = m[i] * cfg.scenario.gravity;
    meta.externalForce.push_back(f);
  }
  int written = 0;
  std::vector<double> lengths;
  const FrameCallback onFrame = [&](int i, const std::vector<Vec3>& x) {
    writeYarn(out / frameFileName(i), model, &x, "config " + hash);
    lengths.push_back(axisLength(x, scenario.pinnedVertices(), scenario.groups(), cfg.scenario.axis));
    written = i + 1;
  };
  json summary;
  int code = 0;
  YarnSequence seq;
  try {
    seq = simulateYarn(model, cfg.steps, cfg.dt, {}, scenario.yarnMotion(model), opt, onFrame);
  } catch (const DivergenceError& e) {
    logWarning(std::string("yarn simulation diverged: ") + e.what());
    summary["divergedAtFrame"] = e.where;
    code = 3;
  }
  writeSequenceIndex(out, meta, written, hash);
  summary["frames"] = written;
  summary["yarnVertices"] = model.vertexCount();
  summary["pinned"] = scenario.pinnedVertices().size();
  summary["pinSpan"] = lengths;
  if (code == 0 && seq.frameCount() >= 2) {
    const auto& a = seq.frames[seq.frameCount() - 2];
    const auto& b = seq.frames.back();
    double v = 0.0;
    for (size_t i = 0; i < a.size(); ++i) v = std::max(v, (b[i] - a[i]).norm() / cfg.dt);
    summary["finalMaxSpeed"] = v;
    double gap = INFINITY;
    for (const auto& c : cfg.colliders)
      for (const auto& p : b) {
        const double d = c.kind == Collider::Kind::Plane ? (p - c.point).dot(c.normal.normalized())
                                                         : (p - c.point).norm() - c.radius;
        gap = std::min(gap, d);
      }
    if (!cfg.colliders.empty()) summary["finalColliderGap"] = gap;
  }
  summary["seconds"] = secondsSince(t0);
  writeSummary(cfg, "generate", summary);
  return code;
}

int cmdVoxelize(const PipelineConfig& cfg) {
  const auto t0 = Clock::now();
  prepareOut(cfg);
  const std::string hash = configHash(cfg);
  const YarnModel model = sequenceModel(cfg);
  const VolumeMesh mesh = meshFor(cfg, model);
  const fs::path out = cfg.paths.out;
  writeTetMesh(out / "mesh", mesh.nodes, mesh.tets, "config " + hash);
  writeObj(out / "mesh_surface.obj", mesh.nodes, boundaryFaces(mesh), "config " + hash);
  const double yarnMass = model.totalMass();
  writeSummary(cfg, "voxelize",
               {{"cellSize", mesh.cellSize},
                {"nodes", mesh.nodeCount()},
                {"elements", mesh.elementCount()},
                {"yarnVertices", model.vertexCount()},
                {"yarnMass", yarnMass},
                {"meshMass", mesh.lumpedMass.sum()},
                {"massRelativeError", std::abs(mesh.lumpedMass.sum() - yarnMass) / yarnMass},
                {"seconds", secondsSince(t0)}});
  return 0;
}

int cmdFit(const PipelineConfig& cfg) {
  const auto t0 = Clock::now();
  if (cfg.fit.samples.empty()) throw InvalidInput("empty sample list");
  prepareOut(cfg);
  const std::string hash = configHash(cfg);
  const fs::path out = cfg.paths.out;
  const YarnModel model = sequenceModel(cfg);
  const YarnSequence seq = readSequence(cfg.sequenceDir());
  seq.validate(model);
  std::vector<int> frames;
  for (int s : cfg.fit.samples) {
    const int f = s < 0 ? seq.frameCount() + s : s;
    if (f < 0 || f >= seq.frameCount()) throw InvalidInput("sample index outside the sequence", s);
    frames.push_back(f);
  }
  const VolumeMesh mesh = meshFor(cfg, model);
  const ShapeFit fit(mesh, model);
  std::vector<FitSample> samples;
  samples.reserve(frames.size());
  for (int f : frames) samples.push_back(makeSample(fit, seq, f, cfg.fit.dynamic, cfg.fit.options.staticDt));
  FitStats stats;
  std::vector<SampleObjective> objectives;
  for (const auto& s : samples) objectives.emplace_back(fit, s, cfg.fit.options, &stats);

  // Initial material: given, or the best uniform one on a log grid.
  MaterialField gamma0;
  json sweep = json::array();
  if (cfg.fit.initialGamma) {
    gamma0 = MaterialField::uniform(mesh.elementCount(), cfg.fit.initialGamma->first, cfg.fit.initialGamma->second);
  } else {
    const UniformSweep us = uniformSweep(objectives, mesh.elementCount());
    for (const auto& [g, loss] : us.losses)
      sweep.push_back({{"gamma", g}, {"loss", std::isfinite(loss) ? json(loss) : json(nullptr)}});
    gamma0 = us.best;
  }

  const fs::path checkpointJson = out / "checkpoint.json";
  const fs::path checkpointCsv = out / "checkpoint_material.csv";
  std::optional<HarmonicResult> resume;
  if (cfg.fit.resume && fs::exists(checkpointJson)) {
    json c;
    std::ifstream(checkpointJson) >> c;
    if (c.value("configHash", "") != hash) throw InvalidInput("checkpoint belongs to a different config");
    HarmonicResult r;
    r.gamma = readMaterialCsv(checkpointCsv);
    r.ranks = c.at("ranks").get<std::vector<int>>();
    r.stageLosses = c.at("stageLosses").get<std::vector<double>>();
    r.stalledSamples = c.at("stalledSamples").get<std::vector<int>>();
    resume = r;
  }

  std::ofstream conv(out / "convergence.csv", resume ? std::ios::app : std::ios::trunc);
  conv << std::setprecision(17);
  if (!resume) conv << "# config " << hash << "\nstage,sample,iteration,phase,loss,step,gradientNorm\n";
  const ConvergenceSink sink = [&](const ConvergenceRecord& r) {
    conv << r.stage << ',' << r.sample << ',' << r.iteration << ',' << r.phase << ',' << r.loss << ',' << r.step << ','
         << r.gradientNorm << '\n';
    conv.flush();
  };
  const StageSink onStage = [&](const HarmonicResult& r) {
    writeMaterialCsv(checkpointCsv, r.gamma, "config " + hash);
    json c = {{"configHash", hash}, {"ranks", r.ranks}, {"stageLosses", r.stageLosses}, {"stalledSamples", r.stalledSamples}};
    std::ofstream(checkpointJson) << c.dump(2) << '\n';
  };
  for (const auto& o : objectives) o.resetWarmStart();
  const double initialLoss = sequenceLoss(objectives, gamma0);
  const HarmonicResult result = harmonicFit(mesh, objectives, gamma0, cfg.fit.options, cfg.fit.ranks, cfg.fit.fullStage,
                                            sink, resume ? &*resume : nullptr, onStage);
  writeMaterialCsv(cfg.materialPath(), result.gamma, "config " + hash);

  json perSample = json::array();
  double finalLoss = 0.0;
  for (size_t k = 0; k < objectives.size(); ++k) {
    const auto eq = objectives[k].equilibrium(result.gamma);
    const double l = objectives[k].loss(eq.x);
    finalLoss += l;
    perSample.push_back({{"frame", frames[k]}, {"loss", l}, {"residual", eq.residual}});
  }
  const int finalStalled = result.stalledSamples.empty() ? 0 : result.stalledSamples.back();
  const bool stalled = finalStalled == static_cast<int>(objectives.size());
  const bool aboveCeiling = finalLoss > cfg.fit.lossCeiling;
  writeSummary(cfg, "fit",
               {{"initialLoss", initialLoss},
                {"finalLoss", finalLoss},
                {"ranks", result.ranks},
                {"stageLosses", result.stageLosses},
                {"stalledSamples", result.stalledSamples},
                {"samples", perSample},
                {"initialSweep", sweep},
                {"elements", mesh.elementCount()},
                {"nodes", mesh.nodeCount()},
                {"equilibriumSolves", stats.equilibriumSolves},
                {"adjointEvaluations", stats.adjointEvaluations},
                {"gateViolations", stats.gateViolations},
                {"worstAdjointResidual", stats.worstAdjointResidual},
                {"stalled", stalled},
                {"aboveCeiling", aboveCeiling},
                {"seconds", secondsSince(t0)}});
  if (stalled) logWarning("every sample stalled in the final stage");
  if (aboveCeiling) logWarning("final loss exceeds the configured ceiling");
  return stalled || aboveCeiling ? 3 : 0;
}

int cmdSimulate(const PipelineConfig& cfg) {
  const auto t0 = Clock::now();
  prepareOut(cfg);
  const std::string hash = configHash(cfg);
  const fs::path dir = cfg.simulationDir();
  fs::create_directories(dir);
  const YarnModel model = sequenceModel(cfg);
  const VolumeMesh mesh = meshFor(cfg, model);
  const MaterialField gamma = readMaterialCsv(cfg.materialPath());
  if (gamma.elementCount() != mesh.elementCount()) throw InvalidInput("material does not match the mesh");
  const ScenarioConfig sc = cfg.simulate.scenario ? *cfg.simulate.scenario : cfg.scenario;
  const Scenario scenario(sc, model);
  const double dt = cfg.simulate.dt > 0.0 ? cfg.simulate.dt : cfg.dt;
  const int steps = cfg.simulate.steps > 0 ? cfg.simulate.steps : cfg.steps;

  const std::vector<int> groups = meshPinGroups(mesh, scenario);
  std::vector<char> pinned(mesh.nodeCount(), 0);
  for (int n = 0; n < mesh.nodeCount(); ++n) pinned[n] = groups[n] >= 0;
  PdSolver solver(mesh, gamma, dt, pinned, cfg.simulate.pd);
  SolverState state;
  state.x = mesh.restPositions();
  state.v = VecX::Zero(mesh.dofCount());
  state.dt = dt;
  state.pinnedNode = pinned;
  state.pinTargets = state.x;
  state.colliders = cfg.colliders;
  VecX force = VecX::Zero(mesh.dofCount());
  if (sc.gravity.norm() > 0.0)
    for (int n = 0; n < mesh.nodeCount(); ++n) force.segment<3>(3 * n) = mesh.lumpedMass[n] * sc.gravity;

  const auto faces = boundaryFaces(mesh);
  YarnSequence meta;
  meta.dt = dt;
  meta.pinnedVertices = scenario.pinnedVertices();
  if (sc.gravity.norm() > 0.0) {
    const VecX m = model.vertexMasses();
    std::vector<Vec3> f(model.vertexCount());
    for (int i = 0; i < model.vertexCount(); ++i) f[i] = m[i] * sc.gravity;
    meta.externalForce.push_back(f);
  }
  std::ofstream timings(dir / "timings.csv");
  timings << "# config " << hash << "\nframe,milliseconds\n";
  double maxDet = 0.0;
  auto emit = [&](int frame, const VecX& x) {
    std::ostringstream name;
    name << "frame_" << std::setw(4) << std::setfill('0') << frame << ".obj";
    writeObj(dir / name.str(), unflatten(x), faces, "config " + hash);
    const std::vector<Vec3> yarn = unflatten(v2y(mesh, x));
    writeYarn(dir / frameFileName(frame), model, &yarn, "config " + hash);
    for (int e = 0; e < mesh.elementCount(); ++e) maxDet = std::max(maxDet, std::abs(mesh.deformationGradient(e, x).determinant() - 1.0));
  };
  emit(0, state.x);
  double total = 0.0;
  for (int step = 1; step <= steps; ++step) {
    const double s = scenario.rampParameter(step);
    for (int n = 0; n < mesh.nodeCount(); ++n)
      if (pinned[n]) state.pinTargets.segment<3>(3 * n) = scenario.apply(groups[n], s, mesh.nodes[n]);
    const auto ts = Clock::now();
    state = solver.step(state, force);
    const double ms = 1e3 * secondsSince(ts);
    total += ms;
    timings << step << ',' << ms << '\n';
    emit(step, state.x);
  }
  writeSequenceIndex(dir, meta, steps + 1, hash);
  writeSummary(cfg, "simulate",
               {{"frames", steps + 1},
                {"nodes", mesh.nodeCount()},
                {"elements", mesh.elementCount()},
                {"maxDetDeviation", maxDet},
                {"meanStepMilliseconds", steps > 0 ? total / steps : 0.0},
                {"seconds", secondsSince(t0)}});
  return 0;
}

int cmdCompare(const PipelineConfig& cfg) {
  const auto t0 = Clock::now();
  prepareOut(cfg);
  const std::string hash = configHash(cfg);
  const YarnModel model = sequenceModel(cfg);
  const YarnSequence sim = readSequence(cfg.simulationDir());
  const YarnSequence ref = readSequence(cfg.referenceDir());
  sim.validate(model);
  ref.validate(model);
  const int frames = std::min(sim.frameCount(), ref.frameCount());
  if (frames == 0) throw InvalidInput("nothing to compare");
  const VolumeMesh mesh = meshFor(cfg, model);
  const ShapeFit fit(mesh, model);
  json perFrame = json::array();
  double maxRms = 0.0;
  double maxLoss = 0.0;
  for (int i = 0; i < frames; ++i) {
    const auto& a = sim.frames[i];
    const auto& b = ref.frames[i];
    double sq = 0.0;
    for (size_t v = 0; v < a.size(); ++v) sq += (a[v] - b[v]).squaredNorm();
    const double rms = std::sqrt(sq / static_cast<double>(a.size()));
    // Shape-fitting loss of the simulated pose against the reference targets, above its minimum.
    const TargetDeformation t = fit.targets(b, i);
    const VecX xs = fit.solve(fit.targets(a, i), a);
    const VecX xr = fit.solve(t, b);
    const double loss = std::max(0.0, fit.objective(xs, t, b) - fit.objective(xr, t, b));
    maxRms = std::max(maxRms, rms);
    maxLoss = std::max(maxLoss, loss);
    perFrame.push_back({{"frame", i}, {"rms", rms}, {"loss", loss}});
  }
  const double diag = boundingBoxDiagonal(model.restVertices);
  json report = {{"configHash", hash},
                 {"frames", frames},
                 {"perFrame", perFrame},
                 {"maxRms", maxRms},
                 {"finalRms", perFrame.back()["rms"]},
                 {"maxLoss", maxLoss},
                 {"boundingBoxDiagonal", diag},
                 {"maxRmsOverDiagonal", diag > 0.0 ? maxRms / diag : 0.0},
                 {"seconds", secondsSince(t0)}};
  std::ofstream(fs::path(cfg.paths.out) / "report.json") << report.dump(2) << '\n';
  writeSummary(cfg, "compare", {{"maxRms", maxRms}, {"maxRmsOverDiagonal", report["maxRmsOverDiagonal"]}});
  return 0;
}

int runCommand(const std::string& name, const PipelineConfig& cfg) {
  try {
    if (name == "generate") return cmdGenerate(cfg);
    if (name == "voxelize") return cmdVoxelize(cfg);
    if (name == "fit") return cmdFit(cfg);
    if (name == "simulate") return cmdSimulate(cfg);
    if (name == "compare") return cmdCompare(cfg);
    log(LogLevel::Error, "unknown command '" + name + "'");
    return 2;
  } catch (const InvalidInput& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const json::exception& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    return 3;
  }
}

}  // namespace knitvh
