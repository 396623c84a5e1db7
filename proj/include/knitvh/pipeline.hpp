#pragma once

#include "knitvh/common.hpp"
#include "knitvh/fitting.hpp"
#include "knitvh/patch.hpp"
#include "knitvh/pd_solver.hpp"
#include "knitvh/yarn_sim.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace knitvh {

/// Boundary motion shared by the yarn simulator and the mesh simulator.
///   rest     no pins
///   stretch  min side fixed, max side translated by amount * extent along the axis
///   twist    min side fixed, max side rotated by `amount` radians about the axis
///   hang     max side fixed
///   drape    no pins
struct ScenarioConfig {
  std::string kind = "stretch";
  int axis = 0;
  double amount = 0.1;
  int rampSteps = 30;
  double pinTolerance = 1e-4;
  Vec3 gravity = Vec3::Zero();
};

class Scenario {
 public:
  Scenario(const ScenarioConfig& cfg, const YarnModel& model);

  const ScenarioConfig& config() const { return cfg_; }
  const std::vector<int>& pinnedVertices() const { return pinned_; }
  /// 0 fixed, 1 moving, per pinned vertex.
  const std::vector<int>& groups() const { return group_; }
  /// Position at ramp parameter s of a point of `group` at rest position p.
  Vec3 apply(int group, double s, const Vec3& p) const;
  PinMotion yarnMotion(const YarnModel& model) const;
  double rampParameter(int step) const;

 private:
  ScenarioConfig cfg_;
  std::vector<int> pinned_;
  std::vector<int> group_;
  double extent_ = 0.0;
  Vec3 center_ = Vec3::Zero();
};

/// Mesh nodes of the host tets of pinned yarn vertices with their groups (-1 for free nodes).
std::vector<int> meshPinGroups(const VolumeMesh& mesh, const Scenario& scenario);

struct PipelineConfig {
  struct Paths {
    std::string yarn;        // input yarn file; empty selects the generated asset
    std::string out = "out";
    std::string sequence;    // defaults to out
    std::string material;    // defaults to out/material.csv
    std::string reference;   // defaults to the sequence directory
    std::string simulation;  // defaults to out/sim
  } paths;
  std::uint64_t seed = 1;
  std::string asset = "rib";  // rib | bar
  RibPatchOptions rib;
  BarOptions bar;
  double cellSize = 0.0;  // 0 selects automatic sizing
  double nodeRatio = 0.5;
  YarnSimOptions yarnSim;
  double dt = 1.0 / 150.0;
  int steps = 60;
  ScenarioConfig scenario;
  std::vector<Collider> colliders;

  struct Fit {
    std::vector<int> samples{-1};  // negative indices count from the end
    bool dynamic = false;
    std::vector<int> ranks{1, 10, 30};
    bool fullStage = true;
    std::optional<std::pair<double, double>> initialGamma;  // empty: log sweep over uniform materials
    double lossCeiling = 1e300;
    bool resume = false;
    FitOptions options;
  } fit;

  struct Simulate {
    double dt = 0.0;  // 0: the generation dt
    int steps = 0;    // 0: the generation step count
    PdOptions pd;
    std::optional<ScenarioConfig> scenario;  // empty: the generation scenario
  } simulate;

  std::string sequenceDir() const { return paths.sequence.empty() ? paths.out : paths.sequence; }
  std::string materialPath() const { return paths.material.empty() ? paths.out + "/material.csv" : paths.material; }
  std::string referenceDir() const { return paths.reference.empty() ? sequenceDir() : paths.reference; }
  std::string simulationDir() const { return paths.simulation.empty() ? paths.out + "/sim" : paths.simulation; }
};

nlohmann::json configToJson(const PipelineConfig& cfg);
/// Missing keys keep their defaults. Throws InvalidInput on malformed or inconsistent values.
PipelineConfig configFromJson(const nlohmann::json& j);
PipelineConfig loadConfig(const std::string& path);
/// 64-bit FNV-1a of the canonical config (resume flag excluded), as 16 hex digits.
std::string configHash(const PipelineConfig& cfg);

/// The yarn of the config: the input file when given, else the generated asset.
YarnModel buildModel(const PipelineConfig& cfg);

/// Commands return the process exit code: 0 ok, 2 usage or input error, 3 numerical failure.
int cmdGenerate(const PipelineConfig& cfg);
int cmdVoxelize(const PipelineConfig& cfg);
int cmdFit(const PipelineConfig& cfg);
int cmdSimulate(const PipelineConfig& cfg);
int cmdCompare(const PipelineConfig& cfg);
/// Dispatches by name and maps exceptions to exit codes.
int runCommand(const std::string& name, const PipelineConfig& cfg);

}  // namespace knitvh
