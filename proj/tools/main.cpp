#include "knitvh/log.hpp"
#include "knitvh/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

int main(int argc, char** argv) {
  CLI::App app{"Volumetric homogenization of yarn-level knit models"};
  app.require_subcommand(1);
  std::string configPath;
  std::string outDir;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  const char* names[] = {"generate", "voxelize", "fit", "simulate", "compare"};
  const char* help[] = {"simulate the yarn model and write a pose sequence", "build and write the tet mesh",
                        "fit per-element materials to sequence samples", "simulate the homogenized mesh",
                        "compare simulated and reference yarn frames"};
  for (int i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", configPath, "JSON config (defaults apply to missing keys)");
    sub->add_option("--out", outDir, "output directory (overrides paths.out)");
    sub->add_option("--seed", seed, "random seed (overrides seed)");
    sub->add_flag("-v,--verbose", verbose, "log progress");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  knitvh::setLogLevel(verbose ? knitvh::LogLevel::Info : knitvh::LogLevel::Warning);
  knitvh::PipelineConfig cfg;
  try {
    nlohmann::json j = nlohmann::json::object();
    if (!configPath.empty()) j = knitvh::configToJson(knitvh::loadConfig(configPath));
    if (!outDir.empty()) j["paths"]["out"] = outDir;
    if (seed) j["seed"] = *seed;
    cfg = knitvh::configFromJson(j);
  } catch (const std::exception& e) {
    std::cerr << "knitvh: " << e.what() << '\n';
    return 2;
  }
  return knitvh::runCommand(app.get_subcommands().front()->get_name(), cfg);
}
