#include "knitvh/io.hpp"

#include "json.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace knitvh {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::ofstream openOut(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

std::ifstream openIn(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path.string());
  return in;
}

struct ParsedYarn {
  std::vector<Vec3> vertices;
  std::vector<std::vector<int>> polylines;
  std::vector<std::pair<int, double>> densities;
  std::vector<std::pair<int, int>> links;
};

ParsedYarn parseYarn(const fs::path& path) {
  auto in = openIn(path);
  ParsedYarn y;
  std::string line;
  long expectV = -1;
  long expectL = -1;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "yarn") {
      if (!(ss >> expectV >> expectL)) throw InvalidInput("bad yarn header in " + path.string(), lineNo);
    } else if (tag == "v") {
      Vec3 p;
      if (!(ss >> p.x() >> p.y() >> p.z())) throw InvalidInput("bad vertex line in " + path.string(), lineNo);
      y.vertices.push_back(p);
    } else if (tag == "l") {
      std::vector<int> run;
      int i;
      while (ss >> i) run.push_back(i);
      y.polylines.push_back(std::move(run));
    } else if (tag == "d") {
      int p;
      double rho;
      if (!(ss >> p >> rho)) throw InvalidInput("bad density line in " + path.string(), lineNo);
      y.densities.emplace_back(p, rho);
    } else if (tag == "s") {
      int i, j;
      if (!(ss >> i >> j)) throw InvalidInput("bad link line in " + path.string(), lineNo);
      y.links.emplace_back(i, j);
    } else {
      throw InvalidInput("unknown record '" + tag + "' in " + path.string(), lineNo);
    }
  }
  if (expectV < 0) throw InvalidInput("missing yarn header in " + path.string());
  if (static_cast<long>(y.vertices.size()) != expectV || static_cast<long>(y.polylines.size()) != expectL)
    throw InvalidInput("yarn header counts do not match the records in " + path.string());
  return y;
}

}  // namespace

void writeYarn(const fs::path& path, const YarnModel& model, const std::vector<Vec3>* positions,
               const std::string& comment) {
  const auto& pts = positions ? *positions : model.restVertices;
  auto out = openOut(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "yarn " << pts.size() << ' ' << model.polylines.size() << '\n';
  for (const auto& p : pts) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& run : model.polylines) {
    out << 'l';
    for (int i : run) out << ' ' << i;
    out << '\n';
  }
  for (size_t p = 0; p < model.linearDensity.size(); ++p) out << "d " << p << ' ' << model.linearDensity[p] << '\n';
  for (const auto& [i, j] : model.links) out << "s " << i << ' ' << j << '\n';
}

YarnModel readYarn(const fs::path& path, double defaultDensity) {
  ParsedYarn y = parseYarn(path);
  YarnModel m;
  m.restVertices = y.vertices;
  m.deformedVertices = y.vertices;
  m.polylines = std::move(y.polylines);
  m.linearDensity.assign(m.polylines.size(), defaultDensity);
  for (const auto& [p, rho] : y.densities) {
    if (p < 0 || p >= static_cast<int>(m.polylines.size())) throw InvalidInput("density for unknown polyline", p);
    m.linearDensity[p] = rho;
  }
  m.links = std::move(y.links);
  m.validate();
  return computeSegmentNormals(std::move(m));
}

std::vector<Vec3> readYarnPositions(const fs::path& path) { return parseYarn(path).vertices; }

std::string frameFileName(int frame) {
  std::ostringstream ss;
  ss << "frame_" << std::setw(4) << std::setfill('0') << frame << ".yarn";
  return ss.str();
}

void writeSequenceIndex(const fs::path& dir, const YarnSequence& seq, int frameCount, const std::string& configHash) {
  json j;
  j["dt"] = seq.dt;
  j["frames"] = json::array();
  for (int i = 0; i < frameCount; ++i) j["frames"].push_back(frameFileName(i));
  j["pins"] = seq.pinnedVertices;
  if (!seq.externalForce.empty()) {
    auto out = openOut(dir / "force.txt");
    for (const auto& f : seq.externalForce.front()) out << "f " << f.x() << ' ' << f.y() << ' ' << f.z() << '\n';
    j["force"] = "force.txt";
  }
  if (!configHash.empty()) j["configHash"] = configHash;
  openOut(dir / "sequence.json") << j.dump(2) << '\n';
}

void writeSequence(const fs::path& dir, const YarnModel& model, const YarnSequence& seq, const std::string& configHash) {
  for (int i = 0; i < seq.frameCount(); ++i)
    writeYarn(dir / frameFileName(i), model, &seq.frames[i], configHash.empty() ? "" : "config " + configHash);
  writeSequenceIndex(dir, seq, seq.frameCount(), configHash);
}

YarnSequence readSequence(const fs::path& dir) {
  json j;
  try {
    openIn(dir / "sequence.json") >> j;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad sequence.json: ") + e.what());
  }
  YarnSequence seq;
  seq.dt = j.at("dt").get<double>();
  for (const auto& name : j.at("frames")) seq.frames.push_back(readYarnPositions(dir / name.get<std::string>()));
  seq.pinnedVertices = j.value("pins", std::vector<int>{});
  if (j.contains("force")) {
    auto in = openIn(dir / j["force"].get<std::string>());
    std::vector<Vec3> f;
    std::string tag;
    Vec3 v;
    while (in >> tag >> v.x() >> v.y() >> v.z()) f.push_back(v);
    seq.externalForce.assign(seq.frames.size(), f);
  }
  return seq;
}

void writeMaterialCsv(const fs::path& path, const MaterialField& gamma, const std::string& comment) {
  auto out = openOut(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "elem,gammaS,gammaV\n";
  for (int e = 0; e < gamma.elementCount(); ++e) out << e << ',' << gamma.gammaS(e) << ',' << gamma.gammaV(e) << '\n';
}

MaterialField readMaterialCsv(const fs::path& path) {
  auto in = openIn(path);
  std::vector<double> gs, gv;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      if (line.rfind("elem", 0) == 0) continue;
    }
    std::istringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c, ','))
      throw InvalidInput("bad material line in " + path.string());
    if (std::stoi(a) != static_cast<int>(gs.size())) throw InvalidInput("material rows out of order", std::stol(a));
    gs.push_back(std::stod(b));
    gv.push_back(std::stod(c));
  }
  VecX g(2 * gs.size());
  for (size_t e = 0; e < gs.size(); ++e) {
    g[e] = gs[e];
    g[gs.size() + e] = gv[e];
  }
  MaterialField m(g);
  m.validate();
  return m;
}

void writeTetMesh(const fs::path& stem, const std::vector<Vec3>& nodes, const std::vector<Tet>& tets,
                  const std::string& comment) {
  fs::path nodePath = stem;
  nodePath += ".node";
  fs::path elePath = stem;
  elePath += ".ele";
  auto node = openOut(nodePath);
  if (!comment.empty()) node << "# " << comment << '\n';
  node << nodes.size() << " 3 0 0\n";
  for (size_t i = 0; i < nodes.size(); ++i) node << i << ' ' << nodes[i].x() << ' ' << nodes[i].y() << ' ' << nodes[i].z() << '\n';
  auto ele = openOut(elePath);
  if (!comment.empty()) ele << "# " << comment << '\n';
  ele << tets.size() << " 4 0\n";
  for (size_t e = 0; e < tets.size(); ++e)
    ele << e << ' ' << tets[e][0] << ' ' << tets[e][1] << ' ' << tets[e][2] << ' ' << tets[e][3] << '\n';
}

void writeObj(const fs::path& path, const std::vector<Vec3>& vertices, const std::vector<std::array<int, 3>>& faces,
              const std::string& comment) {
  auto out = openOut(path);
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto& p : vertices) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  for (const auto& f : faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

}  // namespace knitvh
