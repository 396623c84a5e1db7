#pragma once

#include "knitvh/common.hpp"
#include "knitvh/material.hpp"
#include "knitvh/volmesh.hpp"
#include "knitvh/yarn.hpp"

#include <array>
#include <filesystem>
#include <string>

namespace knitvh {

/// Text yarn file:
///   yarn <vertexCount> <polylineCount>
///   v x y z            (one per vertex)
///   l i0 i1 ...        (one per polyline, 0-based)
///   d p rho            (optional linear density of polyline p)
///   s i j              (optional stitch link)
/// Lines starting with '#' are comments. `positions` replaces the rest vertices when given.
void writeYarn(const std::filesystem::path& path, const YarnModel& model, const std::vector<Vec3>* positions = nullptr,
               const std::string& comment = {});
/// Reads a yarn model (deformed = rest). Polylines without a `d` line get `defaultDensity`.
YarnModel readYarn(const std::filesystem::path& path, double defaultDensity = 3e-4);
/// Vertex positions of a yarn file (frame files).
std::vector<Vec3> readYarnPositions(const std::filesystem::path& path);

/// Frames as `frame_XXXX.yarn` next to `sequence.json` (dt, frame list, pins, optional constant force
/// file `force.txt` with lines `f fx fy fz`).
void writeSequence(const std::filesystem::path& dir, const YarnModel& model, const YarnSequence& seq,
                   const std::string& configHash = {});
/// Writes the metadata only; frames are expected to exist already.
void writeSequenceIndex(const std::filesystem::path& dir, const YarnSequence& seq, int frameCount,
                        const std::string& configHash = {});
std::string frameFileName(int frame);
YarnSequence readSequence(const std::filesystem::path& dir);

/// CSV `elem,gammaS,gammaV`; '#' lines are comments.
void writeMaterialCsv(const std::filesystem::path& path, const MaterialField& gamma, const std::string& comment = {});
MaterialField readMaterialCsv(const std::filesystem::path& path);

/// `<stem>.node` and `<stem>.ele` (0-based indices).
void writeTetMesh(const std::filesystem::path& stem, const std::vector<Vec3>& nodes, const std::vector<Tet>& tets,
                  const std::string& comment = {});
void writeObj(const std::filesystem::path& path, const std::vector<Vec3>& vertices,
              const std::vector<std::array<int, 3>>& faces, const std::string& comment = {});

}  // namespace knitvh
