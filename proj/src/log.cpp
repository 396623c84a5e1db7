#include "knitvh/log.hpp"

#include <atomic>
#include <iostream>

namespace knitvh {
namespace {
std::atomic<int> gLevel{static_cast<int>(LogLevel::Warning)};
std::atomic<long> gWarnings{0};
constexpr const char* kNames[] = {"debug", "info", "warning", "error"};
}  // namespace

void setLogLevel(LogLevel level) { gLevel = static_cast<int>(level); }

void log(LogLevel level, const std::string& message) {
  if (level >= LogLevel::Warning) ++gWarnings;
  if (static_cast<int>(level) < gLevel) return;
  std::cerr << "[knitvh " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

long warningCount() { return gWarnings; }
void resetWarningCount() { gWarnings = 0; }

}  // namespace knitvh
