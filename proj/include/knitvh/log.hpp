#pragma once

#include <string>

namespace knitvh {

enum class LogLevel { Debug = 0, Info = 1, Warning = 2, Error = 3 };

/// Process-wide threshold; messages below it are dropped.
void setLogLevel(LogLevel level);
void log(LogLevel level, const std::string& message);
inline void logInfo(const std::string& m) { log(LogLevel::Info, m); }
inline void logWarning(const std::string& m) { log(LogLevel::Warning, m); }
inline void logDebug(const std::string& m) { log(LogLevel::Debug, m); }

/// Number of warnings emitted since start (or the last reset).
long warningCount();
void resetWarningCount();

}  // namespace knitvh
