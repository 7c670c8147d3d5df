#pragma once

#include <sstream>
#include <string>

namespace metassm {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

/// Threshold comes from the METASSM_LOG environment variable
/// (debug|info|warn|error|off), default warn. Read once per process.
LogLevel log_threshold();
void log_message(LogLevel level, const std::string& msg);

inline bool log_enabled(LogLevel level) {
  return static_cast<int>(level) >= static_cast<int>(log_threshold());
}

}  // namespace metassm

#define METASSM_LOG_AT(level, expr)                          \
  do {                                                       \
    if (::metassm::log_enabled(level)) {                     \
      std::ostringstream oss_;                               \
      oss_ << expr;                                          \
      ::metassm::log_message(level, oss_.str());             \
    }                                                        \
  } while (0)

#define LOG_DEBUG(expr) METASSM_LOG_AT(::metassm::LogLevel::kDebug, expr)
#define LOG_INFO(expr) METASSM_LOG_AT(::metassm::LogLevel::kInfo, expr)
#define LOG_WARN(expr) METASSM_LOG_AT(::metassm::LogLevel::kWarn, expr)
#define LOG_ERROR(expr) METASSM_LOG_AT(::metassm::LogLevel::kError, expr)
