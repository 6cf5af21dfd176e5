#pragma once

// Minimal leveled logging to stderr, controlled by FETTL_LOG={error,info,debug}.

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace fettl {

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* v = std::getenv("FETTL_LOG");
    if (!v) return LogLevel::info;
    const std::string_view s(v);
    if (s == "error") return LogLevel::error;
    if (s == "debug") return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  static constexpr const char* tags[] = {"error", "info", "debug"};
  std::cerr << "[fettl " << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_error(const std::string& m) { log(LogLevel::error, m); }
inline void log_info(const std::string& m) { log(LogLevel::info, m); }
inline void log_debug(const std::string& m) { log(LogLevel::debug, m); }

}  // namespace fettl
