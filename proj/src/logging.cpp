#include "lesionseg/logging.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace lesionseg {

namespace {

LogLevel parse_level(const char* s) {
  if (!s) return LogLevel::kInfo;
  const std::string v(s);
  if (v == "error" || v == "0") return LogLevel::kError;
  if (v == "warn" || v == "warning" || v == "1") return LogLevel::kWarn;
  if (v == "info" || v == "2") return LogLevel::kInfo;
  if (v == "debug" || v == "3") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

LogLevel& level_ref() {
  static LogLevel level = parse_level(std::getenv("LESIONSEG_LOG"));
  return level;
}

const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::kError: return "error";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kInfo: return "info";
    case LogLevel::kDebug: return "debug";
  }
  return "?";
}

std::mutex g_log_mutex;

}  // namespace

LogLevel log_level() { return level_ref(); }

void set_log_level(LogLevel level) { level_ref() = level; }

void log_message(LogLevel level, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << "[" << level_name(level) << "] " << msg << "\n";
}

}  // namespace lesionseg
