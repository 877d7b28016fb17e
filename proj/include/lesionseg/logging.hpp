#pragma once

#include <sstream>
#include <string>

namespace lesionseg {

enum class LogLevel : int { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

// Current level, initialized once from the LESIONSEG_LOG environment variable
// (error|warn|info|debug or 0..3, default info).
LogLevel log_level();
void set_log_level(LogLevel level);

void log_message(LogLevel level, const std::string& msg);

template <class... Args>
void log_at(LogLevel level, Args&&... args) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  std::ostringstream os;
  (os << ... << args);
  log_message(level, os.str());
}

template <class... Args>
void log_error(Args&&... args) {
  log_at(LogLevel::kError, std::forward<Args>(args)...);
}
template <class... Args>
void log_warn(Args&&... args) {
  log_at(LogLevel::kWarn, std::forward<Args>(args)...);
}
template <class... Args>
void log_info(Args&&... args) {
  log_at(LogLevel::kInfo, std::forward<Args>(args)...);
}
template <class... Args>
void log_debug(Args&&... args) {
  log_at(LogLevel::kDebug, std::forward<Args>(args)...);
}

}  // namespace lesionseg
