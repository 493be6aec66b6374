#include "mmfuse/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace mmfuse {

namespace {

LogLevel from_env() {
  const char* env = std::getenv("MMFUSE_LOG");
  if (!env) return LogLevel::info;
  const std::string v(env);
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

std::atomic<int>& level_slot() {
  static std::atomic<int> level{static_cast<int>(from_env())};
  return level;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

LogLevel log_level() { return static_cast<LogLevel>(level_slot().load()); }

void set_log_level(LogLevel level) { level_slot() = static_cast<int>(level); }

void log_message(LogLevel level, std::string_view msg) {
  if (static_cast<int>(level) > level_slot().load()) return;
  static constexpr const char* tag[] = {"error", "info", "debug"};
  std::lock_guard lock(sink_mutex());
  std::cerr << "[" << tag[static_cast<int>(level)] << "] " << msg << '\n';
}

}  // namespace mmfuse
