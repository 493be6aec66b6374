#pragma once

#include <string_view>

namespace mmfuse {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from MMFUSE_LOG (error | info | debug), default info.
LogLevel log_level();
void set_log_level(LogLevel level);

void log_message(LogLevel level, std::string_view msg);
inline void log_error(std::string_view msg) { log_message(LogLevel::error, msg); }
inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }
inline void log_debug(std::string_view msg) { log_message(LogLevel::debug, msg); }

}  // namespace mmfuse
