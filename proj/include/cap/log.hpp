#pragma once

#include <ostream>
#include <string>

#include <json.hpp>

namespace cap {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

/// Line-delimited JSON records: {"level": ..., "event": ..., <fields>}.
void set_log_stream(std::ostream* stream);
void set_log_level(LogLevel level);
LogLevel log_level_from(const std::string& s);
void log_event(LogLevel level, const std::string& event, const nlohmann::json& fields = nlohmann::json::object());

inline void log_info(const std::string& event, const nlohmann::json& fields = nlohmann::json::object()) {
  log_event(LogLevel::Info, event, fields);
}
inline void log_warn(const std::string& event, const nlohmann::json& fields = nlohmann::json::object()) {
  log_event(LogLevel::Warn, event, fields);
}

}  // namespace cap
