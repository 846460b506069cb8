#include "cap/log.hpp"

#include <iostream>
#include <mutex>
#include <stdexcept>

namespace cap {

namespace {

std::mutex g_mutex;
std::ostream* g_stream = &std::cerr;
LogLevel g_level = LogLevel::Info;

const char* name(LogLevel level) {
  switch (level) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warn: return "warn";
    case LogLevel::Error: return "error";
  }
  return "?";
}

}  // namespace

void set_log_stream(std::ostream* stream) {
  std::lock_guard lock(g_mutex);
  g_stream = stream;
}

void set_log_level(LogLevel level) {
  std::lock_guard lock(g_mutex);
  g_level = level;
}

LogLevel log_level_from(const std::string& s) {
  if (s == "debug") return LogLevel::Debug;
  if (s == "info") return LogLevel::Info;
  if (s == "warn") return LogLevel::Warn;
  if (s == "error") return LogLevel::Error;
  throw std::invalid_argument("unknown log level: " + s);
}

void log_event(LogLevel level, const std::string& event, const nlohmann::json& fields) {
  std::lock_guard lock(g_mutex);
  if (!g_stream || level < g_level) return;
  nlohmann::json record{{"level", name(level)}, {"event", event}};
  if (fields.is_object()) record.update(fields);
  *g_stream << record.dump() << '\n';
  g_stream->flush();
}

}  // namespace cap
