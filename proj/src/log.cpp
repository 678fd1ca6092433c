#include "ednil/log.hpp"

#include <atomic>
#include <iostream>

namespace ednil {

namespace {
std::atomic<LogLevel> g_level{LogLevel::kWarning};
}

void set_log_level(LogLevel level) { g_level.store(level); }
LogLevel log_level() { return g_level.load(); }

void log_warning(std::string_view message) {
  if (g_level.load() >= LogLevel::kWarning) std::cerr << "[ednil] warning: " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_level.load() >= LogLevel::kInfo) std::cerr << "[ednil] " << message << '\n';
}

}  // namespace ednil
