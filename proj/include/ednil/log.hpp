#pragma once

#include <string_view>

namespace ednil {

enum class LogLevel { kQuiet, kWarning, kInfo };

void set_log_level(LogLevel level);
LogLevel log_level();
void log_warning(std::string_view message);
void log_info(std::string_view message);

}  // namespace ednil
