#pragma once

#include <functional>
#include <string_view>

namespace loopstage {

enum class LogLevel { kInfo, kWarning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

// Replaces the process-wide sink (default: stderr). Returns the previous one.
LogSink set_log_sink(LogSink sink);

void log_info(std::string_view message);
void log_warning(std::string_view message);

}  // namespace loopstage
