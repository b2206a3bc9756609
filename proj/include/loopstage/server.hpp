#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loopstage/project.hpp"

namespace loopstage {

namespace detail {
struct ServerState;
}

struct ServerOptions {
  std::string address = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  int io_threads = 2;
  // Column clock period; 0 uses the project frame rate.
  double tick_ms = 0.0;
  // Where POST /recordings also writes `<id>.json`; empty keeps them in memory.
  std::filesystem::path recordings_dir;
};

// Index-stream message: little-endian u64 column, then one u32 frame index
// per layer.
std::string encode_column_message(std::uint64_t column, const std::vector<int>& frames);
bool decode_column_message(const std::string& bytes, std::uint64_t& column, std::vector<int>& frames);

// Project descriptor served at GET /project.
nlohmann::json project_descriptor(const Project& project);

// Hosts one live session over HTTP and WebSocket:
//   WS   /control              JSON trigger / param commands, acked with a column
//   WS   /stream               binary column messages (see encode_column_message)
//   WS   /stream?format=png    u64 column followed by a composited PNG
//   GET  /project, /background.png, /sprites/{actor}/{frame}.png
//   POST /recordings, GET /recordings, GET /recordings/{id}
class PerformanceServer {
 public:
  PerformanceServer(std::shared_ptr<const Project> project, ServerOptions options = {});
  ~PerformanceServer();
  PerformanceServer(const PerformanceServer&) = delete;
  PerformanceServer& operator=(const PerformanceServer&) = delete;

  // Binds and starts the clock and I/O threads; returns once listening.
  void start();
  void stop();
  // Blocks until stop() is called from another thread or a signal handler.
  void wait();
  std::uint16_t port() const;

 private:
  std::shared_ptr<detail::ServerState> impl_;
};

}  // namespace loopstage
