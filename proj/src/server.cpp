#include "loopstage/server.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast.hpp>

#include "loopstage/compositor.hpp"
#include "loopstage/error.hpp"
#include "loopstage/log.hpp"
#include "loopstage/png_io.hpp"
#include "loopstage/session.hpp"

namespace loopstage {
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

namespace {

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

struct Outgoing {
  std::string data;
  bool binary = false;
};

enum class Channel { kControl, kIndexStream, kImageStream };

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& in, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

Response make_response(const Request& req, http::status status, std::string body,
                       const std::string& content_type) {
  Response res{status, req.version()};
  res.set(http::field::server, "loopstage");
  res.set(http::field::content_type, content_type);
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = std::move(body);
  res.prepare_payload();
  return res;
}

Response json_response(const Request& req, http::status status, const json& body) {
  return make_response(req, status, body.dump(), "application/json");
}

Response error_response(const Request& req, http::status status, const std::string& message) {
  return json_response(req, status, {{"error", message}});
}

std::vector<std::string> split_path(std::string_view target) {
  target = target.substr(0, target.find('?'));
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < target.size()) {
    if (target[i] == '/') {
      ++i;
      continue;
    }
    const std::size_t j = target.find('/', i);
    parts.emplace_back(target.substr(i, j == std::string_view::npos ? target.size() - i : j - i));
    if (j == std::string_view::npos) break;
    i = j;
  }
  return parts;
}

}  // namespace

namespace detail {

class WsClient;

struct ServerState {
  ServerState(std::shared_ptr<const Project> p, ServerOptions o)
      : project(std::move(p)), options(std::move(o)), engine(net::make_strand(ioc)),
        acceptor(ioc), clock(engine) {}

  void start();
  void stop();
  void accept();
  void schedule_tick();
  void tick();
  void add_stream(const std::shared_ptr<WsClient>& client);
  void remove_stream(const std::shared_ptr<WsClient>& client);
  void handle_control(std::string text, std::shared_ptr<WsClient> client);
  // Calls `done` with the response, possibly from another thread.
  void handle_http(Request req, std::function<void(Response)> done);
  Response sprite(const Request& req, const std::string& actor, const std::string& file) const;
  std::int64_t now_ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
        .count();
  }

  std::shared_ptr<const Project> project;
  ServerOptions options;
  net::io_context ioc;
  // Serialises every access to `session`.
  net::strand<net::io_context::executor_type> engine;
  tcp::acceptor acceptor;
  net::steady_timer clock;
  std::unique_ptr<Session> session;
  std::chrono::steady_clock::time_point started;
  std::chrono::nanoseconds period{};
  std::uint64_t ticks = 0;
  std::vector<std::thread> threads;
  std::atomic<bool> running{false};

  std::mutex clients_mutex;
  std::set<std::shared_ptr<WsClient>> streams;
  // Every accepted WebSocket, so stop() can drop connections held by the stopped io_context.
  std::vector<std::weak_ptr<WsClient>> connections;

  std::mutex recordings_mutex;
  std::map<std::string, json> recordings;
  int next_recording = 1;

  std::mutex state_mutex;
  std::condition_variable state_cv;
  bool stopped = false;
};

class WsClient : public std::enable_shared_from_this<WsClient> {
 public:
  WsClient(tcp::socket&& socket, ServerState* hub, Channel channel)
      : ws_(std::move(socket)), hub_(hub), channel_(channel) {}

  Channel channel() const { return channel_; }

  void run(Request req) {
    {
      std::lock_guard lock(hub_->clients_mutex);
      hub_->connections.push_back(weak_from_this());
    }
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsClient::on_accept, shared_from_this()));
  }

  // Thread-safe. Droppable messages are skipped while a write is pending.
  void send(std::shared_ptr<const Outgoing> message, bool droppable) {
    net::post(ws_.get_executor(), [self = shared_from_this(), message = std::move(message), droppable] {
      if (self->closed_) return;
      if (droppable && !self->queue_.empty()) return;
      self->queue_.push_back(message);
      if (self->queue_.size() == 1) self->write_next();
    });
  }

  // Only safe once the io_context threads have stopped.
  void abort() {
    beast::error_code ignored;
    beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
    beast::get_lowest_layer(ws_).socket().close(ignored);
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    if (channel_ != Channel::kControl) hub_->add_stream(shared_from_this());
    read();
  }

  void read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsClient::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      fail();
      return;
    }
    if (channel_ == Channel::kControl) {
      hub_->handle_control(beast::buffers_to_string(buffer_.data()), shared_from_this());
    }
    buffer_.consume(buffer_.size());
    read();
  }

  void write_next() {
    const Outgoing& m = *queue_.front();
    ws_.binary(m.binary);
    ws_.async_write(net::buffer(m.data), beast::bind_front_handler(&WsClient::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) {
      fail();
      return;
    }
    queue_.pop_front();
    if (!queue_.empty()) write_next();
  }

  void fail() {
    if (closed_) return;
    closed_ = true;
    queue_.clear();
    if (channel_ != Channel::kControl) hub_->remove_stream(shared_from_this());
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  ServerState* hub_;
  Channel channel_;
  std::deque<std::shared_ptr<const Outgoing>> queue_;
  bool closed_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, ServerState* hub) : stream_(std::move(socket)), hub_(hub) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::read, shared_from_this()));
  }

 private:
  void read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec == http::error::end_of_stream) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    if (ec) return;
    if (websocket::is_upgrade(req_)) {
      const std::string target(req_.target());
      std::optional<Channel> channel;
      if (target == "/control") channel = Channel::kControl;
      if (target == "/stream") channel = Channel::kIndexStream;
      if (target == "/stream?format=png") channel = Channel::kImageStream;
      if (channel) {
        stream_.expires_never();
        std::make_shared<WsClient>(stream_.release_socket(), hub_, *channel)->run(std::move(req_));
        return;
      }
      write(error_response(req_, http::status::not_found, "no WebSocket endpoint at " + target));
      return;
    }
    hub_->handle_http(std::move(req_), [self = shared_from_this()](Response res) {
      net::post(self->stream_.get_executor(), [self, res = std::move(res)]() mutable { self->write(std::move(res)); });
    });
  }

  void write(Response res) {
    auto owned = std::make_shared<Response>(std::move(res));
    http::async_write(stream_, *owned, [self = shared_from_this(), owned](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (owned->need_eof()) {
        stream_shutdown(self->stream_);
        return;
      }
      self->read();
    });
  }

  static void stream_shutdown(beast::tcp_stream& stream) {
    beast::error_code ignored;
    stream.socket().shutdown(tcp::socket::shutdown_send, ignored);
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  Request req_;
  ServerState* hub_;
};

void ServerState::start() {
  session = std::make_unique<Session>(project);
  const double ms = options.tick_ms > 0.0 ? options.tick_ms : 1000.0 / project->manifest.frame_rate;
  period = std::chrono::nanoseconds(static_cast<std::int64_t>(ms * 1e6));

  const tcp::endpoint endpoint(net::ip::make_address(options.address), options.port);
  acceptor.open(endpoint.protocol());
  acceptor.set_option(net::socket_base::reuse_address(true));
  acceptor.bind(endpoint);
  acceptor.listen(net::socket_base::max_listen_connections);
  if (!options.recordings_dir.empty()) std::filesystem::create_directories(options.recordings_dir);

  running = true;
  started = std::chrono::steady_clock::now();
  accept();
  net::post(engine, [this] { schedule_tick(); });
  const int n = std::max(1, options.io_threads);
  for (int i = 0; i < n; ++i) threads.emplace_back([this] { ioc.run(); });
}

void ServerState::stop() {
  if (!running.exchange(false)) return;
  net::post(ioc, [this] {
    beast::error_code ignored;
    acceptor.close(ignored);
    clock.cancel();
  });
  ioc.stop();
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
  threads.clear();
  {
    std::lock_guard lock(clients_mutex);
    streams.clear();
    for (const auto& weak : connections) {
      if (auto client = weak.lock()) client->abort();
    }
    connections.clear();
  }
  std::lock_guard lock(state_mutex);
  stopped = true;
  state_cv.notify_all();
}

void ServerState::accept() {
  acceptor.async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (!running) return;
    } else {
      std::make_shared<HttpSession>(std::move(socket), this)->run();
    }
    accept();
  });
}

void ServerState::schedule_tick() {
  if (!running) return;
  clock.expires_at(started + period * static_cast<std::int64_t>(ticks + 1));
  clock.async_wait([this](beast::error_code ec) {
    if (ec || !running) return;
    tick();
    schedule_tick();
  });
}

void ServerState::tick() {
  const Session::Column column = session->advance();
  ++ticks;
  std::vector<std::shared_ptr<WsClient>> targets;
  {
    std::lock_guard lock(clients_mutex);
    targets.assign(streams.begin(), streams.end());
  }
  if (targets.empty()) return;
  auto index = std::make_shared<Outgoing>(Outgoing{encode_column_message(column.column, column.frames), true});
  std::shared_ptr<Outgoing> image;
  for (const auto& client : targets) {
    if (client->channel() == Channel::kIndexStream) {
      client->send(index, false);
      continue;
    }
    if (!image) {
      RenderJob job;
      job.timeline = &session->engine().timeline();
      job.background = project->background;
      job.actors = project->layer_actors();
      job.quality = session->quality();
      job.clone_before_resolve = project->manifest.parameters.clone_before_resolve;
      image = std::make_shared<Outgoing>();
      image->binary = true;
      put_le(image->data, static_cast<std::uint64_t>(column.column), 8);
      const auto png = encode_png(render_frame(job, column.column).image);
      image->data.append(png.begin(), png.end());
    }
    client->send(image, true);
  }
}

void ServerState::add_stream(const std::shared_ptr<WsClient>& client) {
  std::lock_guard lock(clients_mutex);
  if (running) streams.insert(client);
}

void ServerState::remove_stream(const std::shared_ptr<WsClient>& client) {
  std::lock_guard lock(clients_mutex);
  streams.erase(client);
}

void ServerState::handle_control(std::string text, std::shared_ptr<WsClient> client) {
  net::post(engine, [this, text = std::move(text), client = std::move(client)] {
    json ack;
    json id;
    try {
      const json cmd = json::parse(text);
      if (!cmd.is_object()) throw InvalidRequest("command must be a JSON object");
      if (cmd.contains("id")) id = cmd["id"];
      const std::string op = cmd.value("op", std::string());
      ack = {{"ok", true}, {"op", op}};
      if (op == "trigger") {
        ack["column"] = session->trigger(cmd.at("layer").get<std::string>(), cmd.at("action").get<std::string>(),
                                         now_ms());
      } else if (op == "param") {
        ack["column"] = session->set_param(cmd.at("name").get<std::string>(), cmd.at("value"), now_ms());
      } else if (op == "status") {
        ack["column"] = session->playhead();
        ack["synthesized"] = session->synthesized();
        ack["quality"] = session->quality() == RenderQuality::kLive ? "live" : "final";
        ack["params"] = params_to_json(session->engine().schedule().at(session->synthesized()));
      } else {
        throw InvalidRequest("unknown op '" + op + "'");
      }
      ack["playhead"] = session->playhead();
    } catch (const json::exception& e) {
      ack = {{"ok", false}, {"error", std::string("malformed command: ") + e.what()}};
    } catch (const Error& e) {
      ack = {{"ok", false}, {"error", e.what()}};
    }
    if (!id.is_null()) ack["id"] = id;
    client->send(std::make_shared<Outgoing>(Outgoing{ack.dump(), false}), false);
  });
}

Response ServerState::sprite(const Request& req, const std::string& actor_id,
                                         const std::string& file) const {
  const LoadedActor* actor = nullptr;
  for (const LoadedActor& a : project->actors) {
    if (a.spec.id == actor_id) actor = &a;
  }
  if (actor == nullptr) return error_response(req, http::status::not_found, "unknown actor '" + actor_id + "'");
  int frame = -1;
  if (file.size() > 4 && file.ends_with(".png")) {
    try {
      std::size_t used = 0;
      frame = std::stoi(file.substr(0, file.size() - 4), &used);
      if (used != file.size() - 4) frame = -1;
    } catch (const std::exception&) {
      frame = -1;
    }
  }
  if (frame < 0 || frame >= actor->sequence->frame_count()) {
    return error_response(req, http::status::not_found, "no frame '" + file + "' on actor '" + actor_id + "'");
  }
  const Image& image = actor->sequence->frame(frame);
  const auto png = actor->sequence->tracked() ? encode_png_rgba(image, coverage_mask(*actor->sequence, frame))
                                              : encode_png(image);
  auto res = make_response(req, http::status::ok, std::string(png.begin(), png.end()), "image/png");
  res.set(http::field::cache_control, "max-age=3600");
  return res;
}

void ServerState::handle_http(Request req, std::function<void(Response)> done) {
  const auto parts = split_path(std::string_view(req.target().data(), req.target().size()));
  const auto method = req.method();
  try {
    if (method == http::verb::options) {
      Response res = make_response(req, http::status::no_content, "", "text/plain");
      res.set(http::field::access_control_allow_methods, "GET, POST, OPTIONS");
      res.set(http::field::access_control_allow_headers, "Content-Type");
      done(std::move(res));
      return;
    }
    if (method == http::verb::get && parts.size() == 1 && parts[0] == "project") {
      done(json_response(req, http::status::ok, project_descriptor(*project)));
      return;
    }
    if (method == http::verb::get && parts.size() == 1 && parts[0] == "background.png") {
      const auto png = encode_png(project->background);
      done(make_response(req, http::status::ok, std::string(png.begin(), png.end()), "image/png"));
      return;
    }
    if (method == http::verb::get && parts.size() == 3 && parts[0] == "sprites") {
      done(sprite(req, parts[1], parts[2]));
      return;
    }
    if (parts.size() >= 1 && parts[0] == "recordings") {
      if (method == http::verb::get && parts.size() == 1) {
        json ids = json::array();
        std::lock_guard lock(recordings_mutex);
        for (const auto& [id, rec] : recordings) ids.push_back(id);
        done(json_response(req, http::status::ok, {{"recordings", ids}}));
        return;
      }
      if (method == http::verb::get && parts.size() == 2) {
        std::lock_guard lock(recordings_mutex);
        const auto it = recordings.find(parts[1]);
        if (it == recordings.end()) {
          done(error_response(req, http::status::not_found, "no recording '" + parts[1] + "'"));
        } else {
          done(json_response(req, http::status::ok, it->second));
        }
        return;
      }
      if (method == http::verb::post && parts.size() == 1) {
        std::optional<PerformanceRecording> uploaded;
        if (!req.body().empty()) {
          const json body = json::parse(req.body());
          if (!(body.is_object() && body.empty())) uploaded = PerformanceRecording::from_json(body);
          if (uploaded && uploaded->manifest_hash != project->hash) {
            done(error_response(req, http::status::conflict, "recording belongs to another manifest"));
            return;
          }
        }
        // The session is only touched on the engine strand.
        net::post(engine, [this, req = std::move(req), uploaded = std::move(uploaded), done = std::move(done)] {
          const PerformanceRecording rec = uploaded ? *uploaded : session->recording();
          std::string id;
          {
            std::lock_guard lock(recordings_mutex);
            id = "rec-" + std::to_string(next_recording++);
            recordings[id] = rec.to_json();
          }
          if (!options.recordings_dir.empty()) rec.save(options.recordings_dir / (id + ".json"));
          done(json_response(req, http::status::created,
                             {{"id", id}, {"events", rec.events.size()}, {"columns", rec.columns}}));
        });
        return;
      }
    }
    done(error_response(req, http::status::not_found, "no route for " + std::string(req.target().data(), req.target().size())));
  } catch (const json::exception& e) {
    done(error_response(req, http::status::bad_request, std::string("malformed JSON: ") + e.what()));
  } catch (const Error& e) {
    done(error_response(req, http::status::bad_request, e.what()));
  }
}

}  // namespace detail

std::string encode_column_message(std::uint64_t column, const std::vector<int>& frames) {
  std::string out;
  out.reserve(8 + 4 * frames.size());
  put_le(out, column, 8);
  for (int f : frames) put_le(out, static_cast<std::uint32_t>(f), 4);
  return out;
}

bool decode_column_message(const std::string& bytes, std::uint64_t& column, std::vector<int>& frames) {
  if (bytes.size() < 8 || (bytes.size() - 8) % 4 != 0) return false;
  column = get_le(bytes, 0, 8);
  frames.clear();
  for (std::size_t i = 8; i < bytes.size(); i += 4) frames.push_back(static_cast<int>(get_le(bytes, i, 4)));
  return true;
}

json project_descriptor(const Project& project) {
  const ProjectManifest& m = project.manifest;
  json layers = json::array();
  for (const LayerSpec& l : m.layers) {
    const ActorSpec& actor = *m.find_actor(l.actor);
    json actions = json::array();
    for (const ActionDef& a : actor.actions) actions.push_back({{"id", a.id}, {"name", a.name}, {"key", a.key}});
    layers.push_back({{"id", l.id}, {"actor", l.actor}, {"default_action", l.default_action},
                      {"live", l.live}, {"actions", actions}});
  }
  json actors = json::array();
  for (const LoadedActor& a : project.actors) {
    actors.push_back({{"id", a.spec.id},
                      {"kind", a.sequence->tracked() ? "tracked" : "full_frame"},
                      {"frames", a.sequence->frame_count()}});
  }
  return {{"name", m.name},
          {"hash", project.hash},
          {"frame_rate", m.frame_rate},
          {"width", project.background.width()},
          {"height", project.background.height()},
          {"layers", layers},
          {"actors", actors},
          {"parameters", params_to_json(m.parameters.synthesis)},
          {"quality", m.parameters.quality == RenderQuality::kLive ? "live" : "final"},
          {"manifest", manifest_to_json(m)}};
}

PerformanceServer::PerformanceServer(std::shared_ptr<const Project> project, ServerOptions options)
    : impl_(std::make_shared<detail::ServerState>(std::move(project), std::move(options))) {}

PerformanceServer::~PerformanceServer() { stop(); }

void PerformanceServer::start() { impl_->start(); }

void PerformanceServer::stop() { impl_->stop(); }

void PerformanceServer::wait() {
  std::unique_lock lock(impl_->state_mutex);
  impl_->state_cv.wait(lock, [this] { return impl_->stopped; });
}

std::uint16_t PerformanceServer::port() const { return impl_->acceptor.local_endpoint().port(); }

}  // namespace loopstage
