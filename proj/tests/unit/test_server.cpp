#include "doctest.h"

#include <chrono>

#include <boost/asio.hpp>
#include <boost/beast.hpp>

#include "loopstage/server.hpp"
#include "loopstage/session.hpp"
#include "support/fixture.hpp"

using namespace loopstage;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

namespace {

std::shared_ptr<const Project> server_project() {
  static std::shared_ptr<const Project> project;
  if (!project) {
    project = load_project(loopstage::testing::block_project(loopstage::testing::scratch_dir("server"), 2));
  }
  return project;
}

struct HttpResult {
  unsigned status = 0;
  std::string body;
  std::string content_type;
  std::string cors;
};

HttpResult fetch(std::uint16_t port, http::verb verb, const std::string& target, const std::string& body = "") {
  net::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), port));
  http::request<http::string_body> req{verb, target, 11};
  req.set(http::field::host, "localhost");
  if (!body.empty()) {
    req.set(http::field::content_type, "application/json");
    req.body() = body;
  }
  req.prepare_payload();
  http::write(stream, req);
  beast::flat_buffer buffer;
  http::response<http::string_body> res;
  http::read(stream, buffer, res);
  beast::error_code ec;
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return {res.result_int(), res.body(), std::string(res[http::field::content_type]),
          std::string(res[http::field::access_control_allow_origin])};
}

class WsClient {
 public:
  WsClient(std::uint16_t port, const std::string& target) : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("localhost", target);
  }
  ~WsClient() {
    beast::error_code ec;
    ws_.close(websocket::close_code::normal, ec);
  }
  void send(const json& j) { ws_.write(net::buffer(j.dump())); }
  std::string read() {
    beast::flat_buffer buffer;
    ws_.read(buffer);
    return beast::buffers_to_string(buffer.data());
  }
  json read_json() { return json::parse(read()); }
  json command(const json& j) {
    send(j);
    return read_json();
  }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
};

bool is_png(const std::string& s, std::size_t offset = 0) {
  return s.size() > offset + 8 && s.compare(offset, 4, "\x89PNG") == 0;
}

}  // namespace

TEST_CASE("column messages round-trip") {
  const std::string bytes = encode_column_message(1234567890123ULL, {0, 7, 119});
  CHECK(bytes.size() == 8 + 3 * 4);
  std::uint64_t column = 0;
  std::vector<int> frames;
  REQUIRE(decode_column_message(bytes, column, frames));
  CHECK(column == 1234567890123ULL);
  CHECK(frames == std::vector<int>{0, 7, 119});
  CHECK_FALSE(decode_column_message("short", column, frames));
}

TEST_CASE("HTTP routes serve the project and its sprites") {
  PerformanceServer server(server_project(), {.tick_ms = 10.0});
  server.start();
  const auto port = server.port();
  REQUIRE(port != 0);

  const HttpResult project = fetch(port, http::verb::get, "/project");
  CHECK(project.status == 200);
  CHECK(project.cors == "*");
  const json desc = json::parse(project.body);
  CHECK(desc["hash"] == server_project()->hash);
  REQUIRE(desc["layers"].size() == 2);
  CHECK(desc["layers"][0]["id"] == "candle0");
  CHECK(desc["layers"][0]["actions"].size() == 3);
  CHECK(desc["layers"][0]["actions"][2]["key"] == "d");
  CHECK(desc["actors"][0]["frames"] == 120);

  const HttpResult bg = fetch(port, http::verb::get, "/background.png");
  CHECK(bg.status == 200);
  CHECK(bg.content_type == "image/png");
  CHECK(is_png(bg.body));

  const HttpResult sprite = fetch(port, http::verb::get, "/sprites/candle/17.png");
  CHECK(sprite.status == 200);
  CHECK(is_png(sprite.body));
  CHECK(fetch(port, http::verb::get, "/sprites/candle/120.png").status == 404);
  CHECK(fetch(port, http::verb::get, "/sprites/ghost/0.png").status == 404);
  CHECK(fetch(port, http::verb::get, "/sprites/candle/x.png").status == 404);
  CHECK(fetch(port, http::verb::get, "/nowhere").status == 404);
  server.stop();
}

TEST_CASE("control commands are acked with their commit column") {
  PerformanceServer server(server_project(), {.tick_ms = 5.0});
  server.start();
  WsClient control(server.port(), "/control");

  std::this_thread::sleep_for(std::chrono::milliseconds(60));
  const json status = control.command({{"op", "status"}, {"id", 1}});
  CHECK(status["ok"] == true);
  CHECK(status["id"] == 1);
  const int playhead = status["column"];
  CHECK(playhead > 0);

  const json ack = control.command({{"op", "trigger"}, {"layer", "candle1"}, {"action", "right"}, {"id", "t1"}});
  CHECK(ack["ok"] == true);
  CHECK(ack["id"] == "t1");
  CHECK(ack["column"].get<int>() >= playhead + server_project()->manifest.parameters.live.commit_offset);

  const json bad_layer = control.command({{"op", "trigger"}, {"layer", "ghost"}, {"action", "right"}});
  CHECK(bad_layer["ok"] == false);
  CHECK(bad_layer["error"].get<std::string>().find("ghost") != std::string::npos);
  const json bad_action = control.command({{"op", "trigger"}, {"layer", "candle0"}, {"action", "jump"}});
  CHECK(bad_action["ok"] == false);
  CHECK(control.command({{"op", "dance"}})["ok"] == false);
  CHECK(control.command({{"op", "param"}, {"name", "alpha"}, {"value", 2.0}})["ok"] == false);
  const json param = control.command({{"op", "param"}, {"name", "alpha"}, {"value", 0.9}});
  CHECK(param["ok"] == true);
  control.send(json("not an object"));
  CHECK(control.read_json()["ok"] == false);
  server.stop();
}

TEST_CASE("the index stream delivers consecutive columns and reflects triggers") {
  PerformanceServer server(server_project(), {.tick_ms = 4.0});
  server.start();
  WsClient stream(server.port(), "/stream");
  WsClient control(server.port(), "/control");

  std::uint64_t column = 0;
  std::vector<int> frames;
  REQUIRE(decode_column_message(stream.read(), column, frames));
  CHECK(frames.size() == 2);
  std::uint64_t last = column;
  for (int i = 0; i < 10; ++i) {
    REQUIRE(decode_column_message(stream.read(), column, frames));
    CHECK(column == last + 1);
    last = column;
  }

  const json ack = control.command({{"op", "trigger"}, {"layer", "candle1"}, {"action", "right"}});
  REQUIRE(ack["ok"] == true);
  const auto& field = *server_project()->actors[0].field;
  bool reached = false;
  const LiveConfig& live = server_project()->manifest.parameters.live;
  const int horizon = ack["column"].get<int>() + 4 * live.block;
  while (static_cast<int>(column) < horizon && !reached) {
    REQUIRE(decode_column_message(stream.read(), column, frames));
    CHECK(column == last + 1);
    last = column;
    if (static_cast<int>(column) >= ack["column"].get<int>()) reached = field.argmax(frames[1]) == 2;
  }
  CHECK(reached);
  server.stop();
}

TEST_CASE("the image stream sends composited PNG frames") {
  PerformanceServer server(server_project(), {.tick_ms = 10.0});
  server.start();
  WsClient stream(server.port(), "/stream?format=png");
  std::uint64_t previous = 0;
  for (int i = 0; i < 3; ++i) {
    const std::string msg = stream.read();
    REQUIRE(msg.size() > 8);
    std::uint64_t column = 0;
    for (int b = 0; b < 8; ++b) column |= static_cast<std::uint64_t>(static_cast<unsigned char>(msg[b])) << (8 * b);
    CHECK(is_png(msg, 8));
    if (i > 0) CHECK(column > previous);
    previous = column;
  }
  server.stop();
}

TEST_CASE("recordings can be captured, uploaded and fetched") {
  const auto dir = loopstage::testing::scratch_dir("server_recordings");
  PerformanceServer server(server_project(), {.tick_ms = 5.0, .recordings_dir = dir});
  server.start();
  const auto port = server.port();
  {
    WsClient control(port, "/control");
    CHECK(control.command({{"op", "trigger"}, {"layer", "candle0"}, {"action", "center"}})["ok"] == true);
  }
  const HttpResult created = fetch(port, http::verb::post, "/recordings");
  CHECK(created.status == 201);
  const std::string id = json::parse(created.body)["id"];
  CHECK(std::filesystem::exists(dir / (id + ".json")));

  const HttpResult got = fetch(port, http::verb::get, "/recordings/" + id);
  CHECK(got.status == 200);
  const PerformanceRecording rec = PerformanceRecording::from_json(json::parse(got.body));
  CHECK(rec.manifest_hash == server_project()->hash);
  REQUIRE(rec.events.size() == 1);
  CHECK(rec.events[0].action == "center");

  PerformanceRecording upload = rec;
  upload.events.clear();
  const HttpResult uploaded = fetch(port, http::verb::post, "/recordings", upload.to_json().dump());
  CHECK(uploaded.status == 201);
  upload.manifest_hash = "0000";
  CHECK(fetch(port, http::verb::post, "/recordings", upload.to_json().dump()).status == 409);
  CHECK(fetch(port, http::verb::post, "/recordings", "{broken").status == 400);

  const json list = json::parse(fetch(port, http::verb::get, "/recordings").body);
  CHECK(list["recordings"].size() == 2);
  CHECK(fetch(port, http::verb::get, "/recordings/rec-99").status == 404);
  server.stop();
}
