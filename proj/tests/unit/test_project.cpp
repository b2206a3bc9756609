#include "doctest.h"

#include <fstream>

#include "loopstage/error.hpp"
#include "loopstage/png_io.hpp"
#include "loopstage/project.hpp"
#include "support/fixture.hpp"

using namespace loopstage;
using loopstage::testing::BlockActor;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

// Tracked actor: a red square circling over a textured background.
ActorSpec write_square_actor(const fs::path& dir, const std::string& id, int frames) {
  const std::string sub = "frames_" + id;
  fs::create_directories(dir / sub);
  std::vector<OrientedBox> boxes;
  for (int t = 0; t < frames; ++t) {
    Image img(40, 30);
    for (int y = 0; y < 30; ++y) {
      for (int x = 0; x < 40; ++x) {
        const auto v = static_cast<std::uint8_t>(60 + (x * 5 + y * 3) % 50);
        img.set(x, y, {v, v, v});
      }
    }
    const int cx = 20 + static_cast<int>(std::lround(8 * std::cos(t * 0.5)));
    const int cy = 15 + static_cast<int>(std::lround(6 * std::sin(t * 0.5)));
    for (int y = cy - 3; y < cy + 3; ++y) {
      for (int x = cx - 3; x < cx + 3; ++x) img.set(x, y, {220, 40, 40});
    }
    write_png(dir / sub / numbered_png_name(t), img);
    boxes.push_back({static_cast<double>(cx), static_cast<double>(cy), 12.0, 12.0, 0.0});
  }
  write_boxes_csv(dir / (id + "_boxes.csv"), boxes);
  ActorSpec a;
  a.id = id;
  a.kind = ActorKind::kTracked;
  a.frames = sub;
  a.boxes = id + "_boxes.csv";
  a.actions = {{"idle", "Idle", "i"}, {"run", "Run", "r"}};
  a.examples = {{"idle", {0}}, {"run", {frames - 1}}};
  return a;
}

}  // namespace

TEST_CASE("two actors of 100 frames load as two sequences") {
  const fs::path dir = loopstage::testing::scratch_dir("two_actors");
  BlockActor a{.id = "a", .actions = {"x", "y"}, .frames_per_action = 50};
  BlockActor b{.id = "b", .actions = {"x", "y"}, .frames_per_action = 50};
  ProjectManifest m = loopstage::testing::block_project(dir, 1, a);
  m.actors.push_back(loopstage::testing::write_block_actor(dir, b));
  save_manifest(dir / "project.json", m);

  auto project = load_project(dir / "project.json");
  REQUIRE(project->actors.size() == 2);
  for (const LoadedActor& actor : project->actors) {
    CHECK(actor.sequence->frame_count() == 100);
    CHECK(actor.matrix->size() == 100);
    CHECK(actor.field->frames() == 100);
  }
  CHECK(project->prepared());
  CHECK(project->background.width() == 48);
}

TEST_CASE("a layer requesting an undefined action names it") {
  const fs::path dir = loopstage::testing::scratch_dir("dangling");
  ProjectManifest m = loopstage::testing::block_project(dir, 1);
  m.layers[0].default_action = "jump";
  save_manifest(dir / "project.json", m);
  const std::string message = error_of([&] { load_project(dir / "project.json"); });
  CHECK(message.find("'jump'") != std::string::npos);

  m.layers[0].default_action = "left";
  m.actors[0].examples["hop"] = {3};
  CHECK(error_of([&] { manifest_from_json(manifest_to_json(m), dir); }).find("'hop'") != std::string::npos);
  m.actors[0].examples.erase("hop");
  m.layers[0].actor = "ghost";
  CHECK(error_of([&] { manifest_from_json(manifest_to_json(m), dir); }).find("'ghost'") != std::string::npos);
}

TEST_CASE("missing files are reported with their path") {
  const fs::path dir = loopstage::testing::scratch_dir("missing");
  ProjectManifest m = loopstage::testing::block_project(dir, 1);
  m.actors[0].frames = "nowhere";
  CHECK(error_of([&] { load_project(m); }).find("nowhere") != std::string::npos);
  CHECK(error_of([&] { read_manifest(dir / "absent.json"); }).find("absent.json") != std::string::npos);

  ProjectManifest tracked = loopstage::testing::block_project(dir, 0);
  tracked.actors.push_back(write_square_actor(dir, "sq", 4));
  tracked.actors.back().boxes = "no_boxes.csv";
  CHECK(error_of([&] { load_project(tracked); }).find("no_boxes.csv") != std::string::npos);
}

TEST_CASE("frames of different sizes fail the load") {
  const fs::path dir = loopstage::testing::scratch_dir("sizes");
  ProjectManifest m = loopstage::testing::block_project(dir, 1);
  BlockActor wide{.id = "wide", .width = 60};
  m.actors.push_back(loopstage::testing::write_block_actor(dir, wide));
  CHECK(error_of([&] { load_project(m); }).find("'wide'") != std::string::npos);

  write_png(dir / "frames_candle" / numbered_png_name(5), Image(10, 10));
  m.actors.pop_back();
  CHECK(error_of([&] { load_project(m); }).find("frames_candle") != std::string::npos);
}

TEST_CASE("candle setup: one actor, three actions, eight layers") {
  const fs::path dir = loopstage::testing::scratch_dir("candle");
  auto project = load_project(loopstage::testing::block_project(dir, 8));
  const auto models = project->layer_models();
  REQUIRE(models.size() == 8);
  for (const LayerModel& l : models) {
    CHECK(l.actions.size() == 3);
    CHECK(l.actor_id == "candle");
  }
  SynthesisEngine engine(models, project->compatibility.snapshot(), project->manifest.parameters.synthesis);
  CHECK(engine.layer_count() == 8);
  CHECK(engine.timeline().layers.size() == 8);
  engine.synthesize_block(4);
  CHECK(engine.columns() == 4);
}

TEST_CASE("manifest round-trips through save and load") {
  const fs::path dir = loopstage::testing::scratch_dir("roundtrip");
  ProjectManifest m = loopstage::testing::block_project(dir, 2);
  m.actors.push_back(write_square_actor(dir, "sq", 4));
  m.actors.back().flow = "flow_sq";
  m.actors.back().scribbles = "sq_scribbles.json";
  m.compatibility.push_back({"candle", "sq", {{3, 1, Verdict::kIncompatible, std::nullopt, TagMode::kRefine}}});
  m.layers[1].anchor = std::array<int, 2>{5, 6};
  m.layers[1].live = false;
  m.bynumbers.colors.push_back({{0, 0, 0}, "right"});
  m.bynumbers.tolerance = 10;
  m.parameters.synthesis.sigma_t = 2.5;
  m.parameters.synthesis.compression = 2;
  m.parameters.propagation.sigma = 1.25;
  m.parameters.quality = RenderQuality::kLive;
  m.parameters.live.block = 48;
  m.background = "bg.png";

  save_manifest(dir / "project.json", m);
  const ProjectManifest back = read_manifest(dir / "project.json");
  CHECK(manifest_to_json(back) == manifest_to_json(m));
  CHECK(manifest_hash(back) == manifest_hash(m));
  CHECK(back.compatibility[0].tags[0].mode_b == TagMode::kRefine);
  CHECK_FALSE(back.compatibility[0].tags[0].mode_a.has_value());
  CHECK(back.layers[1].anchor == std::array<int, 2>{5, 6});
  CHECK(back.parameters.synthesis.sigma_t == 2.5);

  m.parameters.synthesis.alpha = 0.7;
  CHECK(manifest_hash(back) != manifest_hash(m));
}

TEST_CASE("out-of-range parameters are rejected at parse time") {
  const fs::path dir = loopstage::testing::scratch_dir("params");
  ProjectManifest m = loopstage::testing::block_project(dir, 1);
  nlohmann::json j = manifest_to_json(m);
  j["parameters"]["synthesis"]["alpha"] = 1.5;
  CHECK_THROWS_AS(manifest_from_json(j, dir), AssetError);
  j = manifest_to_json(m);
  j["parameters"]["quality"] = "medium";
  CHECK_THROWS_AS(manifest_from_json(j, dir), AssetError);
}

TEST_CASE("derived artifacts are cached by content hash") {
  const fs::path dir = loopstage::testing::scratch_dir("cache");
  ProjectManifest m = loopstage::testing::block_project(dir, 1);
  auto first = load_project(m);
  const fs::path cache = first->cache_dir("candle");
  CHECK(fs::exists(cache / "metric.bin"));
  CHECK(fs::exists(cache / "field.bin"));
  CHECK(fs::exists(cache / "background.png"));

  LoadOptions cached_only;
  cached_only.prepare = false;
  auto second = load_project(m, cached_only);
  REQUIRE(second->prepared());
  CHECK(std::equal(first->actors[0].matrix->values().begin(), first->actors[0].matrix->values().end(),
                   second->actors[0].matrix->values().begin()));
  CHECK(*first->actors[0].graph == *second->actors[0].graph);
  for (int t = 0; t < first->actors[0].field->frames(); ++t) {
    CHECK(first->actors[0].field->argmax(t) == second->actors[0].field->argmax(t));
  }

  // Changing a frame invalidates the cached metric.
  write_png(dir / "frames_candle" / numbered_png_name(7), loopstage::testing::block_actor_frame({}, 70));
  auto stale = load_project(m, cached_only);
  CHECK_FALSE(stale->prepared());
  CHECK_THROWS_AS(stale->layer_models(), InvalidRequest);

  // Changing propagation parameters re-propagates but keeps the metric.
  m.parameters.propagation.knn = 6;
  auto fresh = load_project(m);
  CHECK(fresh->prepared());
  auto reload = load_project(m, cached_only);
  CHECK(reload->prepared());
}

TEST_CASE("field cache rejects foreign hashes") {
  const fs::path dir = loopstage::testing::scratch_dir("field_cache");
  ActionVectorField field(3, 2);
  field.row(0)[0] = 1.0;
  field.row(1)[1] = 1.0;
  field.row(2)[0] = 0.25;
  field.row(2)[1] = 0.75;
  save_field_cache(dir / "f.bin", 42, field, 1.5);
  auto back = load_field_cache(dir / "f.bin", 42);
  REQUIRE(back);
  CHECK(back->second == 1.5);
  CHECK(back->first.at(2, 1) == 0.75);
  CHECK_FALSE(load_field_cache(dir / "f.bin", 43));
  CHECK_FALSE(load_field_cache(dir / "missing.bin", 42));
}

TEST_CASE("tracked actors without masks are segmented during prepare") {
  const fs::path dir = loopstage::testing::scratch_dir("segment_prepare");
  ProjectManifest m;
  m.base_dir = dir;
  m.actors.push_back(write_square_actor(dir, "sq", 12));
  m.layers.push_back({"sq0", "sq", "idle", 0, std::nullopt, true});
  // One foreground stroke through the square's centre per frame.
  ScribbleSet scribbles;
  for (int t = 0; t < 12; ++t) {
    const int cx = 20 + static_cast<int>(std::lround(8 * std::cos(t * 0.5)));
    const int cy = 15 + static_cast<int>(std::lround(6 * std::sin(t * 0.5)));
    for (int x = cx - 2; x <= cx + 1; ++x) scribbles[t].fg.push_back({x, cy});
  }
  std::ofstream(dir / "sq_scribbles.json") << scribbles_to_json(scribbles).dump();
  m.actors.back().scribbles = "sq_scribbles.json";
  m.parameters.jump_candidates = 4;
  m.parameters.propagation.knn = 4;
  auto project = load_project(m);
  const LoadedActor& sq = project->actor("sq");
  REQUIRE(sq.sequence->has_masks());
  for (int t = 0; t < 12; ++t) {
    const OrientedBox& box = sq.sequence->boxes[t];
    // Every pixel of the square is foreground.
    int hits = 0;
    for (int y = static_cast<int>(box.cy) - 3; y < static_cast<int>(box.cy) + 3; ++y) {
      for (int x = static_cast<int>(box.cx) - 3; x < static_cast<int>(box.cx) + 3; ++x) {
        hits += sq.sequence->masks[t].fg(x, y);
      }
    }
    CHECK(hits == 36);
  }
  CHECK(fs::exists(project->cache_dir("sq") / "masks" / numbered_png_name(11)));

  LoadOptions cached_only;
  cached_only.prepare = false;
  auto again = load_project(m, cached_only);
  CHECK(again->prepared());
  CHECK(again->actor("sq").sequence->masks == sq.sequence->masks);

  resegment_actor(*project, "sq", 6);
  CHECK(project->actor("sq").sequence->masks.size() == 12);
  CHECK(project->prepared());
  CHECK_THROWS_AS(resegment_actor(*project, "sq", 40), InvalidRequest);
}

TEST_CASE("compatibility tags replay into the pair model and its cache") {
  const fs::path dir = loopstage::testing::scratch_dir("compat");
  ProjectManifest m = loopstage::testing::block_project(dir, 1, BlockActor{.id = "digger"});
  m.actors.push_back(loopstage::testing::write_block_actor(dir, BlockActor{.id = "truck"}));
  m.layers.push_back({"truck0", "truck", "left", 20, std::nullopt, true});
  m.compatibility.push_back({"digger", "truck", {{100, 20, Verdict::kIncompatible, {}, {}}}});

  auto project = load_project(m);
  auto pair = project->compatibility.find("digger", "truck");
  REQUIRE(pair);
  CHECK(pair->matrix().incompatible_cells() == 1);
  CHECK(pair->chi(100, 20) > 50.0);
  CHECK(pair->chi(20, 20) < 2.0);
  CHECK(fs::exists(dir / "cache" / "compat_digger__truck.json"));
  CHECK(fs::exists(dir / "cache" / "compat_digger__truck.txt"));

  auto reloaded = load_project(m);
  auto again = reloaded->compatibility.find("truck", "digger");
  REQUIRE(again);
  CHECK(again->matrix() == pair->matrix());
  CHECK(again->chi(100, 20) == doctest::Approx(pair->chi(100, 20)).epsilon(1e-9));

  // A tag that repeats the current verdict without modes is a manifest error.
  m.compatibility[0].tags.push_back({100, 20, Verdict::kIncompatible, {}, {}});
  CHECK_THROWS_AS(load_project(m), AssetError);
}
