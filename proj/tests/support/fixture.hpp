#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "loopstage/png_io.hpp"
#include "loopstage/project.hpp"

namespace loopstage::testing {

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("loopstage_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Full-frame actor whose frames fall into one block per action: inside block
// a, a bright bar oscillates around x = a * width / actions, so frames of
// the same action are close and different actions are far apart.
struct BlockActor {
  std::string id = "candle";
  std::vector<std::string> actions = {"left", "center", "right"};
  int frames_per_action = 40;
  double period = 10.7;
  int width = 48;
  int height = 16;
};

inline Image block_actor_frame(const BlockActor& spec, int t) {
  const int a = t / spec.frames_per_action;
  const int slot = spec.width / static_cast<int>(spec.actions.size());
  const double phase = 2.0 * 3.14159265358979 * t / spec.period;
  const double bar = a * slot + slot / 2 + 4.0 * std::sin(phase);
  Image img(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      // Anti-aliased bar so the frames vary continuously with the phase.
      const double lit = std::max(0.0, 1.0 - std::abs(x - bar) / 2.0);
      const double base = 40 + (x + y) % 7;
      auto mix = [&](double on) { return static_cast<std::uint8_t>(std::lround(base + lit * (on - base))); };
      img.set(x, y, {mix(220), mix(180), mix(60)});
    }
  }
  return img;
}

// Writes the frames under `dir/frames_<id>` and returns the actor spec.
inline ActorSpec write_block_actor(const std::filesystem::path& dir, const BlockActor& spec) {
  const std::string frames = "frames_" + spec.id;
  std::filesystem::create_directories(dir / frames);
  const int n = spec.frames_per_action * static_cast<int>(spec.actions.size());
  for (int t = 0; t < n; ++t) write_png(dir / frames / numbered_png_name(t), block_actor_frame(spec, t));
  ActorSpec a;
  a.id = spec.id;
  a.kind = ActorKind::kFullFrame;
  a.frames = frames;
  const std::string keys = "asdfghjkl";
  for (std::size_t i = 0; i < spec.actions.size(); ++i) {
    a.actions.push_back({spec.actions[i], spec.actions[i], std::string(1, keys[i % keys.size()])});
    const int first = static_cast<int>(i) * spec.frames_per_action;
    a.examples[spec.actions[i]] = {first + spec.frames_per_action / 2};
  }
  return a;
}

// One block actor shown on `layers` output layers.
inline ProjectManifest block_project(const std::filesystem::path& dir, int layers,
                                     const BlockActor& spec = {}) {
  ProjectManifest m;
  m.name = "synthetic";
  m.base_dir = dir;
  m.actors.push_back(write_block_actor(dir, spec));
  for (int d = 0; d < layers; ++d) {
    LayerSpec l;
    l.id = spec.id + std::to_string(d);
    l.actor = spec.id;
    l.default_action = spec.actions.front();
    l.initial_frame = spec.frames_per_action / 2;
    m.layers.push_back(l);
  }
  m.parameters.synthesis.sigma_a = 0.3;
  m.parameters.jump_candidates = 16;
  m.parameters.propagation.knn = 10;
  return m;
}

}  // namespace loopstage::testing
