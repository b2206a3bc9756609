#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "loopstage/assets.hpp"
#include "loopstage/conjugate_gradient.hpp"
#include "loopstage/synthesis.hpp"

namespace loopstage {

inline constexpr double kCloneTolerance = 1e-4;

struct CloneResult {
  Image image;                 // background outside the mask, blended inside
  std::vector<double> values;  // unrounded RGB of every pixel, interleaved
  std::array<SolveReport, 3> channels;
};

// Gradient-domain paste of `patch` (same size as `background`) over the mask:
// solves the 4-neighbour Poisson equation on the mask with the patch's
// gradients as guidance and the background as Dirichlet boundary. Image
// borders act as Neumann boundaries. An empty mask returns the background.
CloneResult seamless_clone(const Image& patch, const Mask& mask, const Image& background,
                           double tolerance = kCloneTolerance);

// Index of the candidate whose colour differs most from `background`
// (squared RGB distance); the lowest index wins ties.
int resolve_occlusion(std::span<const std::array<std::uint8_t, 3>> candidates,
                      const std::uint8_t* background);

enum class RenderQuality { kLive, kFinal };

struct RenderJob {
  const OutputTimeline* timeline = nullptr;
  Image background;
  // One actor per timeline layer, same order.
  std::vector<std::shared_ptr<const ActorSequence>> actors;
  RenderQuality quality = RenderQuality::kFinal;
  bool clone_before_resolve = true;
};

inline constexpr std::int16_t kBackgroundSource = -1;

struct RenderedFrame {
  Image image;
  std::vector<std::int16_t> source;  // per pixel: layer index or kBackgroundSource
};

// Pixels a tracked actor covers in frame t: its mask, or its box when unsegmented.
Mask coverage_mask(const ActorSequence& actor, int t);

RenderedFrame render_frame(const RenderJob& job, int column);

// Writes numbered PNGs for every column into `dir` using up to `threads`
// workers (0 = hardware concurrency).
void render_timeline(const RenderJob& job, const std::filesystem::path& dir, int threads = 0);

}  // namespace loopstage
