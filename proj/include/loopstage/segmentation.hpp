#pragma once

#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "loopstage/assets.hpp"

namespace loopstage {

// Costs standing in for "never": large but finite so sums stay exact enough.
inline constexpr double kHardCost = 1e9;

// Binary labeling on an 8-connected pixel grid. Energy of a labeling is the
// sum of fg_cost / bg_cost per pixel plus, for every neighbouring pair with
// different labels, the pair weight.
struct GridLabelingProblem {
  int width = 0;
  int height = 0;
  std::vector<double> fg_cost;
  std::vector<double> bg_cost;
  // Weights of the edges leaving pixel (x, y) towards (x+1, y), (x, y+1),
  // (x+1, y+1) and (x-1, y+1); zero where the neighbour does not exist.
  std::vector<double> right, down, down_right, down_left;

  GridLabelingProblem() = default;
  GridLabelingProblem(int w, int h);
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

// Exact minimiser via max-flow / min-cut. Returns 1 for foreground.
std::vector<std::uint8_t> solve_min_cut(const GridLabelingProblem& problem);
double labeling_energy(const GridLabelingProblem& problem,
                       const std::vector<std::uint8_t>& labels);

struct FrameScribbles {
  std::vector<std::pair<int, int>> fg;  // (x, y)
  std::vector<std::pair<int, int>> bg;
};
// frame index -> scribbles
using ScribbleSet = std::map<int, FrameScribbles>;

// Run-length form: per frame {"fg": [[y, x0, len], ...], "bg": [...]}.
nlohmann::json scribbles_to_json(const ScribbleSet& scribbles);
ScribbleSet scribbles_from_json(const nlohmann::json& j);
// Throws InvalidRequest if a pixel is scribbled both FG and BG.
void validate_scribbles(const ScribbleSet& scribbles);

struct SegmentationParams {
  double alpha = 0.35;            // temporal vs spatial blend
  std::optional<double> sigma;    // spatial falloff; unset: half box diagonal
  double bg_unary = 0.2;          // fixed cost of labelling a pixel BG
  double seam_weight = 1.0;       // scale of the seam-hiding pairwise term
  double dilation = kBoxDilation;  // pixels outside box+dilation are hard BG
  double temporal_prior_without_mask = 0.5;
};

// Foreground cost of pixel (x, y):
//   (1 - alpha) * min(1, |X - Xc|^2 / (2 sigma^2)) + alpha * (1 - M_prev(F(X)))
// with the previous mask bilinearly sampled at the flow-warped position
// (clamped to the image). Without a previous mask the temporal factor is
// `temporal_prior_without_mask`.
double fg_unary(int x, int y, const OrientedBox& box, const Mask* previous_mask,
                const FlowField* flow, const SegmentationParams& params);

// Seam cost between adjacent pixels: low where the frame matches the
// background, normalised so each pixel contributes at most seam_weight.
double seam_cost(const Image& frame, const Image& background, int x0, int y0, int x1, int y1,
                 double seam_weight);

// Builds the min-cut problem for one frame over the box's dilated bounds.
// `region` receives the image rectangle the problem covers.
GridLabelingProblem build_segmentation_problem(const Image& frame, const Image& background,
                                               const OrientedBox& box, const Mask* previous_mask,
                                               const FlowField* flow,
                                               const FrameScribbles* scribbles,
                                               const SegmentationParams& params, Rect& region);

Mask segment_frame(const Image& frame, const Image& background, const OrientedBox& box,
                   const Mask* previous_mask, const FlowField* flow,
                   const FrameScribbles* scribbles, const SegmentationParams& params = {});

// Segments frames [from_frame, end) of a tracked actor in order, each using
// the previous frame's mask (the existing one at from_frame - 1, if any).
std::vector<Mask> segment_actor(const ActorSequence& actor, const Image& background,
                                const ScribbleSet& scribbles,
                                const SegmentationParams& params = {}, int from_frame = 0);

}  // namespace loopstage
