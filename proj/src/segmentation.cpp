#include "loopstage/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "loopstage/error.hpp"
#include "loopstage/maxflow.hpp"

namespace loopstage {
namespace {

// Largest possible RGB distance, sqrt(3) * 255.
constexpr double kMaxColorNorm = 441.6729559300637;

double sample_mask_bilinear(const Mask& mask, double fx, double fy) {
  const double x = std::clamp(fx, 0.0, static_cast<double>(mask.width() - 1));
  const double y = std::clamp(fy, 0.0, static_cast<double>(mask.height() - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, mask.width() - 1);
  const int y1 = std::min(y0 + 1, mask.height() - 1);
  const double ax = x - x0;
  const double ay = y - y0;
  auto m = [&](int px, int py) { return mask.fg(px, py) ? 1.0 : 0.0; };
  return (1 - ay) * ((1 - ax) * m(x0, y0) + ax * m(x1, y0)) +
         ay * ((1 - ax) * m(x0, y1) + ax * m(x1, y1));
}

double background_difference(const Image& frame, const Image& background, int x, int y) {
  return std::sqrt(squared_color_distance(frame.at(x, y), background.at(x, y))) / kMaxColorNorm;
}

void append_runs(nlohmann::json& out, std::vector<std::pair<int, int>> pixels) {
  std::sort(pixels.begin(), pixels.end(),
            [](const auto& a, const auto& b) { return std::tie(a.second, a.first) < std::tie(b.second, b.first); });
  pixels.erase(std::unique(pixels.begin(), pixels.end()), pixels.end());
  std::size_t i = 0;
  while (i < pixels.size()) {
    const int y = pixels[i].second;
    const int x0 = pixels[i].first;
    int len = 1;
    while (i + len < pixels.size() && pixels[i + len].second == y &&
           pixels[i + len].first == x0 + len) {
      ++len;
    }
    out.push_back({y, x0, len});
    i += len;
  }
}

std::vector<std::pair<int, int>> expand_runs(const nlohmann::json& runs) {
  std::vector<std::pair<int, int>> pixels;
  for (const auto& run : runs) {
    const int y = run.at(0).get<int>();
    const int x0 = run.at(1).get<int>();
    const int len = run.at(2).get<int>();
    for (int k = 0; k < len; ++k) pixels.emplace_back(x0 + k, y);
  }
  return pixels;
}

}  // namespace

GridLabelingProblem::GridLabelingProblem(int w, int h)
    : width(w), height(h),
      fg_cost(static_cast<std::size_t>(w) * h, 0.0),
      bg_cost(static_cast<std::size_t>(w) * h, 0.0),
      right(static_cast<std::size_t>(w) * h, 0.0),
      down(static_cast<std::size_t>(w) * h, 0.0),
      down_right(static_cast<std::size_t>(w) * h, 0.0),
      down_left(static_cast<std::size_t>(w) * h, 0.0) {}

std::vector<std::uint8_t> solve_min_cut(const GridLabelingProblem& p) {
  const int n = p.width * p.height;
  const int source = n;
  const int sink = n + 1;
  MaxFlow flow(n + 2);
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      const auto i = p.index(x, y);
      const int v = static_cast<int>(i);
      // Source side = foreground: cutting source->v pays bg, v->sink pays fg.
      const double base = std::min(p.fg_cost[i], p.bg_cost[i]);
      const double to_bg = p.bg_cost[i] - base;
      const double to_fg = p.fg_cost[i] - base;
      if (to_bg > 0.0) flow.add_edge(source, v, to_bg);
      if (to_fg > 0.0) flow.add_edge(v, sink, to_fg);
      if (x + 1 < p.width && p.right[i] > 0.0) {
        flow.add_edge(v, static_cast<int>(p.index(x + 1, y)), p.right[i], p.right[i]);
      }
      if (y + 1 < p.height) {
        if (p.down[i] > 0.0) {
          flow.add_edge(v, static_cast<int>(p.index(x, y + 1)), p.down[i], p.down[i]);
        }
        if (x + 1 < p.width && p.down_right[i] > 0.0) {
          flow.add_edge(v, static_cast<int>(p.index(x + 1, y + 1)), p.down_right[i],
                        p.down_right[i]);
        }
        if (x > 0 && p.down_left[i] > 0.0) {
          flow.add_edge(v, static_cast<int>(p.index(x - 1, y + 1)), p.down_left[i],
                        p.down_left[i]);
        }
      }
    }
  }
  flow.solve(source, sink);
  std::vector<std::uint8_t> labels(n);
  for (int v = 0; v < n; ++v) labels[v] = flow.source_side(v) ? 1 : 0;
  return labels;
}

double labeling_energy(const GridLabelingProblem& p, const std::vector<std::uint8_t>& labels) {
  double e = 0.0;
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      const auto i = p.index(x, y);
      const bool fg = labels[i] != 0;
      e += fg ? p.fg_cost[i] : p.bg_cost[i];
      auto differs = [&](int qx, int qy) { return (labels[p.index(qx, qy)] != 0) != fg; };
      if (x + 1 < p.width && differs(x + 1, y)) e += p.right[i];
      if (y + 1 < p.height) {
        if (differs(x, y + 1)) e += p.down[i];
        if (x + 1 < p.width && differs(x + 1, y + 1)) e += p.down_right[i];
        if (x > 0 && differs(x - 1, y + 1)) e += p.down_left[i];
      }
    }
  }
  return e;
}

nlohmann::json scribbles_to_json(const ScribbleSet& scribbles) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [frame, s] : scribbles) {
    nlohmann::json entry;
    entry["fg"] = nlohmann::json::array();
    entry["bg"] = nlohmann::json::array();
    append_runs(entry["fg"], s.fg);
    append_runs(entry["bg"], s.bg);
    out[std::to_string(frame)] = std::move(entry);
  }
  return out;
}

ScribbleSet scribbles_from_json(const nlohmann::json& j) {
  ScribbleSet out;
  for (const auto& [key, entry] : j.items()) {
    FrameScribbles s;
    if (entry.contains("fg")) s.fg = expand_runs(entry["fg"]);
    if (entry.contains("bg")) s.bg = expand_runs(entry["bg"]);
    out[std::stoi(key)] = std::move(s);
  }
  validate_scribbles(out);
  return out;
}

void validate_scribbles(const ScribbleSet& scribbles) {
  for (const auto& [frame, s] : scribbles) {
    const std::set<std::pair<int, int>> fg(s.fg.begin(), s.fg.end());
    for (const auto& px : s.bg) {
      if (fg.count(px)) {
        throw InvalidRequest("frame " + std::to_string(frame) + " pixel (" +
                             std::to_string(px.first) + "," + std::to_string(px.second) +
                             ") is scribbled both FG and BG");
      }
    }
  }
}

double fg_unary(int x, int y, const OrientedBox& box, const Mask* previous_mask,
                const FlowField* flow, const SegmentationParams& params) {
  const double sigma = params.sigma.value_or(box.diagonal() / 2.0);
  const double dx = x + 0.5 - box.cx;
  const double dy = y + 0.5 - box.cy;
  const double spatial =
      sigma > 0.0 ? std::min(1.0, (dx * dx + dy * dy) / (2.0 * sigma * sigma)) : 1.0;

  double temporal = params.temporal_prior_without_mask;
  if (previous_mask != nullptr) {
    double px = x;
    double py = y;
    if (flow != nullptr && !flow->empty()) {
      const auto offset = flow->at(x, y);
      px += offset[0];
      py += offset[1];
    }
    temporal = 1.0 - sample_mask_bilinear(*previous_mask, px, py);
  }
  return (1.0 - params.alpha) * spatial + params.alpha * temporal;
}

double seam_cost(const Image& frame, const Image& background, int x0, int y0, int x1, int y1,
                 double seam_weight) {
  return seam_weight * 0.5 *
         (background_difference(frame, background, x0, y0) +
          background_difference(frame, background, x1, y1));
}

GridLabelingProblem build_segmentation_problem(const Image& frame, const Image& background,
                                               const OrientedBox& box, const Mask* previous_mask,
                                               const FlowField* flow,
                                               const FrameScribbles* scribbles,
                                               const SegmentationParams& params, Rect& region) {
  region = box.bounds(params.dilation).clipped(frame.width(), frame.height());
  GridLabelingProblem p(region.width(), region.height());
  auto seam = [&](int ax, int ay, int bx, int by) {
    return seam_cost(frame, background, ax, ay, bx, by, params.seam_weight);
  };
  for (int ly = 0; ly < p.height; ++ly) {
    for (int lx = 0; lx < p.width; ++lx) {
      const int x = region.x0 + lx;
      const int y = region.y0 + ly;
      const auto i = p.index(lx, ly);
      p.bg_cost[i] = params.bg_unary;
      p.fg_cost[i] = box.contains(x, y, params.dilation)
                         ? fg_unary(x, y, box, previous_mask, flow, params)
                         : kHardCost;
      // Neighbours outside the region are background; a foreground pixel here
      // pays the seam towards them.
      for (int oy = -1; oy <= 1; ++oy) {
        for (int ox = -1; ox <= 1; ++ox) {
          if (ox == 0 && oy == 0) continue;
          const int qx = x + ox;
          const int qy = y + oy;
          if (qx < 0 || qy < 0 || qx >= frame.width() || qy >= frame.height()) continue;
          if (region.contains(qx, qy)) continue;
          p.fg_cost[i] += seam(x, y, qx, qy);
        }
      }
      if (lx + 1 < p.width) p.right[i] = seam(x, y, x + 1, y);
      if (ly + 1 < p.height) {
        p.down[i] = seam(x, y, x, y + 1);
        if (lx + 1 < p.width) p.down_right[i] = seam(x, y, x + 1, y + 1);
        if (lx > 0) p.down_left[i] = seam(x, y, x - 1, y + 1);
      }
    }
  }
  if (scribbles != nullptr) {
    for (const auto& [x, y] : scribbles->fg) {
      if (!box.contains(x, y, params.dilation) || !region.contains(x, y)) {
        throw InvalidRequest("FG scribble at (" + std::to_string(x) + "," + std::to_string(y) +
                             ") lies outside the dilated bounding box");
      }
      const auto i = p.index(x - region.x0, y - region.y0);
      p.fg_cost[i] = 0.0;
      p.bg_cost[i] = kHardCost;
    }
    for (const auto& [x, y] : scribbles->bg) {
      if (!region.contains(x, y)) continue;
      const auto i = p.index(x - region.x0, y - region.y0);
      p.fg_cost[i] = kHardCost;
      p.bg_cost[i] = 0.0;
    }
  }
  return p;
}

Mask segment_frame(const Image& frame, const Image& background, const OrientedBox& box,
                   const Mask* previous_mask, const FlowField* flow,
                   const FrameScribbles* scribbles, const SegmentationParams& params) {
  if (!frame.same_size(background)) {
    throw InvalidRequest("frame and background dimensions differ");
  }
  Rect region;
  const GridLabelingProblem problem = build_segmentation_problem(
      frame, background, box, previous_mask, flow, scribbles, params, region);
  Mask mask(frame.width(), frame.height());
  if (region.empty()) return mask;
  const auto labels = solve_min_cut(problem);
  for (int ly = 0; ly < problem.height; ++ly) {
    for (int lx = 0; lx < problem.width; ++lx) {
      if (labels[problem.index(lx, ly)]) mask.set(region.x0 + lx, region.y0 + ly, true);
    }
  }
  return mask;
}

std::vector<Mask> segment_actor(const ActorSequence& actor, const Image& background,
                                const ScribbleSet& scribbles, const SegmentationParams& params,
                                int from_frame) {
  if (!actor.tracked()) {
    throw InvalidRequest("actor '" + actor.id + "' is full-frame and needs no segmentation");
  }
  validate_scribbles(scribbles);
  const int n = actor.frame_count();
  if (from_frame < 0 || from_frame >= n) throw InvalidRequest("start frame out of range");
  std::vector<Mask> masks = actor.masks;
  masks.resize(n);
  for (int t = from_frame; t < n; ++t) {
    const Mask* previous = (t > 0 && !masks[t - 1].empty()) ? &masks[t - 1] : nullptr;
    const FlowField* flow = (t > 0 && actor.has_flow()) ? &actor.flow[t] : nullptr;
    auto it = scribbles.find(t);
    masks[t] = segment_frame(actor.frame(t), background, actor.boxes[t], previous, flow,
                             it == scribbles.end() ? nullptr : &it->second, params);
  }
  return masks;
}

}  // namespace loopstage
