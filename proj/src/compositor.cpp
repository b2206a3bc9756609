#include "loopstage/compositor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "loopstage/error.hpp"
#include "loopstage/png_io.hpp"

namespace loopstage {
namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

CloneResult seamless_clone(const Image& patch, const Mask& mask, const Image& background,
                           double tolerance) {
  if (!patch.same_size(background) || mask.width() != background.width() ||
      mask.height() != background.height()) {
    throw InvalidRequest("seamless_clone: patch, mask and background sizes differ");
  }
  const int w = background.width();
  const int h = background.height();
  CloneResult result;
  result.image = background;
  result.values.resize(background.pixel_count() * 3);
  for (std::size_t i = 0; i < result.values.size(); ++i) {
    result.values[i] = background.data()[i];
  }

  // Unknowns are the mask pixels, numbered in scan order.
  std::vector<int> unknown(background.pixel_count(), -1);
  std::vector<int> pixels;
  bool has_boundary = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.fg(x, y)) continue;
      unknown[static_cast<std::size_t>(y) * w + x] = static_cast<int>(pixels.size());
      pixels.push_back(y * w + x);
    }
  }
  if (pixels.empty()) return result;

  const int n = static_cast<int>(pixels.size());
  CsrMatrix a;
  a.rows = n;
  a.row_start.push_back(0);
  std::vector<double> diagonal(n);
  std::array<std::vector<double>, 3> rhs;
  for (auto& b : rhs) b.assign(n, 0.0);
  constexpr int kDx[4] = {1, -1, 0, 0};
  constexpr int kDy[4] = {0, 0, 1, -1};
  for (int i = 0; i < n; ++i) {
    const int x = pixels[i] % w;
    const int y = pixels[i] / w;
    const std::uint8_t* gp = patch.at(x, y);
    int neighbours = 0;
    for (int k = 0; k < 4; ++k) {
      const int qx = x + kDx[k];
      const int qy = y + kDy[k];
      if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
      ++neighbours;
      const std::uint8_t* gq = patch.at(qx, qy);
      for (int c = 0; c < 3; ++c) rhs[c][i] += static_cast<double>(gp[c]) - gq[c];
      const int j = unknown[static_cast<std::size_t>(qy) * w + qx];
      if (j >= 0) {
        a.column.push_back(j);
        a.value.push_back(-1.0);
      } else {
        has_boundary = true;
        const std::uint8_t* bq = background.at(qx, qy);
        for (int c = 0; c < 3; ++c) rhs[c][i] += bq[c];
      }
    }
    a.column.push_back(i);
    a.value.push_back(neighbours);
    diagonal[i] = neighbours;
    a.row_start.push_back(static_cast<int>(a.column.size()));
  }
  if (!has_boundary) {
    // No Dirichlet pixels: the system is singular, keep the patch as is.
    for (int i = 0; i < n; ++i) {
      const int x = pixels[i] % w;
      const int y = pixels[i] / w;
      result.image.set(x, y, {patch.at(x, y)[0], patch.at(x, y)[1], patch.at(x, y)[2]});
      for (int c = 0; c < 3; ++c) result.values[static_cast<std::size_t>(pixels[i]) * 3 + c] = patch.at(x, y)[c];
    }
    return result;
  }

  auto apply = [&a](std::span<const double> x, std::span<double> y) { a.multiply(x, y); };
  const int max_iterations = 10 * n;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i) {
      x[i] = patch.data()[static_cast<std::size_t>(pixels[i]) * 3 + c];
    }
    result.channels[c] = conjugate_gradient(apply, diagonal, rhs[c], x, tolerance, max_iterations);
    for (int i = 0; i < n; ++i) {
      result.values[static_cast<std::size_t>(pixels[i]) * 3 + c] = x[i];
      result.image.data()[static_cast<std::size_t>(pixels[i]) * 3 + c] = to_byte(x[i]);
    }
  }
  return result;
}

int resolve_occlusion(std::span<const std::array<std::uint8_t, 3>> candidates,
                      const std::uint8_t* background) {
  int best = -1;
  int best_difference = -1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const int d = squared_color_distance(candidates[i].data(), background);
    if (d > best_difference) {
      best = static_cast<int>(i);
      best_difference = d;
    }
  }
  return best;
}

Mask coverage_mask(const ActorSequence& actor, int t) {
  if (actor.has_masks()) return actor.masks.at(t);
  const Image& frame = actor.frame(t);
  Mask mask(frame.width(), frame.height());
  if (!actor.tracked()) {
    std::fill(mask.data().begin(), mask.data().end(), 1);
    return mask;
  }
  const OrientedBox& box = actor.boxes.at(t);
  const Rect r = box.bounds().clipped(frame.width(), frame.height());
  for (int y = r.y0; y < r.y1; ++y) {
    for (int x = r.x0; x < r.x1; ++x) {
      if (box.contains(x, y)) mask.set(x, y, true);
    }
  }
  return mask;
}

RenderedFrame render_frame(const RenderJob& job, int column) {
  if (job.timeline == nullptr) throw InvalidRequest("render job has no timeline");
  const OutputTimeline& timeline = *job.timeline;
  if (column < 0 || column >= timeline.columns()) {
    throw InvalidRequest("render column " + std::to_string(column) + " out of range");
  }
  if (job.actors.size() != timeline.layers.size()) {
    throw InvalidRequest("render job needs one actor per layer");
  }
  const Image& bg = job.background;
  const int w = bg.width();
  const int h = bg.height();
  RenderedFrame out;
  out.image = bg;
  out.source.assign(bg.pixel_count(), kBackgroundSource);

  struct Layer {
    int index;
    Mask mask;
    const Image* colors;
    Image cloned;
  };
  std::vector<Layer> tracked;
  for (std::size_t d = 0; d < job.actors.size(); ++d) {
    const ActorSequence& actor = *job.actors[d];
    const int t = timeline.layers[d].frames[column];
    if (t < 0 || t >= actor.frame_count()) {
      throw InvalidRequest("layer " + timeline.layers[d].layer_id + " references missing frame " +
                           std::to_string(t));
    }
    if (!actor.frame(t).same_size(bg)) throw InvalidRequest("actor frame size differs from background");
    if (!actor.tracked()) {
      // Full-frame actors replace everything below them.
      out.image = actor.frame(t);
      std::fill(out.source.begin(), out.source.end(), static_cast<std::int16_t>(d));
      tracked.clear();
      continue;
    }
    tracked.push_back({static_cast<int>(d), coverage_mask(actor, t), &actor.frame(t), {}});
  }
  if (tracked.empty()) return out;

  const bool clone = job.quality == RenderQuality::kFinal;
  if (clone && job.clone_before_resolve) {
    for (Layer& l : tracked) {
      l.cloned = seamless_clone(*l.colors, l.mask, bg).image;
      l.colors = &l.cloned;
    }
  }

  // Per-pixel winner among the layers covering it.
  std::vector<int> winner(bg.pixel_count(), -1);
  std::vector<std::array<std::uint8_t, 3>> candidates;
  std::vector<int> owners;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      candidates.clear();
      owners.clear();
      for (std::size_t i = 0; i < tracked.size(); ++i) {
        if (!tracked[i].mask.fg(x, y)) continue;
        const std::uint8_t* p = tracked[i].colors->at(x, y);
        candidates.push_back({p[0], p[1], p[2]});
        owners.push_back(static_cast<int>(i));
      }
      if (candidates.empty()) continue;
      winner[static_cast<std::size_t>(y) * w + x] = owners[resolve_occlusion(candidates, bg.at(x, y))];
    }
  }

  if (clone && !job.clone_before_resolve) {
    for (std::size_t i = 0; i < tracked.size(); ++i) {
      Mask won(w, h);
      for (std::size_t p = 0; p < winner.size(); ++p) won.data()[p] = winner[p] == static_cast<int>(i);
      tracked[i].cloned = seamless_clone(*tracked[i].colors, won, bg).image;
      tracked[i].colors = &tracked[i].cloned;
    }
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      if (winner[p] < 0) continue;
      const Layer& l = tracked[winner[p]];
      const std::uint8_t* c = l.colors->at(x, y);
      out.image.set(x, y, {c[0], c[1], c[2]});
      out.source[p] = static_cast<std::int16_t>(l.index);
    }
  }
  return out;
}

void render_timeline(const RenderJob& job, const std::filesystem::path& dir, int threads) {
  std::filesystem::create_directories(dir);
  const int columns = job.timeline == nullptr ? 0 : job.timeline->columns();
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, std::max(columns, 1));
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    try {
      for (int k = next++; k < columns; k = next++) {
        write_png(dir / numbered_png_name(k), render_frame(job, k).image);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = columns;
    }
  };
  std::vector<std::thread> pool;
  for (int i = 1; i < threads; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace loopstage
