#include "loopstage/frame_metric.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "loopstage/error.hpp"

namespace loopstage {
namespace {

constexpr char kCacheMagic[4] = {'L', 'S', 'D', 'M'};
constexpr std::uint32_t kCacheVersion = 1;

// Colour of frame t at (x, y) after compositing the tracked patch on the
// background.
const std::uint8_t* patch_pixel(const ActorSequence& actor, int t, int x, int y,
                                const Image& background) {
  if (actor.has_masks()) {
    return actor.masks[t].fg(x, y) ? actor.frame(t).at(x, y)
                                   : background.at(x, y);
  }
  return actor.boxes[t].contains(x, y, kBoxDilation) ? actor.frame(t).at(x, y)
                                                     : background.at(x, y);
}

double full_frame_distance(const Image& a, const Image& b) {
  const auto pa = a.data();
  const auto pb = b.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(a.pixel_count());
}

}  // namespace

DistanceMatrix DistanceMatrix::subsampled(int stride, int limit) const {
  std::vector<int> keep;
  for (int t = 0; t < std::min(limit, n_); t += stride) keep.push_back(t);
  DistanceMatrix out(static_cast<int>(keep.size()), actor_id_);
  for (std::size_t a = 0; a < keep.size(); ++a) {
    for (std::size_t b = a; b < keep.size(); ++b) {
      out.set(static_cast<int>(a), static_cast<int>(b), at(keep[a], keep[b]));
    }
  }
  return out;
}

std::optional<double> frame_distance(const ActorSequence& actor, int t, int t2,
                                     const Image& background) {
  const int n = actor.frame_count();
  if (t < 0 || t2 < 0 || t >= n || t2 >= n) {
    throw InvalidRequest("frame index out of range for actor '" + actor.id + "'");
  }
  if (t == t2) return 0.0;
  if (!actor.tracked()) return full_frame_distance(actor.frame(t), actor.frame(t2));

  const int w = actor.source->width;
  const int h = actor.source->height;
  const OrientedBox& ba = actor.boxes[t];
  const OrientedBox& bb = actor.boxes[t2];
  const Rect region = ba.bounds(kBoxDilation).united(bb.bounds(kBoxDilation)).clipped(w, h);

  std::size_t overlap = 0;
  double sum = 0.0;
  for (int y = region.y0; y < region.y1; ++y) {
    for (int x = region.x0; x < region.x1; ++x) {
      if (ba.contains(x, y) && bb.contains(x, y)) ++overlap;
      if (!ba.contains(x, y, kBoxDilation) && !bb.contains(x, y, kBoxDilation)) continue;
      sum += squared_color_distance(patch_pixel(actor, t, x, y, background),
                                    patch_pixel(actor, t2, x, y, background));
    }
  }
  if (overlap == 0) return std::nullopt;
  return sum / static_cast<double>(overlap);
}

DistanceMatrix build_distance_matrix(const ActorSequence& actor,
                                     const Image& background, int threads) {
  const int n = actor.frame_count();
  DistanceMatrix matrix(n, actor.id);
  std::vector<std::uint8_t> disjoint(static_cast<std::size_t>(n) * n, 0);
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, std::max(1, n));

  std::atomic<int> next_row{0};
  auto work = [&] {
    for (int a = next_row++; a < n; a = next_row++) {
      for (int b = a + 1; b < n; ++b) {
        const auto d = frame_distance(actor, a, b, background);
        if (d) {
          matrix.set(a, b, static_cast<float>(*d));
        } else {
          disjoint[static_cast<std::size_t>(a) * n + b] = 1;
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 1; i < threads; ++i) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();

  float largest = 0.0f;
  for (float v : matrix.values()) largest = std::max(largest, v);
  // With no finite distance at all there is no scale; fall back to 1.
  const float sentinel = 10.0f * (largest > 0.0f ? largest : 1.0f);
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if (disjoint[static_cast<std::size_t>(a) * n + b]) matrix.set(a, b, sentinel);
    }
  }
  return matrix;
}

double JumpGraph::median_distance() const {
  std::vector<float> all;
  for (const auto& list : candidates) {
    for (const auto& c : list) {
      if (c.distance > 0.0f) all.push_back(c.distance);
    }
  }
  if (all.empty()) return 0.0;
  const std::size_t mid = all.size() / 2;
  std::nth_element(all.begin(), all.begin() + mid, all.end());
  if (all.size() % 2 == 1) return all[mid];
  const float upper = all[mid];
  const float lower = *std::max_element(all.begin(), all.begin() + mid);
  return 0.5 * (static_cast<double>(lower) + upper);
}

JumpGraph build_jump_graph(const DistanceMatrix& matrix, int candidate_count) {
  const int n = matrix.size();
  JumpGraph graph;
  graph.frame_count = n;
  graph.requested_candidates = candidate_count;
  graph.candidates.resize(n);
  for (int t = 0; t < n; ++t) {
    std::vector<JumpCandidate> all;
    all.reserve(n);
    for (int u = 0; u < n; ++u) {
      if (u == t || u == t + 1) continue;
      all.push_back({u, matrix.at(t, u)});
    }
    const auto keep = std::min<std::size_t>(std::max(0, candidate_count), all.size());
    auto by_distance = [](const JumpCandidate& a, const JumpCandidate& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.frame < b.frame);
    };
    std::partial_sort(all.begin(), all.begin() + keep, all.end(), by_distance);
    all.resize(keep);
    graph.candidates[t] = std::move(all);
  }
  return graph;
}

void save_metric_cache(const std::filesystem::path& path, std::uint64_t hash,
                       const DistanceMatrix& matrix, const JumpGraph& graph) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AssetError("cannot write cache file: " + path.string());
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  out.write(kCacheMagic, 4);
  put_u32(kCacheVersion);
  out.write(reinterpret_cast<const char*>(&hash), 8);
  put_u32(static_cast<std::uint32_t>(matrix.size()));
  const auto values = matrix.values();
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
  put_u32(static_cast<std::uint32_t>(graph.requested_candidates));
  for (const auto& list : graph.candidates) {
    put_u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& c : list) {
      put_u32(static_cast<std::uint32_t>(c.frame));
      out.write(reinterpret_cast<const char*>(&c.distance), 4);
    }
  }
}

std::optional<MetricCache> load_metric_cache(const std::filesystem::path& path,
                                             std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) return std::nullopt;
  if (get_u32() != kCacheVersion) return std::nullopt;
  std::uint64_t hash = 0;
  in.read(reinterpret_cast<char*>(&hash), 8);
  if (!in || hash != expected_hash) return std::nullopt;
  const int n = static_cast<int>(get_u32());
  MetricCache cache{DistanceMatrix(n), JumpGraph{}};
  auto values = cache.matrix.mutable_values();
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size_bytes()));
  cache.graph.frame_count = n;
  cache.graph.requested_candidates = static_cast<int>(get_u32());
  cache.graph.candidates.resize(n);
  for (int t = 0; t < n && in; ++t) {
    const std::uint32_t count = get_u32();
    if (count > static_cast<std::uint32_t>(n)) return std::nullopt;
    auto& list = cache.graph.candidates[t];
    list.resize(count);
    for (auto& c : list) {
      c.frame = static_cast<int>(get_u32());
      in.read(reinterpret_cast<char*>(&c.distance), 4);
    }
  }
  if (!in) return std::nullopt;
  return cache;
}

}  // namespace loopstage
