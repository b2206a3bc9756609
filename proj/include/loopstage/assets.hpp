#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "loopstage/geometry.hpp"
#include "loopstage/image.hpp"

namespace loopstage {

// Ordered frames of an input video with identical dimensions.
struct FrameSequence {
  std::vector<Image> frames;
  int width = 0;
  int height = 0;
  double frame_rate = 25.0;

  int size() const { return static_cast<int>(frames.size()); }

  // Throws AssetError unless every frame matches (width, height) and there
  // are at least `min_length` frames.
  void validate(int min_length = 2) const;

  static FrameSequence from_frames(std::vector<Image> frames,
                                   double frame_rate = 25.0);
};

// Dense backward optical flow for one frame: per pixel (dx, dy) such that
// pixel (x, y) of frame t came from (x + dx, y + dy) in frame t - 1.
class FlowField {
 public:
  FlowField() = default;
  FlowField(int width, int height)
      : width_(width), height_(height),
        values_(static_cast<std::size_t>(width) * height * 2, 0.0f) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return values_.empty(); }

  std::array<float, 2> at(int x, int y) const {
    const auto i = (static_cast<std::size_t>(y) * width_ + x) * 2;
    return {values_[i], values_[i + 1]};
  }
  void set(int x, int y, float dx, float dy) {
    const auto i = (static_cast<std::size_t>(y) * width_ + x) * 2;
    values_[i] = dx;
    values_[i + 1] = dy;
  }

  std::span<float> data() { return values_; }
  std::span<const float> data() const { return values_; }
  friend bool operator==(const FlowField&, const FlowField&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> values_;
};

// Binary layout: u32 width, u32 height, then width*height*2 little-endian
// float32 values (dx, dy) row-major.
FlowField read_flow(const std::filesystem::path& path);
void write_flow(const std::filesystem::path& path, const FlowField& flow);

enum class ActorKind { kFullFrame, kTracked };

// One controllable element: either the whole frame or a tracked patch.
struct ActorSequence {
  std::string id;
  std::shared_ptr<const FrameSequence> source;
  ActorKind kind = ActorKind::kFullFrame;
  std::vector<OrientedBox> boxes;   // one per frame when tracked
  std::vector<Mask> masks;          // one per frame once segmented
  std::vector<FlowField> flow;      // flow[0] is unused

  int frame_count() const { return source ? source->size() : 0; }
  const Image& frame(int t) const { return source->frames.at(t); }
  bool tracked() const { return kind == ActorKind::kTracked; }
  bool has_masks() const { return !masks.empty(); }
  bool has_flow() const { return !flow.empty(); }

  void validate() const;
};

// Per-pixel, per-channel temporal median. Even counts average the two middle
// values, rounding halves up.
Image estimate_background(const FrameSequence& seq);

// The tracked patch of frame t (masked pixels) placed over `background`.
// Untracked or unsegmented actors return the frame itself.
Image composite_on_background(const ActorSequence& actor, int t,
                              const Image& background);

// Reads `%06d.png` files starting at 000000 until the first gap.
FrameSequence read_frame_directory(const std::filesystem::path& dir,
                                   double frame_rate);
std::vector<Mask> read_mask_directory(const std::filesystem::path& dir,
                                      int expected_count);
void write_mask_directory(const std::filesystem::path& dir,
                          const std::vector<Mask>& masks);

// CSV with header `frame,cx,cy,w,h,angle`, one row per frame in order.
std::vector<OrientedBox> read_boxes_csv(const std::filesystem::path& path);
void write_boxes_csv(const std::filesystem::path& path,
                     const std::vector<OrientedBox>& boxes);

// Flow files `%06d.flo` for frames 1..count-1.
std::string numbered_flow_name(int index);
std::vector<FlowField> read_flow_directory(const std::filesystem::path& dir,
                                           int expected_count);

}  // namespace loopstage
