#include "loopstage/assets.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "loopstage/error.hpp"
#include "loopstage/png_io.hpp"

namespace loopstage {
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little,
              "flow and cache files assume a little-endian host");

}  // namespace

std::string numbered_flow_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.flo", index);
  return buf;
}

void FrameSequence::validate(int min_length) const {
  if (size() < min_length) {
    throw AssetError("frame sequence has " + std::to_string(size()) +
                     " frames, need at least " + std::to_string(min_length));
  }
  for (int t = 0; t < size(); ++t) {
    if (frames[t].width() != width || frames[t].height() != height) {
      throw AssetError("frame " + std::to_string(t) + " is " +
                       std::to_string(frames[t].width()) + "x" +
                       std::to_string(frames[t].height()) + ", expected " +
                       std::to_string(width) + "x" + std::to_string(height));
    }
  }
}

FrameSequence FrameSequence::from_frames(std::vector<Image> frames,
                                         double frame_rate) {
  FrameSequence seq;
  if (!frames.empty()) {
    seq.width = frames.front().width();
    seq.height = frames.front().height();
  }
  seq.frames = std::move(frames);
  seq.frame_rate = frame_rate;
  return seq;
}

void ActorSequence::validate() const {
  if (!source) throw AssetError("actor '" + id + "' has no frames");
  source->validate();
  const int n = frame_count();
  if (tracked() && static_cast<int>(boxes.size()) != n) {
    throw AssetError("actor '" + id + "' has " + std::to_string(boxes.size()) +
                     " boxes for " + std::to_string(n) + " frames");
  }
  if (!masks.empty()) {
    if (static_cast<int>(masks.size()) != n) {
      throw AssetError("actor '" + id + "' has " + std::to_string(masks.size()) +
                       " masks for " + std::to_string(n) + " frames");
    }
    for (int t = 0; t < n; ++t) {
      const Mask& m = masks[t];
      if (m.width() != source->width || m.height() != source->height) {
        throw AssetError("actor '" + id + "' mask " + std::to_string(t) +
                         " does not match frame dimensions");
      }
      if (!tracked()) continue;
      for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
          if (m.fg(x, y) && !boxes[t].contains(x, y, kBoxDilation)) {
            throw AssetError("actor '" + id + "' mask " + std::to_string(t) +
                             " has foreground outside the dilated box");
          }
        }
      }
    }
  }
  if (!flow.empty()) {
    if (static_cast<int>(flow.size()) != n) {
      throw AssetError("actor '" + id + "' flow count mismatch");
    }
    for (int t = 1; t < n; ++t) {
      if (flow[t].width() != source->width || flow[t].height() != source->height) {
        throw AssetError("actor '" + id + "' flow " + std::to_string(t) +
                         " does not match frame dimensions");
      }
    }
  }
}

Image estimate_background(const FrameSequence& seq) {
  if (seq.frames.empty()) throw AssetError("cannot estimate background of empty sequence");
  seq.validate(1);
  Image out(seq.width, seq.height);
  const std::size_t n = seq.frames.size();
  const std::size_t lo_rank = (n - 1) / 2;
  const std::size_t hi_rank = n / 2;
  auto dst = out.data();
  std::array<std::uint32_t, 256> hist;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    hist.fill(0);
    for (const Image& f : seq.frames) ++hist[f.data()[i]];
    int lo = -1;
    int hi = -1;
    std::size_t seen = 0;
    for (int v = 0; v < 256 && hi < 0; ++v) {
      seen += hist[v];
      if (lo < 0 && seen > lo_rank) lo = v;
      if (seen > hi_rank) hi = v;
    }
    dst[i] = static_cast<std::uint8_t>((lo + hi + 1) / 2);
  }
  return out;
}

Image composite_on_background(const ActorSequence& actor, int t,
                              const Image& background) {
  const Image& frame = actor.frame(t);
  if (!actor.tracked() || !actor.has_masks()) return frame;
  Image out = background;
  const Mask& mask = actor.masks[t];
  for (int y = 0; y < frame.height(); ++y) {
    for (int x = 0; x < frame.width(); ++x) {
      if (mask.fg(x, y)) {
        std::memcpy(out.at(x, y), frame.at(x, y), 3);
      }
    }
  }
  return out;
}

FlowField read_flow(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AssetError("cannot open flow file: " + path.string());
  std::uint32_t header[2];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in) throw AssetError("truncated flow header: " + path.string());
  FlowField flow(static_cast<int>(header[0]), static_cast<int>(header[1]));
  auto values = flow.data();
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size_bytes()));
  if (!in) throw AssetError("truncated flow payload: " + path.string());
  return flow;
}

void write_flow(const fs::path& path, const FlowField& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AssetError("cannot write flow file: " + path.string());
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(flow.width()),
                                   static_cast<std::uint32_t>(flow.height())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  const auto values = flow.data();
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
}

FrameSequence read_frame_directory(const fs::path& dir, double frame_rate) {
  if (!fs::is_directory(dir)) throw AssetError("missing frame directory: " + dir.string());
  std::vector<Image> frames;
  for (int t = 0;; ++t) {
    const fs::path p = dir / numbered_png_name(t);
    if (!fs::exists(p)) break;
    frames.push_back(read_png_rgb(p));
  }
  if (frames.empty()) throw AssetError("no %06d.png frames in " + dir.string());
  auto seq = FrameSequence::from_frames(std::move(frames), frame_rate);
  try {
    seq.validate(1);
  } catch (const AssetError& e) {
    throw AssetError(dir.string() + ": " + e.what());
  }
  return seq;
}

std::vector<Mask> read_mask_directory(const fs::path& dir, int expected_count) {
  std::vector<Mask> masks;
  masks.reserve(expected_count);
  for (int t = 0; t < expected_count; ++t) {
    const fs::path p = dir / numbered_png_name(t);
    if (!fs::exists(p)) throw AssetError("missing mask file: " + p.string());
    masks.push_back(read_png_mask(p));
  }
  return masks;
}

void write_mask_directory(const fs::path& dir, const std::vector<Mask>& masks) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < masks.size(); ++t) {
    write_png(dir / numbered_png_name(static_cast<int>(t)), masks[t]);
  }
}

std::vector<OrientedBox> read_boxes_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw AssetError("missing box file: " + path.string());
  std::vector<OrientedBox> boxes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.starts_with("frame")) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    int frame = -1;
    OrientedBox b;
    if (!(row >> frame >> b.cx >> b.cy >> b.width >> b.height >> b.angle)) {
      throw AssetError(path.string() + ":" + std::to_string(line_no) +
                       ": expected frame,cx,cy,w,h,angle");
    }
    if (frame != static_cast<int>(boxes.size())) {
      throw AssetError(path.string() + ":" + std::to_string(line_no) +
                       ": frames must be listed in order starting at 0");
    }
    boxes.push_back(b);
  }
  return boxes;
}

void write_boxes_csv(const fs::path& path, const std::vector<OrientedBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw AssetError("cannot write box file: " + path.string());
  out << "frame,cx,cy,w,h,angle\n";
  out.precision(17);
  for (std::size_t t = 0; t < boxes.size(); ++t) {
    const auto& b = boxes[t];
    out << t << ',' << b.cx << ',' << b.cy << ',' << b.width << ',' << b.height
        << ',' << b.angle << '\n';
  }
}

std::vector<FlowField> read_flow_directory(const fs::path& dir, int expected_count) {
  std::vector<FlowField> flow(expected_count);
  for (int t = 1; t < expected_count; ++t) {
    const fs::path p = dir / numbered_flow_name(t);
    if (!fs::exists(p)) throw AssetError("missing flow file: " + p.string());
    flow[t] = read_flow(p);
  }
  return flow;
}

}  // namespace loopstage
