#include "loopstage/content_hash.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <vector>

namespace loopstage {

ContentHash& ContentHash::bytes(std::span<const std::uint8_t> data) {
  for (std::uint8_t b : data) {
    state_ ^= b;
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

ContentHash& ContentHash::text(std::string_view s) {
  integer(static_cast<std::int64_t>(s.size()));
  return bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

ContentHash& ContentHash::number(double v) {
  return integer(static_cast<std::int64_t>(std::bit_cast<std::uint64_t>(v)));
}

ContentHash& ContentHash::integer(std::int64_t v) {
  std::uint8_t raw[8];
  for (int i = 0; i < 8; ++i) raw[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i));
  return bytes(raw);
}

ContentHash& ContentHash::file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return text("<missing>");
  std::vector<std::uint8_t> buffer(1 << 16);
  std::int64_t total = 0;
  while (in) {
    in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
    const auto got = in.gcount();
    bytes({buffer.data(), static_cast<std::size_t>(got)});
    total += got;
  }
  return integer(total);
}

std::string ContentHash::hex() const { return hash_hex(state_); }

std::string hash_hex(std::uint64_t value) {
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(value));
  return out;
}

}  // namespace loopstage
