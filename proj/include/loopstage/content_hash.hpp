#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace loopstage {

// 64-bit FNV-1a, used to key on-disk caches by the bytes they derive from.
class ContentHash {
 public:
  ContentHash& bytes(std::span<const std::uint8_t> data);
  ContentHash& text(std::string_view s);
  ContentHash& number(double v);
  ContentHash& integer(std::int64_t v);
  // Hashes the file contents; a missing file hashes as a marker string.
  ContentHash& file(const std::filesystem::path& path);

  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::uint64_t value);

}  // namespace loopstage
