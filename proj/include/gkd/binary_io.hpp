#pragma once

// Little-endian byte streams and the decode errors shared by the model and
// dataset file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gkd {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

enum class DecodeErrorKind { bad_magic, bad_version, truncated, non_monotone_indices, malformed };

inline const char* to_string(DecodeErrorKind k) {
  switch (k) {
    case DecodeErrorKind::bad_magic: return "bad magic";
    case DecodeErrorKind::bad_version: return "unsupported version";
    case DecodeErrorKind::truncated: return "truncated";
    case DecodeErrorKind::non_monotone_indices: return "non-monotone sparse indices";
    case DecodeErrorKind::malformed: return "malformed";
  }
  return "?";
}

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
  DecodeErrorKind kind() const noexcept { return kind_; }

 private:
  DecodeErrorKind kind_;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void text(std::string_view s) { raw(s.data(), s.size()); }

  const std::vector<std::uint8_t>& bytes() const& { return bytes_; }
  std::vector<std::uint8_t> bytes() && { return std::move(bytes_); }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return take<std::uint16_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  float f32() { return take<float>(); }

  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string text(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  // Fails before allocating when `count * width` bytes are not available.
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw DecodeError(DecodeErrorKind::truncated,
                        "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                            ", " + std::to_string(bytes_.size() - pos_) + " left");
    }
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  template <typename V>
  V take() {
    V v;
    raw(&v, sizeof v);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw std::runtime_error("failed reading '" + path.string() + "'");
  return bytes;
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace gkd
