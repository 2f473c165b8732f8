#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hcmamba/errors.hpp"

namespace hcm {

struct PnmImage {
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 1;
  std::vector<uint8_t> bytes;  // row-major, interleaved channels
};

namespace detail {

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path + "'");
  return bytes;
}

// Cursor over an in-memory netpbm file; every failure reports the byte offset
// at which parsing stopped.
class PnmParser {
 public:
  PnmParser(const std::string& path, std::vector<uint8_t> bytes)
      : path_(path), bytes_(std::move(bytes)) {}

  void expect_magic(const char* magic) {
    if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1])
      fail(0, std::string("expected magic '") + magic + "'");
    pos_ = 2;
  }

  int64_t parse_dimension(const char* what) {
    skip_separators();
    size_t start = pos_;
    int64_t value = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (int64_t{1} << 30)) fail(start, std::string(what) + " out of range");
      ++pos_;
    }
    if (pos_ == start) fail(pos_, std::string("expected ") + what);
    return value;
  }

  void expect_maxval_255() {
    size_t at = pos_;
    int64_t maxval = parse_dimension("maxval");
    if (maxval != 255) fail(at, "only maxval 255 is supported, got " + std::to_string(maxval));
    if (pos_ >= bytes_.size() || !is_space(bytes_[pos_]))
      fail(pos_, "expected single whitespace after maxval");
    ++pos_;
  }

  const uint8_t* take_payload(int64_t count) {
    if (static_cast<int64_t>(bytes_.size()) - static_cast<int64_t>(pos_) < count)
      fail(bytes_.size(),
           "truncated pixel data: expected " + std::to_string(count) + " bytes, found " +
               std::to_string(bytes_.size() - pos_));
    return bytes_.data() + pos_;
  }

 private:
  static bool is_space(uint8_t b) {
    return b == ' ' || b == '\t' || b == '\n' || b == '\r' || b == '\f' || b == '\v';
  }

  void skip_separators() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        return;
      }
    }
  }

  [[noreturn]] void fail(size_t at, const std::string& message) const {
    throw FormatError("'" + path_ + "': " + message + " at byte offset " + std::to_string(at));
  }

  std::string path_;
  std::vector<uint8_t> bytes_;
  size_t pos_ = 0;
};

inline PnmImage read_pnm(const std::string& path, const char* magic, int64_t channels) {
  PnmParser parser(path, read_file_bytes(path));
  parser.expect_magic(magic);
  PnmImage img;
  img.channels = channels;
  img.width = parser.parse_dimension("width");
  img.height = parser.parse_dimension("height");
  if (img.width < 1 || img.height < 1)
    throw FormatError("'" + path + "': degenerate dimensions " + std::to_string(img.width) +
                      "x" + std::to_string(img.height));
  parser.expect_maxval_255();
  int64_t count = img.height * img.width * channels;
  const uint8_t* payload = parser.take_payload(count);
  img.bytes.assign(payload, payload + count);
  return img;
}

inline void write_pnm(const std::string& path, const char* magic,
                      const std::vector<uint8_t>& bytes, int64_t height, int64_t width,
                      int64_t channels) {
  if (height < 1 || width < 1)
    throw ContractError("write_pnm: dimensions must be positive, got " +
                        std::to_string(height) + "x" + std::to_string(width));
  if (static_cast<int64_t>(bytes.size()) != height * width * channels)
    throw ContractError("write_pnm: payload has " + std::to_string(bytes.size()) +
                        " bytes, dimensions require " +
                        std::to_string(height * width * channels));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

// P6: binary RGB, 8 bits per sample.
inline PnmImage read_ppm(const std::string& path) { return detail::read_pnm(path, "P6", 3); }

inline void write_ppm(const std::string& path, const std::vector<uint8_t>& rgb,
                      int64_t height, int64_t width) {
  detail::write_pnm(path, "P6", rgb, height, width, 3);
}

// P5: binary grayscale, 8 bits per sample; used for class-id masks.
inline PnmImage read_pgm(const std::string& path) { return detail::read_pnm(path, "P5", 1); }

inline void write_pgm(const std::string& path, const std::vector<uint8_t>& gray,
                      int64_t height, int64_t width) {
  detail::write_pnm(path, "P5", gray, height, width, 1);
}

}  // namespace hcm
