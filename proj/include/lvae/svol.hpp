#pragma once

// .svol volume files.
//
//   "SVOL1\n"  header  payload: channels*dx*dy*dz unsigned bytes, each 0 or 1
//   "SVOLF\n"  header  payload: channels*dx*dy*dz float32, little-endian
//
// header is one ASCII line "<dx> <dy> <dz> <channels> <sx> <sy> <sz>\n".
// Payload order is channel-major with x fastest.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lvae/errors.hpp"
#include "lvae/volume.hpp"

namespace lvae {

enum class VolumeEncoding { mask, float32 };

namespace detail {

inline constexpr std::string_view kMaskMagic = "SVOL1\n";
inline constexpr std::string_view kFloatMagic = "SVOLF\n";
inline constexpr std::size_t kMaxHeaderLine = 512;

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline std::string encode_volume(const Volume& v, VolumeEncoding enc) {
  v.validate();
  std::string out;
  out += enc == VolumeEncoding::mask ? detail::kMaskMagic : detail::kFloatMagic;
  out += std::to_string(v.dims.x) + ' ' + std::to_string(v.dims.y) + ' ' + std::to_string(v.dims.z) + ' ' +
         std::to_string(v.channels) + ' ' + detail::format_double(v.spacing.x) + ' ' +
         detail::format_double(v.spacing.y) + ' ' + detail::format_double(v.spacing.z) + '\n';
  if (enc == VolumeEncoding::mask) {
    out.reserve(out.size() + v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      float x = v.data[i];
      if (x != 0.0f && x != 1.0f)
        throw ParameterError("mask encoding requires values in {0,1}; voxel " + std::to_string(i) + " is " +
                             std::to_string(x));
      out.push_back(static_cast<char>(x == 1.0f ? 1 : 0));
    }
  } else {
    std::size_t start = out.size();
    out.resize(start + 4 * v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      std::uint32_t bits = detail::to_little_endian(std::bit_cast<std::uint32_t>(v.data[i]));
      std::memcpy(out.data() + start + 4 * i, &bits, 4);
    }
  }
  return out;
}

inline Volume decode_volume(std::string_view bytes) {
  using detail::kMaxHeaderLine;
  if (bytes.size() < 6) throw FormatError("file shorter than magic", bytes.size());
  VolumeEncoding enc;
  if (bytes.substr(0, 6) == detail::kMaskMagic)
    enc = VolumeEncoding::mask;
  else if (bytes.substr(0, 6) == detail::kFloatMagic)
    enc = VolumeEncoding::float32;
  else
    throw FormatError("bad magic, expected SVOL1 or SVOLF", 0);

  std::size_t eol = bytes.find('\n', 6);
  if (eol == std::string_view::npos || eol - 6 > kMaxHeaderLine)
    throw FormatError("unterminated header line", std::min(bytes.size(), 6 + kMaxHeaderLine));

  std::string_view header = bytes.substr(6, eol - 6);
  const char* p = header.data();
  const char* end = header.data() + header.size();
  auto offset_of = [&](const char* q) { return static_cast<std::size_t>(6 + (q - header.data())); };
  auto skip_space = [&]() {
    if (p >= end || *p != ' ') throw FormatError("expected single space in header", offset_of(p));
    ++p;
  };

  int ints[4];
  for (int k = 0; k < 4; ++k) {
    if (k > 0) skip_space();
    auto r = std::from_chars(p, end, ints[k]);
    if (r.ec != std::errc() || ints[k] <= 0) throw FormatError("bad integer field in header", offset_of(p));
    p = r.ptr;
  }
  double sp[3];
  for (double& s : sp) {
    skip_space();
    auto r = std::from_chars(p, end, s);
    if (r.ec != std::errc() || !(s > 0)) throw FormatError("bad spacing field in header", offset_of(p));
    p = r.ptr;
  }
  if (p != end) throw FormatError("trailing characters in header", offset_of(p));

  Dims d{ints[0], ints[1], ints[2]};
  int channels = ints[3];
  std::size_t count = static_cast<std::size_t>(channels) * d.voxels();
  std::size_t elem = enc == VolumeEncoding::mask ? 1 : 4;
  std::size_t payload_start = eol + 1;
  std::size_t have = bytes.size() - payload_start;
  if (have != count * elem)
    throw FormatError("payload length " + std::to_string(have) + " does not match expected " +
                          std::to_string(count * elem),
                      payload_start + std::min(have, count * elem));

  Volume v(d, channels, Spacing{sp[0], sp[1], sp[2]});
  const char* payload = bytes.data() + payload_start;
  if (enc == VolumeEncoding::mask) {
    for (std::size_t i = 0; i < count; ++i) {
      auto b = static_cast<unsigned char>(payload[i]);
      if (b > 1) throw FormatError("non-binary mask value " + std::to_string(b), payload_start + i);
      v.data[i] = static_cast<float>(b);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, payload + 4 * i, 4);
      v.data[i] = std::bit_cast<float>(detail::to_little_endian(bits));
    }
  }
  return v;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Volume load_volume(const std::filesystem::path& path) {
  return decode_volume(read_file_bytes(path));
}

/// Masks are written as SVOL1, anything else as SVOLF.
inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  write_file_bytes(path, encode_volume(v, v.is_mask() ? VolumeEncoding::mask : VolumeEncoding::float32));
}

inline void save_volume(const Volume& v, const std::filesystem::path& path, VolumeEncoding enc) {
  write_file_bytes(path, encode_volume(v, enc));
}

}  // namespace lvae
