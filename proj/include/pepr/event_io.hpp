#pragma once

// Event file formats.
//
// Text:   first line "# H W t_start t_end", then one "x,y,t,p" record per line,
//         t printed with 9 fractional digits, p in {1,-1}.
// Binary: magic "PEPREVT1", u16 H, u16 W, f64 t_start, f64 t_end, u64 count,
//         then count packed 13-byte records (u16 x, u16 y, f64 t, i8 p).
//         Everything little-endian.

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "pepr/events.hpp"
#include "pepr/file_audit.hpp"

namespace pepr::event_io {

inline std::string format_text(const EventStream& stream) {
  std::string out;
  out.reserve(32 + stream.records.size() * 24);
  char line[96];
  std::snprintf(line, sizeof line, "# %d %d %.9f %.9f\n", stream.resolution.height, stream.resolution.width,
                stream.t_start, stream.t_end);
  out += line;
  for (const auto& e : stream.records) {
    std::snprintf(line, sizeof line, "%d,%d,%.9f,%d\n", e.x, e.y, e.t, e.polarity);
    out += line;
  }
  return out;
}

inline EventStream parse_text(std::istream& in, const std::string& origin = "<stream>") {
  EventStream stream;
  std::string line;
  if (!std::getline(in, line) || line.empty() || line[0] != '#')
    throw ValidationError("event file missing header: " + origin);
  {
    std::istringstream hs(line.substr(1));
    if (!(hs >> stream.resolution.height >> stream.resolution.width >> stream.t_start >> stream.t_end))
      throw ValidationError("malformed event header: " + origin);
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    EventRecord e;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%d%c", &e.x, &e.y, &e.t, &e.polarity, &tail) != 4)
      throw ValidationError("malformed event record at " + origin + ":" + std::to_string(lineno));
    stream.records.push_back(e);
  }
  stream.validate();
  return stream;
}

inline void write_text(const EventStream& stream, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing", path);
  const std::string s = format_text(stream);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("write failed", path);
}

inline EventStream read_text(const std::string& path) {
  audit::record_open(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open event file", path);
  return parse_text(f, path);
}

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ValidationError("truncated binary event file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline constexpr std::array<char, 8> kMagic = {'P', 'E', 'P', 'R', 'E', 'V', 'T', '1'};

}  // namespace detail

inline std::string format_binary(const EventStream& stream) {
  require(stream.resolution.height <= 65535 && stream.resolution.width <= 65535, "binary events: resolution too large");
  std::string out(detail::kMagic.begin(), detail::kMagic.end());
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(stream.resolution.height));
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(stream.resolution.width));
  detail::put_le<double>(out, stream.t_start);
  detail::put_le<double>(out, stream.t_end);
  detail::put_le<std::uint64_t>(out, stream.records.size());
  for (const auto& e : stream.records) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.x));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.y));
    detail::put_le<double>(out, e.t);
    detail::put_le<std::int8_t>(out, static_cast<std::int8_t>(e.polarity));
  }
  return out;
}

inline EventStream parse_binary(const std::string& bytes) {
  if (bytes.size() < detail::kMagic.size() || std::memcmp(bytes.data(), detail::kMagic.data(), 8) != 0)
    throw ValidationError("binary event file: bad magic");
  std::size_t pos = 8;
  EventStream stream;
  stream.resolution.height = detail::get_le<std::uint16_t>(bytes, pos);
  stream.resolution.width = detail::get_le<std::uint16_t>(bytes, pos);
  stream.t_start = detail::get_le<double>(bytes, pos);
  stream.t_end = detail::get_le<double>(bytes, pos);
  const auto count = detail::get_le<std::uint64_t>(bytes, pos);
  if (count > (bytes.size() - pos) / 13) throw ValidationError("binary event file: record count exceeds payload");
  stream.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EventRecord e;
    e.x = detail::get_le<std::uint16_t>(bytes, pos);
    e.y = detail::get_le<std::uint16_t>(bytes, pos);
    e.t = detail::get_le<double>(bytes, pos);
    e.polarity = detail::get_le<std::int8_t>(bytes, pos);
    stream.records.push_back(e);
  }
  stream.validate();
  return stream;
}

inline void write_binary(const EventStream& stream, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing", path);
  const std::string s = format_binary(stream);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("write failed", path);
}

inline EventStream read_binary(const std::string& path) {
  audit::record_open(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open event file", path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_binary(ss.str());
}

}  // namespace pepr::event_io
