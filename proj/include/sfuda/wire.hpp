#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {
namespace wire {

// --- base64 (standard alphabet, padded) -------------------------------------

inline std::string base64_encode(const void* data, size_t len) {
  static const char* tbl =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= len; i += 3) {
    const std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  if (i + 1 == len) {
    const std::uint32_t v = p[i] << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (i + 2 == len) {
    const std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw CorruptionError("invalid base64 character");
  };
  if (s.size() % 4 != 0) throw CorruptionError("base64 length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    const int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
    if (a < 0 || b < 0) throw CorruptionError("malformed base64 padding");
    out.push_back(static_cast<std::uint8_t>((a << 2) | (b >> 4)));
    if (c >= 0) out.push_back(static_cast<std::uint8_t>((b << 4) | (c >> 2)));
    if (d >= 0) {
      if (c < 0) throw CorruptionError("malformed base64 padding");
      out.push_back(static_cast<std::uint8_t>((c << 6) | d));
    }
  }
  return out;
}

// --- framing: u32 little-endian length + JSON payload ------------------------

inline constexpr std::uint32_t kMaxFrame = 256u * 1024u * 1024u;

inline bool write_all(int fd, const void* data, size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    const ssize_t n = ::write(fd, p, len);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline bool read_all(int fd, void* data, size_t len) {
  char* p = static_cast<char*>(data);
  while (len > 0) {
    const ssize_t n = ::read(fd, p, len);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<size_t>(n);
  }
  return true;
}

inline void send_message(int fd, const nlohmann::json& msg) {
  const std::string payload = msg.dump();
  const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
  char hdr[4];
  std::memcpy(hdr, &len, 4);
  if (!write_all(fd, hdr, 4) || !write_all(fd, payload.data(), payload.size()))
    throw IoError("socket write failed");
}

// false on clean EOF before the header
inline bool recv_message(int fd, nlohmann::json& out) {
  char hdr[4];
  if (!read_all(fd, hdr, 4)) return false;
  std::uint32_t len;
  std::memcpy(&len, hdr, 4);
  if (len == 0 || len > kMaxFrame) throw ProtocolError("bad frame length");
  std::string payload(len, '\0');
  if (!read_all(fd, payload.data(), len))
    throw IoError("socket closed mid-frame");
  try {
    out = nlohmann::json::parse(payload);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError("bad frame payload: " + std::string(e.what()));
  }
  return true;
}

// --- tensor <-> message ------------------------------------------------------

inline nlohmann::json encode_batch(const ImageTensor& batch) {
  return {{"shape", {batch.n, batch.w, batch.h, batch.c}},
          {"data", base64_encode(batch.data.data(),
                                 batch.data.size() * sizeof(float))}};
}

inline ImageTensor decode_batch(const nlohmann::json& msg) {
  const auto& shape = msg.at("shape");
  if (!shape.is_array() || shape.size() != 4)
    throw ProtocolError("shape must be [n,w,h,c]");
  ImageTensor t(shape.at(0).get<int>(), shape.at(1).get<int>(),
                shape.at(2).get<int>(), shape.at(3).get<int>());
  const auto bytes = base64_decode(msg.at("data").get<std::string>());
  if (bytes.size() != t.data.size() * sizeof(float))
    throw CorruptionError("data payload does not match declared shape");
  std::memcpy(t.data.data(), bytes.data(), bytes.size());
  return t;
}

}  // namespace wire
}  // namespace sfuda
