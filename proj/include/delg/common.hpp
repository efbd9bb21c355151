#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace delg {

enum class ErrorKind {
  precondition,
  shape,
  io,
  format,
  checksum,
  config,
  not_found,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937 would be fine for the bits, but the
// standard distributions are implementation-defined, which breaks
// byte-identical dataset regeneration across toolchains. Everything here is
// explicit arithmetic on xoshiro256** output.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  uint64_t next() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n); n must be positive
  int uniform_int(int n) {
    return int(next() % uint64_t(n));
  }

  // standard normal via Box-Muller (spare discarded: two words per draw)
  double normal() {
    double u1 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  uint64_t seed() const { return seed_; }

  // independent stream derived from (seed, stream id)
  Rng fork(uint64_t stream) const {
    uint64_t mix = seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    splitmix64(mix);
    return Rng(splitmix64(mix));
  }

 private:
  uint64_t seed_;
  uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// CRC32 (IEEE reflected polynomial), used by all on-disk containers.
// ---------------------------------------------------------------------------

inline uint32_t crc32(const void* bytes, size_t n, uint32_t seed = 0) {
  static const auto table = [] {
    std::vector<uint32_t> t(256);
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xedb88320U ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xffffffffU;
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xffU] ^ (c >> 8);
  return c ^ 0xffffffffU;
}

// ---------------------------------------------------------------------------
// Little-endian byte buffers for the binary file formats. Files at desk scale
// are a few MB, so serialization goes through one in-memory buffer and the
// CRC is computed over it in one pass.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(char(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const void* p, size_t n) {
    buf_.append(static_cast<const char*>(p), n);
  }
  void str(const std::string& s) { buf_.append(s); }

  const std::string& buffer() const { return buf_; }

  // appends crc32 of everything written so far, then writes the file
  void write_file_with_crc(const std::string& path) {
    u32(crc32(buf_.data(), buf_.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open for writing: " + path);
    out.write(buf_.data(), std::streamsize(buf_.size()));
    if (!out) fail(ErrorKind::io, "write failed: " + path);
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data)
      : buf_(std::move(data)), end_(buf_.size()) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open: " + path);
    std::string data((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return ByteReader(std::move(data));
  }

  // validates the trailing crc32 and truncates it from the readable range
  void check_crc(const std::string& what) {
    if (buf_.size() < 4)
      fail(ErrorKind::format, what + ": file truncated");
    const size_t body = buf_.size() - 4;
    uint32_t stored = 0;
    for (int i = 3; i >= 0; --i)
      stored = (stored << 8) | uint8_t(buf_[body + size_t(i)]);
    if (crc32(buf_.data(), body) != stored)
      fail(ErrorKind::checksum, what + ": checksum mismatch");
    end_ = body;
  }

  uint8_t u8() { return uint8_t(take(1)[0]); }
  uint32_t u32() {
    const char* p = take(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | uint8_t(p[i]);
    return v;
  }
  uint64_t u64() {
    const char* p = take(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | uint8_t(p[i]);
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(size_t n) { return std::string(take(n), n); }
  size_t remaining() const { return end_ - pos_; }

 private:
  const char* take(size_t n) {
    if (pos_ + n > end_)
      fail(ErrorKind::format, "unexpected end of data");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string buf_;
  size_t pos_ = 0;
  size_t end_ = 0;
};

}  // namespace delg
