#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <mutex>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sop {

// ---------------------------------------------------------------------------
// Errors

/// Requested key/object does not exist.
struct NotFoundError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Stored or transmitted bytes fail a checksum/hash/format check.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A delta refers to a base version the caller does not hold.
struct StaleBaseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem or transport failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown by test hooks to simulate a crash mid-operation.
struct FaultInjected : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Logging: tiny stderr logger, serialized so multi-threaded output stays whole.

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

inline LogLevel& log_threshold() {
  static LogLevel lvl = LogLevel::Warn;
  return lvl;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  if (lvl < log_threshold()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  const char* tag = lvl == LogLevel::Debug  ? "DEBUG"
                    : lvl == LogLevel::Info ? "INFO"
                    : lvl == LogLevel::Warn ? "WARN"
                                            : "ERROR";
  std::cerr << "[sop:" << tag << "] " << msg << "\n";
}

inline void log_info(const std::string& msg) { log_msg(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log_msg(LogLevel::Warn, msg); }
inline void log_error(const std::string& msg) { log_msg(LogLevel::Error, msg); }

// ---------------------------------------------------------------------------
// Deterministic RNG streams

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Mixes an arbitrary list of salts into one seed so that independent
/// subsystems (actors, eval, domain sampling) get disjoint streams.
inline uint64_t mix_seed(std::initializer_list<uint64_t> salts) {
  uint64_t state = 0x6a09e667f3bcc909ULL;
  uint64_t out = 0;
  for (uint64_t s : salts) {
    state ^= s + 0x9e3779b97f4a7c15ULL + (state << 6) + (state >> 2);
    out = splitmix64(state);
  }
  return out;
}

inline std::mt19937_64 make_rng(std::initializer_list<uint64_t> salts) {
  return std::mt19937_64(mix_seed(salts));
}

// ---------------------------------------------------------------------------
// 128-bit episode identifier

struct EpisodeId {
  uint64_t hi = 0;
  uint64_t lo = 0;

  friend bool operator==(const EpisodeId&, const EpisodeId&) = default;
  friend auto operator<=>(const EpisodeId&, const EpisodeId&) = default;
};

inline EpisodeId random_episode_id(std::mt19937_64& rng) {
  return EpisodeId{rng(), rng()};
}

inline std::string to_hex(const EpisodeId& id) {
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx",
                static_cast<unsigned long long>(id.hi),
                static_cast<unsigned long long>(id.lo));
  return std::string(buf);
}

struct EpisodeIdHash {
  size_t operator()(const EpisodeId& id) const noexcept {
    return static_cast<size_t>(id.hi ^ (id.lo * 0x9e3779b97f4a7c15ULL));
  }
};

// ---------------------------------------------------------------------------
// Canonical little-endian byte codec helpers

class ByteWriter {
 public:
  void put_u8(uint8_t v) { buf_.push_back(v); }

  void put_u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
  }

  void put_u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }

  void put_u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }

  void put_f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(bits);
  }

  void put_bytes(std::span<const uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  void put_str16(const std::string& s) {
    if (s.size() > 0xffff) throw std::invalid_argument("string too long for u16 length");
    put_u16(static_cast<uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  const std::vector<uint8_t>& bytes() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t get_u8() {
    require(1);
    return data_[pos_++];
  }

  uint16_t get_u16() {
    require(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_]) |
                 static_cast<uint16_t>(data_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }

  uint32_t get_u32() {
    require(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t get_u64() {
    require(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  double get_f64() {
    uint64_t bits = get_u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string get_str16() {
    uint16_t n = get_u16();
    require(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::vector<uint8_t> get_bytes(size_t n) {
    require(n);
    std::vector<uint8_t> out(data_.begin() + pos_, data_.begin() + pos_ + n);
    pos_ += n;
    return out;
  }

  size_t remaining() const { return data_.size() - pos_; }
  size_t pos() const { return pos_; }

 private:
  void require(size_t n) const {
    if (pos_ + n > data_.size()) throw IntegrityError("truncated payload");
  }

  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit content hash

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr uint64_t kFnvPrime = 0x00000100000001b3ULL;

inline uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t h = kFnvOffset) {
  for (uint8_t b : data) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

// ---------------------------------------------------------------------------
// CRC32 (IEEE 802.3 polynomial, reflected)

inline const std::array<uint32_t, 256>& crc32_table() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320U ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

inline uint32_t crc32(std::span<const uint8_t> data, uint32_t crc = 0) {
  crc = ~crc;
  const auto& t = crc32_table();
  for (uint8_t b : data) crc = t[(crc ^ b) & 0xff] ^ (crc >> 8);
  return ~crc;
}

// ---------------------------------------------------------------------------
// Clock: milliseconds source, injectable so simulated runs control time.

using ClockFn = std::function<uint64_t()>;

inline ClockFn steady_clock_ms() {
  return [] {
    using namespace std::chrono;
    return static_cast<uint64_t>(
        duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count());
  };
}

/// Manually advanced clock for deterministic co-simulation.
class SimClock {
 public:
  uint64_t now_ms() const { return now_; }
  void advance_ms(uint64_t ms) { now_ += ms; }
  void set_ms(uint64_t ms) { now_ = ms; }
  ClockFn fn() const {
    return [this] { return now_; };
  }

 private:
  uint64_t now_ = 0;
};

}  // namespace sop
