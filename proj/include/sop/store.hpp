#pragma once

#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "sop/envsim.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Frame and episode records

enum class EpisodeSource : uint8_t { Online = 0, Offline = 1 };

struct Frame {
  Observation observation;
  Action action = Action::Stay;
  double reward = 0.0;
  bool expert_flag = false;
  // -1 = not stamped, otherwise 0/1 (filled by the learner at ingest).
  int8_t advantage_indicator = -1;
};

struct EpisodeRecord {
  EpisodeId episode_id;
  int32_t task_id = 0;
  uint64_t domain_seed = 0;
  uint64_t policy_version = 0;
  std::vector<Frame> frames;
  EpisodeStatus status = EpisodeStatus::Running;
  // Half-open [start, end) frame index ranges under expert control.
  std::vector<std::pair<uint32_t, uint32_t>> intervention_spans;
  EpisodeSource source = EpisodeSource::Online;
  uint64_t sim_duration = 0;  // env steps

  /// Checks the record invariants; throws std::invalid_argument on breach.
  void validate() const {
    uint32_t prev_end = 0;
    for (auto [start, end] : intervention_spans) {
      if (start >= end || end > frames.size())
        throw std::invalid_argument("intervention span out of bounds");
      if (start < prev_end)
        throw std::invalid_argument("intervention spans overlap or unsorted");
      prev_end = end;
    }
    for (uint32_t i = 0; i < frames.size(); ++i) {
      bool in_span = false;
      for (auto [start, end] : intervention_spans)
        if (i >= start && i < end) in_span = true;
      if (frames[i].expert_flag != in_span)
        throw std::invalid_argument("expert_flag inconsistent with spans");
      double r = frames[i].reward;
      if (r != 0.0 && r != 1.0)
        throw std::invalid_argument("frame reward must be 0 or 1");
    }
  }
};

struct EpisodeMeta {
  EpisodeId episode_id;
  int32_t task_id = 0;
  uint32_t frame_count = 0;
  double sampling_weight = 1.0;
  std::string storage_key;
};

inline EpisodeMeta meta_of(const EpisodeRecord& rec, std::string storage_key) {
  return EpisodeMeta{rec.episode_id, rec.task_id,
                     static_cast<uint32_t>(rec.frames.size()), 1.0,
                     std::move(storage_key)};
}

// ---------------------------------------------------------------------------
// Episode payload codec.
//
// Layout: magic "SOPEPS1", episode_id 16 B, task_id u32, policy_version u64,
// status u8, frame_count u32, span count u32 + (u32,u32) pairs, domain_seed
// u64, source u8, sim_duration u64, feature_dim u32, frames as fixed-stride
// f64 LE records [features..., action, reward, expert_flag, indicator],
// trailing CRC32 over all preceding bytes.

inline std::vector<uint8_t> encode_episode(const EpisodeRecord& rec) {
  rec.validate();
  ByteWriter w;
  for (char c : std::string_view("SOPEPS1")) w.put_u8(static_cast<uint8_t>(c));
  w.put_u64(rec.episode_id.hi);
  w.put_u64(rec.episode_id.lo);
  w.put_u32(static_cast<uint32_t>(rec.task_id));
  w.put_u64(rec.policy_version);
  w.put_u8(static_cast<uint8_t>(rec.status));
  w.put_u32(static_cast<uint32_t>(rec.frames.size()));
  w.put_u32(static_cast<uint32_t>(rec.intervention_spans.size()));
  for (auto [start, end] : rec.intervention_spans) {
    w.put_u32(start);
    w.put_u32(end);
  }
  w.put_u64(rec.domain_seed);
  w.put_u8(static_cast<uint8_t>(rec.source));
  w.put_u64(rec.sim_duration);
  uint32_t feature_dim =
      rec.frames.empty() ? 0 : static_cast<uint32_t>(rec.frames[0].observation.features.size());
  w.put_u32(feature_dim);
  for (const Frame& f : rec.frames) {
    if (f.observation.features.size() != feature_dim)
      throw std::invalid_argument("encode_episode: inconsistent feature lengths");
    for (double v : f.observation.features) w.put_f64(v);
    w.put_f64(static_cast<double>(f.action));
    w.put_f64(f.reward);
    w.put_f64(f.expert_flag ? 1.0 : 0.0);
    w.put_f64(static_cast<double>(f.advantage_indicator));
  }
  w.put_u32(crc32(w.bytes()));
  return w.take();
}

inline EpisodeRecord decode_episode(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4) throw IntegrityError("episode payload too short");
  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (crc32(bytes.subspan(0, bytes.size() - 4)) != stored_crc)
    throw IntegrityError("episode payload checksum mismatch");

  ByteReader r(bytes.subspan(0, bytes.size() - 4));
  for (char c : std::string_view("SOPEPS1"))
    if (r.get_u8() != static_cast<uint8_t>(c)) throw IntegrityError("bad episode magic");

  EpisodeRecord rec;
  rec.episode_id.hi = r.get_u64();
  rec.episode_id.lo = r.get_u64();
  rec.task_id = static_cast<int32_t>(r.get_u32());
  rec.policy_version = r.get_u64();
  rec.status = static_cast<EpisodeStatus>(r.get_u8());
  uint32_t frame_count = r.get_u32();
  uint32_t span_count = r.get_u32();
  for (uint32_t i = 0; i < span_count; ++i) {
    uint32_t start = r.get_u32();
    uint32_t end = r.get_u32();
    rec.intervention_spans.emplace_back(start, end);
  }
  rec.domain_seed = r.get_u64();
  rec.source = static_cast<EpisodeSource>(r.get_u8());
  rec.sim_duration = r.get_u64();
  uint32_t feature_dim = r.get_u32();
  rec.frames.resize(frame_count);
  for (Frame& f : rec.frames) {
    f.observation.features.resize(feature_dim);
    for (uint32_t i = 0; i < feature_dim; ++i) f.observation.features[i] = r.get_f64();
    f.action = static_cast<Action>(static_cast<int>(r.get_f64()));
    f.reward = r.get_f64();
    f.expert_flag = r.get_f64() != 0.0;
    f.advantage_indicator = static_cast<int8_t>(r.get_f64());
  }
  try {
    rec.validate();
  } catch (const std::invalid_argument& e) {
    throw IntegrityError(std::string("decoded episode violates invariants: ") + e.what());
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Filesystem-backed blob store with temp-file + atomic-rename writes.
// Keys are forward-slash paths relative to the root ("episodes/2/abcd...").

class BlobStore {
 public:
  // Called before each chunk write with the byte offset about to be written,
  // and once with offset == total just before the rename. Tests inject
  // crashes by throwing from the hook.
  using WriteHook = std::function<void(size_t offset, size_t total)>;

  explicit BlobStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  void set_write_hook(WriteHook hook) { write_hook_ = std::move(hook); }
  void set_chunk_size(size_t bytes) { chunk_ = std::max<size_t>(1, bytes); }

  std::string put_episode(const EpisodeRecord& rec) {
    std::string key = episode_key(rec.task_id, rec.episode_id);
    put_bytes(key, encode_episode(rec));
    return key;
  }

  EpisodeRecord get_episode(const std::string& key) {
    return decode_episode(get_bytes(key));
  }

  /// Atomic write: the final path appears only after the full payload and
  /// rename complete. Any failure leaves no partial object at the key.
  void put_bytes(const std::string& key, std::span<const uint8_t> bytes) {
    std::filesystem::path final_path = resolve(key);
    std::filesystem::create_directories(final_path.parent_path());
    std::filesystem::path tmp_path =
        final_path.parent_path() / (".tmp-" + std::to_string(tmp_counter_++) + "-" +
                                    final_path.filename().string());
    try {
      {
        std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open temp file " + tmp_path.string());
        size_t offset = 0;
        while (offset < bytes.size()) {
          size_t n = std::min(chunk_, bytes.size() - offset);
          if (write_hook_) write_hook_(offset, bytes.size());
          out.write(reinterpret_cast<const char*>(bytes.data() + offset),
                    static_cast<std::streamsize>(n));
          if (!out) throw IoError("short write to " + tmp_path.string());
          offset += n;
        }
        out.flush();
        if (!out) throw IoError("flush failed for " + tmp_path.string());
      }
      if (write_hook_) write_hook_(bytes.size(), bytes.size());
      std::filesystem::rename(tmp_path, final_path);
    } catch (...) {
      std::error_code ec;
      std::filesystem::remove(tmp_path, ec);
      throw;
    }
  }

  std::vector<uint8_t> get_bytes(const std::string& key) const {
    std::filesystem::path path = resolve(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("no object at key " + key);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
  }

  bool exists(const std::string& key) const {
    return std::filesystem::exists(resolve(key));
  }

  static std::string episode_key(int32_t task_id, const EpisodeId& id) {
    return "episodes/" + std::to_string(task_id) + "/" + to_hex(id);
  }

 private:
  std::filesystem::path resolve(const std::string& key) const {
    if (key.empty() || key.find("..") != std::string::npos)
      throw std::invalid_argument("bad storage key: " + key);
    return root_ / key;
  }

  std::filesystem::path root_;
  WriteHook write_hook_;
  size_t chunk_ = 64 * 1024;
  uint64_t tmp_counter_ = 0;
};

// ---------------------------------------------------------------------------
// In-memory metadata index, decoupled from frame payloads. Single-owner.

class MetaIndex {
 public:
  /// Idempotent on episode_id.
  void insert(const EpisodeMeta& meta) {
    if (by_id_.contains(meta.episode_id)) return;
    by_id_.emplace(meta.episode_id, meta);
    by_task_[meta.task_id].push_back(meta.episode_id);
  }

  bool contains(const EpisodeId& id) const { return by_id_.contains(id); }

  std::vector<EpisodeMeta> list_by_task(int32_t task_id) const {
    std::vector<EpisodeMeta> out;
    auto it = by_task_.find(task_id);
    if (it == by_task_.end()) return out;
    out.reserve(it->second.size());
    for (const EpisodeId& id : it->second) out.push_back(by_id_.at(id));
    return out;
  }

  size_t size() const { return by_id_.size(); }

  /// Rough resident footprint, for the metadata/payload separation check.
  size_t approx_bytes() const {
    size_t bytes = 0;
    for (const auto& [id, meta] : by_id_)
      bytes += sizeof(id) + sizeof(meta) + meta.storage_key.capacity();
    for (const auto& [task, ids] : by_task_)
      bytes += sizeof(task) + ids.capacity() * sizeof(EpisodeId);
    return bytes;
  }

 private:
  std::unordered_map<EpisodeId, EpisodeMeta, EpisodeIdHash> by_id_;
  std::unordered_map<int32_t, std::vector<EpisodeId>> by_task_;
};

}  // namespace sop
