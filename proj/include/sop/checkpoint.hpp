#pragma once

#include "sop/policy.hpp"

namespace sop {

// Checkpoint and delta wire formats.
//
// Full checkpoint: magic "SOPCKPT1", version u64 LE, num_actions u32,
// feature_dim u32, block count u8, per block (id u8, element count u32,
// f64 LE values), trailing content hash u64.
//
// Delta: magic "SOPDLT1", base_version u64, new_version u64, dims as above,
// changed block count u8, blocks as above, trailing full hash u64.

enum class BlockId : uint8_t { ActionWeights = 0, MarginalWeights = 1, ValueWeights = 2 };

/// Store key where the learner keeps the newest full checkpoint; actors fall
/// back to it when a delta does not apply.
inline constexpr const char* kLatestCheckpointKey = "checkpoints/latest";

struct CheckpointDelta {
  uint64_t base_version = 0;
  uint64_t new_version = 0;
  int num_actions = 0;
  int feature_dim = 0;
  std::vector<std::pair<uint8_t, std::vector<double>>> changed_blocks;
  uint64_t full_hash = 0;
};

namespace detail {

inline const std::vector<double>& block_of(const PolicyParams& p, uint8_t id) {
  switch (static_cast<BlockId>(id)) {
    case BlockId::ActionWeights: return p.action_weights;
    case BlockId::MarginalWeights: return p.marginal_weights;
    case BlockId::ValueWeights: return p.value_weights;
  }
  throw IntegrityError("unknown weight block id");
}

inline std::vector<double>& block_of(PolicyParams& p, uint8_t id) {
  return const_cast<std::vector<double>&>(
      block_of(static_cast<const PolicyParams&>(p), id));
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return a.empty() ||
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline void write_block(ByteWriter& w, uint8_t id, const std::vector<double>& vals) {
  w.put_u8(id);
  w.put_u32(static_cast<uint32_t>(vals.size()));
  for (double v : vals) w.put_f64(v);
}

inline std::pair<uint8_t, std::vector<double>> read_block(ByteReader& r) {
  uint8_t id = r.get_u8();
  uint32_t n = r.get_u32();
  std::vector<double> vals(n);
  for (uint32_t i = 0; i < n; ++i) vals[i] = r.get_f64();
  return {id, std::move(vals)};
}

inline void expect_magic(ByteReader& r, std::string_view magic) {
  for (char c : magic)
    if (r.get_u8() != static_cast<uint8_t>(c))
      throw IntegrityError("bad magic bytes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full checkpoint codec

inline std::vector<uint8_t> encode_checkpoint(const PolicyParams& p) {
  ByteWriter w;
  for (char c : std::string_view("SOPCKPT1")) w.put_u8(static_cast<uint8_t>(c));
  w.put_u64(p.version);
  w.put_u32(static_cast<uint32_t>(p.num_actions));
  w.put_u32(static_cast<uint32_t>(p.feature_dim));
  w.put_u8(3);
  detail::write_block(w, static_cast<uint8_t>(BlockId::ActionWeights), p.action_weights);
  detail::write_block(w, static_cast<uint8_t>(BlockId::MarginalWeights), p.marginal_weights);
  detail::write_block(w, static_cast<uint8_t>(BlockId::ValueWeights), p.value_weights);
  w.put_u64(p.content_hash);
  return w.take();
}

inline PolicyParams decode_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, "SOPCKPT1");
  uint64_t version = r.get_u64();
  int num_actions = static_cast<int>(r.get_u32());
  int feature_dim = static_cast<int>(r.get_u32());
  uint8_t blocks = r.get_u8();
  PolicyParams p = PolicyParams::zeros(num_actions, feature_dim);
  p.version = version;
  for (uint8_t i = 0; i < blocks; ++i) {
    auto [id, vals] = detail::read_block(r);
    auto& dst = detail::block_of(p, id);
    if (vals.size() != dst.size()) throw IntegrityError("checkpoint block size mismatch");
    dst = std::move(vals);
  }
  uint64_t stored_hash = r.get_u64();
  p.rehash();
  if (p.content_hash != stored_hash)
    throw IntegrityError("checkpoint hash mismatch");
  return p;
}

// ---------------------------------------------------------------------------
// Delta encode/apply: unchanged blocks omitted; apply verifies the full hash.

inline CheckpointDelta delta_encode(const PolicyParams& old_params,
                                    const PolicyParams& new_params) {
  if (old_params.num_actions != new_params.num_actions ||
      old_params.feature_dim != new_params.feature_dim)
    throw std::invalid_argument("delta_encode: shape mismatch");
  CheckpointDelta d;
  d.base_version = old_params.version;
  d.new_version = new_params.version;
  d.num_actions = new_params.num_actions;
  d.feature_dim = new_params.feature_dim;
  d.full_hash = new_params.content_hash;
  for (uint8_t id = 0; id <= 2; ++id) {
    const auto& a = detail::block_of(old_params, id);
    const auto& b = detail::block_of(new_params, id);
    if (!detail::bitwise_equal(a, b)) d.changed_blocks.emplace_back(id, b);
  }
  return d;
}

inline PolicyParams apply_delta(const PolicyParams& params, const CheckpointDelta& d) {
  if (params.version != d.base_version)
    throw StaleBaseError("delta base version " + std::to_string(d.base_version) +
                         " does not match held version " + std::to_string(params.version));
  PolicyParams next = params;
  for (const auto& [id, vals] : d.changed_blocks) {
    auto& dst = detail::block_of(next, id);
    if (vals.size() != dst.size()) throw IntegrityError("delta block size mismatch");
    dst = vals;
  }
  next.version = d.new_version;
  next.rehash();
  if (next.content_hash != d.full_hash)
    throw IntegrityError("delta application hash mismatch");
  return next;
}

inline std::vector<uint8_t> encode_delta(const CheckpointDelta& d) {
  ByteWriter w;
  for (char c : std::string_view("SOPDLT1")) w.put_u8(static_cast<uint8_t>(c));
  w.put_u64(d.base_version);
  w.put_u64(d.new_version);
  w.put_u32(static_cast<uint32_t>(d.num_actions));
  w.put_u32(static_cast<uint32_t>(d.feature_dim));
  w.put_u8(static_cast<uint8_t>(d.changed_blocks.size()));
  for (const auto& [id, vals] : d.changed_blocks) detail::write_block(w, id, vals);
  w.put_u64(d.full_hash);
  return w.take();
}

inline CheckpointDelta decode_delta(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, "SOPDLT1");
  CheckpointDelta d;
  d.base_version = r.get_u64();
  d.new_version = r.get_u64();
  d.num_actions = static_cast<int>(r.get_u32());
  d.feature_dim = static_cast<int>(r.get_u32());
  uint8_t blocks = r.get_u8();
  for (uint8_t i = 0; i < blocks; ++i) d.changed_blocks.push_back(detail::read_block(r));
  d.full_hash = r.get_u64();
  return d;
}

/// True if the payload looks like a full checkpoint rather than a delta.
inline bool is_checkpoint_payload(std::span<const uint8_t> bytes) {
  static constexpr std::string_view magic = "SOPCKPT1";
  if (bytes.size() < magic.size()) return false;
  return std::memcmp(bytes.data(), magic.data(), magic.size()) == 0;
}

}  // namespace sop
