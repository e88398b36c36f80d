#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mbl/error.hpp"
#include "mbl/model.hpp"
#include "mbl/tensor.hpp"

namespace mbl {

// Checkpoint layout, all integers little-endian:
//
//   "MBL1"                       magic
//   u32 version                  kCheckpointVersion
//   u32 tensor_count
//   per tensor, ascending by name:
//     u32 name_len, name bytes
//     u32 tag
//     u32 rank, u64 dims[rank]
//     u64 offset                 byte offset into the payload
//   u64 payload_bytes
//   u64 digest                   FNV-1a 64 over every preceding byte and the payload
//   payload                      contiguous little-endian f32

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'M', 'B', 'L', '1'};

namespace detail {

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  detail::ByteWriter head;
  head.raw(kCheckpointMagic, 4);
  head.u32(kCheckpointVersion);
  head.u32(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, p] : params) {
    head.u32(static_cast<std::uint32_t>(name.size()));
    head.raw(name.data(), name.size());
    head.u32(static_cast<std::uint32_t>(p.tag));
    head.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape) head.u64(d);
    head.u64(offset);
    offset += p.value.numel() * 4;
  }
  head.u64(offset);
  detail::ByteWriter payload;
  for (const auto& [_, p] : params) {
    for (float v : p.value.data) payload.f32(v);
  }
  std::uint64_t digest = detail::fnv1a(head.bytes.data(), head.bytes.size());
  digest = detail::fnv1a(payload.bytes.data(), payload.bytes.size(), digest);
  head.u64(digest);
  head.bytes.insert(head.bytes.end(), payload.bytes.begin(), payload.bytes.end());
  return head.bytes;
}

inline ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw IntegrityError("not a checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    Tag tag;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::uint64_t expected_offset = 0;
  std::string prev_name;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u32());
    const std::uint32_t tag = r.u32();
    if (tag >= kAllTags.size()) throw IntegrityError("tensor '" + e.name + "' has an invalid tag");
    e.tag = static_cast<Tag>(tag);
    const std::uint32_t rank = r.u32();
    if (rank > 4) throw IntegrityError("tensor '" + e.name + "' has an implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::size_t>(r.u64()));
    e.offset = r.u64();
    if (i > 0 && !(prev_name < e.name)) throw IntegrityError("tensor names are not strictly ascending");
    if (e.offset != expected_offset) throw IntegrityError("tensor '" + e.name + "' has a non-contiguous offset");
    expected_offset += Tensor::numel_of(e.shape) * 4;
    prev_name = e.name;
    entries.push_back(std::move(e));
  }
  const std::uint64_t payload_bytes = r.u64();
  if (payload_bytes != expected_offset) throw IntegrityError("payload size disagrees with the tensor table");
  const std::size_t digest_pos = r.pos();
  const std::uint64_t stored = r.u64();
  const std::size_t payload_pos = r.pos();
  if (bytes.size() != payload_pos + payload_bytes) throw IntegrityError("checkpoint payload is truncated or padded");
  std::uint64_t digest = detail::fnv1a(bytes.data(), digest_pos);
  digest = detail::fnv1a(bytes.data() + payload_pos, payload_bytes, digest);
  if (digest != stored) throw IntegrityError("checkpoint digest mismatch");

  ParamSet out;
  for (const auto& e : entries) {
    std::vector<float> data(Tensor::numel_of(e.shape));
    const std::uint8_t* src = bytes.data() + payload_pos + e.offset;
    for (std::size_t k = 0; k < data.size(); ++k) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(src[4 * k + b]) << (8 * b);
      std::memcpy(&data[k], &u, 4);
    }
    out.add(e.name, e.tag, Tensor(e.shape, std::move(data)));
  }
  return out;
}

inline void save_checkpoint(const ParamSet& params, const std::string& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline ParamSet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline void save_model(const Model& m, const std::string& path) { save_checkpoint(m.params, path); }
inline Model load_model(const std::string& path) { return model_from_params(load_checkpoint(path)); }

}  // namespace mbl
