// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Binary tensor table.
//
//   "SSAN"                      4 bytes
//   version                     u16
//   record count                u32
//   per record:
//     name length               u32
//     name bytes                UTF-8, no terminator
//     rank                      u32
//     extents                   rank x u32
//     values                    prod(extents) x f32
//
// All integers and floats are little-endian.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssan/model.hpp"
#include "ssan/tensor.hpp"

namespace ssan {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'A', 'N'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint16_t u16(const std::string& what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_]) |
                                              (static_cast<unsigned char>(bytes_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }

  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> f32s(std::size_t n, const std::string& what) {
    if (n > (bytes_.size() - pos_) / 4) throw CheckpointError(path_ + ": truncated while reading " + what);
    std::vector<float> out(n);
    for (float& v : out) v = std::bit_cast<float>(u32(what));
    return out;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(path_ + ": truncated while reading " + what);
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointRecord>& records) {
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  buf.push_back(static_cast<char>(kCheckpointVersion & 0xFFu));
  buf.push_back(static_cast<char>(kCheckpointVersion >> 8));
  detail::put_u32(buf, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw CheckpointError("record " + r.name + " has " + std::to_string(r.values.size()) +
                            " values for shape " + shape_str(r.shape));
    }
    detail::put_u32(buf, static_cast<std::uint32_t>(r.name.size()));
    buf += r.name;
    detail::put_u32(buf, static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t e : r.shape) detail::put_u32(buf, static_cast<std::uint32_t>(e));
    for (float v : r.values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  }
  return buf;
}

inline std::vector<CheckpointRecord> decode_checkpoint(const std::string& bytes,
                                                       const std::string& path = "checkpoint") {
  detail::ByteReader in(bytes, path);
  if (in.str(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw CheckpointError(path + ": bad magic, not an SSAN checkpoint");
  }
  const std::uint16_t version = in.u16("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("record count");
  std::vector<CheckpointRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    const std::uint32_t name_len = in.u32("name length of record " + std::to_string(i));
    r.name = in.str(name_len, "name of record " + std::to_string(i));
    const std::uint32_t rank = in.u32("rank of " + r.name);
    if (rank == 0) throw CheckpointError(path + ": " + r.name + " has rank 0");
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(in.u32("extents of " + r.name));
    // capped so a corrupt extent fails the length check instead of overflowing
    std::size_t n = 1;
    for (std::size_t e : r.shape) {
      if (e == 0) throw CheckpointError(path + ": " + r.name + " has a zero extent");
      n = std::min(n * std::min(e, bytes.size() + 1), bytes.size() + 1);
    }
    r.values = in.f32s(n, "values of " + r.name);
    records.push_back(std::move(r));
  }
  if (!in.at_end()) throw CheckpointError(path + ": trailing bytes after last record");
  return records;
}

inline void write_checkpoint_file(const std::string& path, const std::vector<CheckpointRecord>& records) {
  const std::string bytes = encode_checkpoint(records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write to " + path + " failed");
}

inline std::vector<CheckpointRecord> read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

template <typename T>
std::vector<CheckpointRecord> to_records(const std::vector<NamedTensor<T>>& tensors) {
  std::vector<CheckpointRecord> out;
  for (const auto& [name, t] : tensors)
    out.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  return out;
}

/// Copies records into `tensors` by name. Every tensor must be present with
/// the same shape; extra records are an error unless `allow_extra`.
template <typename T>
void assign_records(const std::vector<CheckpointRecord>& records,
                    const std::vector<NamedTensor<T>>& tensors, bool allow_extra = false) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (const auto& [name, t] : tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("missing parameter " + name);
    if (it->second->shape != t.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " +
                            shape_str(it->second->shape) + ", model " + shape_str(t.shape()));
    }
  }
  if (!allow_extra && records.size() != tensors.size()) {
    for (const auto& r : records) {
      bool known = false;
      for (const auto& nt : tensors) known = known || nt.name == r.name;
      if (!known) throw CheckpointError("unexpected parameter " + r.name);
    }
  }
  for (const auto& [name, t] : tensors) {
    const CheckpointRecord& r = *by_name.at(name);
    Tensor<T> target = t;
    for (std::size_t i = 0; i < r.values.size(); ++i) target.data()[i] = static_cast<T>(r.values[i]);
  }
}

template <typename T>
void save_checkpoint(const ModelWeights<T>& weights, const std::string& path) {
  write_checkpoint_file(path, to_records(weights.named_parameters()));
}

/// Loads into weights already shaped for the intended config.
template <typename T>
void load_checkpoint(const std::string& path, ModelWeights<T>& weights) {
  assign_records(read_checkpoint_file(path), weights.named_parameters());
}

}  // namespace ssan
