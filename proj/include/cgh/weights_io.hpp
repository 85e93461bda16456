#pragma once

// CGHW weight files:
//   "CGHW" | u32 version | u32 count | count x tensor | u32 crc32
//   tensor = u32 name_len, name, u32 rank, rank x u32 dim, u8 complex,
//            f32 data (re,im interleaved when complex)
// All integers and floats little-endian. The CRC covers everything between
// the version field and the checksum.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "cgh/error.hpp"
#include "cgh/pcd.hpp"
#include "cgh/tensor.hpp"

namespace cgh {

inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "CGHW I/O assumes a little-endian host");

inline void put_u32(std::string& b, std::uint32_t v) { b.append(reinterpret_cast<const char*>(&v), 4); }

inline void put_f32(std::string& b, double v) {
  const float f = float(v);
  b.append(reinterpret_cast<const char*>(&f), 4);
}

class Reader {
 public:
  Reader(const std::string& data, std::size_t pos, std::size_t end, const std::string& path)
      : d_(data), pos_(pos), end_(end), path_(path) {}

  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError(path_ + ": truncated weight file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, d_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(d_[pos_++]);
  }
  float f32() {
    need(4);
    float v;
    std::memcpy(&v, d_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& d_;
  std::size_t pos_, end_;
  const std::string& path_;
};

inline std::uint32_t crc32_of(const std::string& b, std::size_t from, std::size_t to) {
  return std::uint32_t(
      ::crc32(0L, reinterpret_cast<const Bytef*>(b.data() + from), uInt(to - from)));
}

}  // namespace detail

inline void write_cghw(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string b = "CGHW";
  detail::put_u32(b, kWeightFormatVersion);
  const std::size_t payload = b.size();
  detail::put_u32(b, std::uint32_t(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(b, std::uint32_t(t.name.size()));
    b += t.name;
    detail::put_u32(b, std::uint32_t(t.value.rank()));
    for (auto d : t.value.shape()) detail::put_u32(b, std::uint32_t(d));
    b.push_back(char(t.value.is_complex() ? 1 : 0));
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      detail::put_f32(b, t.value.re()[i]);
      if (t.value.is_complex()) detail::put_f32(b, t.value.im()[i]);
    }
  }
  detail::put_u32(b, detail::crc32_of(b, payload, b.size()));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(b.data(), std::streamsize(b.size()));
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline std::vector<NamedTensor> read_cghw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open weight file '" + path + "'");
  const std::string b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 4 || b.compare(0, 4, "CGHW") != 0) throw FormatError(path + ": bad magic");
  if (b.size() < 8) throw FormatError(path + ": truncated weight file");
  detail::Reader head(b, 4, b.size(), path);
  const std::uint32_t version = head.u32();
  if (version != kWeightFormatVersion)
    throw FormatError(path + ": version mismatch (file " + std::to_string(version) + ", expected " +
                      std::to_string(kWeightFormatVersion) + ")");
  if (b.size() < 16) throw FormatError(path + ": truncated weight file");
  // Parse up to the trailer first so truncation is reported as such.
  detail::Reader r(b, 8, b.size() - 4, path);
  std::vector<NamedTensor> out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(path + ": tensor '" + t.name + "' has implausible rank");
    Shape s(rank);
    std::size_t n = 1;
    for (auto& d : s) {
      d = r.u32();
      n *= d;
    }
    const bool cplx_ = r.u8() != 0;
    r.need(n * (cplx_ ? 8 : 4));
    t.value = Tensor(s, cplx_);
    for (std::size_t i = 0; i < n; ++i) {
      t.value.re()[i] = r.f32();
      if (cplx_) t.value.im()[i] = r.f32();
    }
    out.push_back(std::move(t));
  }
  if (r.pos() != b.size() - 4) throw FormatError(path + ": trailing bytes before checksum");
  detail::Reader tail(b, b.size() - 4, b.size(), path);
  if (tail.u32() != detail::crc32_of(b, 8, b.size() - 4))
    throw FormatError(path + ": checksum mismatch");
  return out;
}

// ---------------------------------------------------------------------------
// Per-stage PCD weights, stored with "stage<k>." name prefixes.

inline void save_weights(const std::string& path, const std::vector<PcdWeights>& stages) {
  std::vector<NamedTensor> all;
  for (std::size_t s = 0; s < stages.size(); ++s)
    stages[s].for_each("stage" + std::to_string(s) + ".",
                       [&](const std::string& n, const Tensor& t) { all.push_back({n, t}); });
  write_cghw(path, all);
}

inline void save_weights(const std::string& path, const PcdWeights& w) {
  save_weights(path, std::vector<PcdWeights>{w});
}

/// Loads every stage. Shapes are checked against the layout implied by the
/// first stage's FEM conv (channels) and its block names; when `channels` is
/// nonzero it must match, otherwise a DimensionError names the tensor.
inline std::vector<PcdWeights> load_weights(const std::string& path, std::size_t channels = 0) {
  const std::vector<NamedTensor> all = read_cghw(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : all) by_name[t.name] = &t.value;
  std::size_t stages = 0;
  while (by_name.count("stage" + std::to_string(stages) + ".fem.conv1")) ++stages;
  if (stages == 0) throw FormatError(path + ": no 'stage0.fem.conv1' tensor");
  const Tensor& fem1 = *by_name.at("stage0.fem.conv1");
  const std::size_t C = channels ? channels : (fem1.rank() ? fem1.dim(0) : 0);
  std::vector<PcdWeights> out;
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string prefix = "stage" + std::to_string(s) + ".";
    std::size_t blocks = 0;
    while (by_name.count(prefix + "cdat" + std::to_string(blocks) + ".cdsa.wq")) ++blocks;
    PcdWeights w = init_weights(C, blocks, 0);
    w.for_each(prefix, [&](const std::string& n, Tensor& t) {
      auto it = by_name.find(n);
      if (it == by_name.end()) throw FormatError(path + ": missing tensor '" + n + "'");
      const Tensor& src = *it->second;
      if (src.shape() != t.shape() || src.is_complex() != t.is_complex())
        throw DimensionError(path + ": tensor '" + n + "' has shape " +
                             detail::join_dims(src.shape()) + ", expected " +
                             detail::join_dims(t.shape()));
      t = src;
    });
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace cgh
