#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fettl/tensor.hpp"

namespace fettl {

struct ParamEntry {
  std::string name;
  Tensor tensor;
};

// Ordered, named collection of tensors. Order is insertion order and is part
// of the wire format.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(t)});
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const Tensor& at(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw ContractError("no parameter named '" + name + "'");
  }
  Tensor& at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Same names, order and shapes.
  bool same_schema(const ParamSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (entries_[i].name != o.entries_[i].name || entries_[i].tensor.shape() != o.entries_[i].tensor.shape())
        return false;
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].tensor == b.entries_[i].tensor)) return false;
    return true;
  }

 private:
  const Tensor* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  std::vector<ParamEntry> entries_;
};

// Wire format, all integers little-endian:
//   u32 record_count
//   per record: u32 name_len, name bytes (UTF-8), u32 rank, rank x u32 dims,
//               numel x f64 (IEEE-754 binary64, little-endian)
namespace wire {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw InvalidInput("truncated ParamSet payload");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace wire

inline std::vector<std::uint8_t> serialize(const ParamSet& ps) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + ps.numel() * 8);
  wire::put_u32(out, static_cast<std::uint32_t>(ps.size()));
  for (const auto& e : ps) {
    wire::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    wire::put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) wire::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : e.tensor.data()) wire::put_f64(out, v);
  }
  return out;
}

inline ParamSet deserialize(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  ParamSet ps;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0) throw InvalidInput("ParamSet record '" + name + "' has rank 0");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = r.f64();
    ps.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw InvalidInput("trailing bytes after ParamSet payload");
  return ps;
}

// 64-bit FNV-1a, used for payload and config digests.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string digest(const ParamSet& ps) { return hex64(fnv1a(serialize(ps))); }

inline void save_params(const ParamSet& ps, const std::filesystem::path& path) {
  const auto bytes = serialize(ps);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline ParamSet load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace fettl
