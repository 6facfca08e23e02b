#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <type_traits>
#include <utility>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/tensor.hpp"

namespace hetfl {

enum class ParamRole : std::uint8_t { SharedBody = 0, PersonalHead = 1, BatchNorm = 2 };

inline std::string_view to_string(ParamRole r) {
  switch (r) {
    case ParamRole::SharedBody: return "shared_body";
    case ParamRole::PersonalHead: return "personal_head";
    case ParamRole::BatchNorm: return "batch_norm";
  }
  return "?";
}

struct ParamEntry {
  Tensor value;
  ParamRole role{};

  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

// Ordered name -> (tensor, role) mapping. Iteration follows definition order;
// partition/merge keep track of each entry's original position so a split
// set can be reassembled exactly.
class ParamSet {
 public:
  using value_type = std::pair<std::string, ParamEntry>;

  void add(std::string name, Tensor value, ParamRole role) { add_at(std::move(name), std::move(value), role, next_); }

  [[nodiscard]] bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }

  [[nodiscard]] const ParamEntry& entry(std::string_view name) const { return entries_[find(name)].second; }
  [[nodiscard]] const Tensor& value(std::string_view name) const { return entry(name).value; }
  [[nodiscard]] Tensor& value(std::string_view name) { return entries_[find(name)].second.value; }
  [[nodiscard]] ParamRole role(std::string_view name) const { return entry(name).role; }

  // Replaces a value; the shape must not change.
  void assign(std::string_view name, Tensor v) {
    Tensor& slot = value(name);
    if (slot.shape() != v.shape()) {
      throw ShapeError("parameter '" + std::string(name) + "' shape " + Tensor::shape_string(slot.shape()) +
                       " cannot take " + Tensor::shape_string(v.shape()));
    }
    slot = std::move(v);
  }

  [[nodiscard]] auto begin() const noexcept { return entries_.begin(); }
  [[nodiscard]] auto end() const noexcept { return entries_.end(); }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [n, e] : entries_) out.push_back(n);
    return out;
  }

  [[nodiscard]] std::size_t element_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
  }

  friend std::pair<ParamSet, ParamSet> partition(const ParamSet& params, const std::function<bool(ParamRole)>& pred);
  friend ParamSet merge(const ParamSet& a, const ParamSet& b);

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  void add_at(std::string name, Tensor value, ParamRole role, std::size_t ordinal) {
    if (name.empty()) throw Error("parameter name must be nonempty");
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), ParamEntry{std::move(value), role});
    ordinal_.push_back(ordinal);
    next_ = std::max(next_, ordinal + 1);
  }

  [[nodiscard]] std::size_t find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error("no parameter named '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<value_type> entries_;
  std::vector<std::size_t> ordinal_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t next_ = 0;
};

inline bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.role != ib->second.role) return false;
    if (!bitwise_equal(ia->second.value, ib->second.value)) return false;
  }
  return true;
}

// Disjoint, exhaustive, order-preserving split.
inline std::pair<ParamSet, ParamSet> partition(const ParamSet& params, const std::function<bool(ParamRole)>& pred) {
  std::pair<ParamSet, ParamSet> out;
  for (std::size_t i = 0; i < params.entries_.size(); ++i) {
    const auto& [name, e] = params.entries_[i];
    (pred(e.role) ? out.first : out.second).add_at(name, e.value, e.role, params.ordinal_[i]);
  }
  return out;
}

// Union of two disjoint sets, ordered by original definition position.
inline ParamSet merge(const ParamSet& a, const ParamSet& b) {
  std::vector<std::pair<std::size_t, const ParamSet::value_type*>> all;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) all.emplace_back(a.ordinal_[i], &a.entries_[i]);
  for (std::size_t i = 0; i < b.entries_.size(); ++i) all.emplace_back(b.ordinal_[i], &b.entries_[i]);
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  ParamSet out;
  for (const auto& [ord, e] : all) out.add_at(e->first, e->second.value, e->second.role, ord);
  return out;
}

// Copy of `base` with the values of every entry of `update` written over it.
// Every name in `update` must exist in `base` with the same shape.
inline ParamSet overlay(ParamSet base, const ParamSet& update) {
  for (const auto& [name, e] : update) base.assign(name, e.value);
  return base;
}

// Running batch-norm statistics are carried in the parameter set but are not
// trained by gradient descent.
inline bool is_buffer(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

inline std::vector<std::string> trainable_names(const ParamSet& params) {
  std::vector<std::string> out;
  for (const auto& [name, e] : params) {
    if (!is_buffer(name)) out.push_back(name);
  }
  return out;
}

// ---- canonical serialization ----------------------------------------------
//
//   "HFPS" u32:version u32:count
//   count x { u16:name_len name u8:role u8:rank u64:extent[rank] f64:element[...] }
//
// All integers and reals little-endian. An empty byte string is the empty
// payload (zero elements).

struct SerializationError : Error {
  using Error::Error;
};

namespace wire {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'H', 'F', 'P', 'S'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

  [[nodiscard]] bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw SerializationError("payload truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Header {
  std::string name;
  ParamRole role{};
  Tensor::Shape shape;
};

inline std::uint32_t read_preamble(Reader& r) {
  for (char c : kMagic) {
    if (r.get<std::uint8_t>() != static_cast<std::uint8_t>(c)) throw SerializationError("bad magic");
  }
  if (r.get<std::uint32_t>() != kVersion) throw SerializationError("unsupported version");
  return r.get<std::uint32_t>();
}

inline Header read_header(Reader& r) {
  Header h;
  h.name = r.get_string(r.get<std::uint16_t>());
  const auto role = r.get<std::uint8_t>();
  if (role > 2) throw SerializationError("unknown role tag " + std::to_string(role));
  h.role = static_cast<ParamRole>(role);
  const auto rank = r.get<std::uint8_t>();
  if (rank == 0) throw SerializationError("rank-0 entry");
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto e = r.get<std::uint64_t>();
    if (e == 0 || e > (std::uint64_t{1} << 32)) throw SerializationError("bad extent");
    h.shape.push_back(static_cast<std::size_t>(e));
  }
  return h;
}

}  // namespace wire

inline std::vector<std::uint8_t> serialize(const ParamSet& params) {
  std::vector<std::uint8_t> out(std::begin(wire::kMagic), std::end(wire::kMagic));
  wire::put<std::uint32_t>(out, wire::kVersion);
  wire::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params) {
    wire::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    wire::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.role));
    wire::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t x : e.value.shape()) wire::put<std::uint64_t>(out, x);
    for (double v : e.value.data()) wire::put<double>(out, v);
  }
  return out;
}

inline ParamSet deserialize(std::span<const std::uint8_t> bytes) {
  ParamSet out;
  if (bytes.empty()) return out;
  wire::Reader r(bytes);
  const auto count = wire::read_preamble(r);
  for (std::uint32_t k = 0; k < count; ++k) {
    auto h = wire::read_header(r);
    std::vector<double> data(Tensor::count(h.shape));
    for (double& v : data) v = r.get<double>();
    out.add(std::move(h.name), Tensor(std::move(h.shape), std::move(data)), h.role);
  }
  if (!r.done()) throw SerializationError("trailing bytes after payload");
  return out;
}

// Number of real elements a payload carries, computed from its headers.
inline std::size_t payload_element_count(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return 0;
  wire::Reader r(bytes);
  const auto count = wire::read_preamble(r);
  std::size_t total = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto h = wire::read_header(r);
    const std::size_t n = Tensor::count(h.shape);
    r.skip(n * sizeof(double));
    total += n;
  }
  if (!r.done()) throw SerializationError("trailing bytes after payload");
  return total;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path);
  const auto bytes = serialize(params);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ParamSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace hetfl
