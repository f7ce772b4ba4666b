#pragma once

// Binary checkpoints, all integers little-endian:
//
//   "DMVF"  u32 version
//   u32 len, config JSON
//   u32 count, then per parameter:
//     u32 len, name   u32 rank   i64 dims[rank]
//     f32 values[n]   f32 first_moment[n]   f32 second_moment[n]   i64 adam_step
//   u32 len, RNG state
//   i64 step

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmvfn/model.hpp"

namespace dmvfn {

inline constexpr char kCheckpointMagic[4] = {'D', 'M', 'V', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamRecord {
  std::string name;
  Shape dims;
  std::vector<float> values, first_moment, second_moment;
  std::int64_t adam_step = 0;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::vector<ParamRecord> params;
  std::string rng_state;
  std::int64_t step = 0;
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& os) : os_(os) {}
  template <class U>
  void uint(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) os_.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void i64(std::int64_t v) { uint(static_cast<std::uint64_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class LeReader {
 public:
  LeReader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}
  template <class U>
  U uint() {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const int c = is_.get();
      if (c == EOF) fail("truncated file");
      v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(uint<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str(std::uint32_t max_len = 1u << 26) {
    const auto n = uint<std::uint32_t>();
    if (n > max_len) fail("implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (static_cast<std::uint32_t>(is_.gcount()) != n) fail("truncated file");
    return s;
  }
  [[noreturn]] void fail(const std::string& why) const { throw DataError("checkpoint '" + where_ + "': " + why); }
  bool at_end() { return is_.peek() == EOF; }

 private:
  std::istream& is_;
  std::string where_;
};

}  // namespace detail

inline void write_checkpoint(const Checkpoint& ck, std::ostream& os) {
  os.write(kCheckpointMagic, 4);
  detail::LeWriter w(os);
  w.uint(ck.version);
  w.str(ck.config_json);
  w.uint(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    w.str(p.name);
    w.uint(static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) w.i64(d);
    for (float v : p.values) w.f32(v);
    for (float v : p.first_moment) w.f32(v);
    for (float v : p.second_moment) w.f32(v);
    w.i64(p.adam_step);
  }
  w.str(ck.rng_state);
  w.i64(ck.step);
}

/// Writes to `path` through a temporary file so an interrupted save never
/// replaces a good checkpoint with a partial one.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint '" + tmp.string() + "'");
    write_checkpoint(ck, os);
    if (!os) throw DataError("error writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& where = "<stream>") {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("checkpoint '" + where + "': bad magic, not a DMVF file");
  detail::LeReader r(is, where);
  Checkpoint ck;
  ck.version = r.uint<std::uint32_t>();
  if (ck.version != kCheckpointVersion)
    r.fail("format version " + std::to_string(ck.version) + ", this build reads version " +
           std::to_string(kCheckpointVersion));
  ck.config_json = r.str();
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    ParamRecord p;
    p.name = r.str(4096);
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) r.fail("parameter '" + p.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) {
      p.dims.push_back(r.i64());
      if (p.dims.back() < 0 || p.dims.back() > (1 << 24)) r.fail("parameter '" + p.name + "' has a bad dim");
    }
    const auto n = static_cast<std::size_t>(numel_of(p.dims));
    if (n > (std::size_t{1} << 28)) r.fail("parameter '" + p.name + "' is implausibly large");
    for (auto* vec : {&p.values, &p.first_moment, &p.second_moment}) {
      vec->resize(n);
      for (auto& v : *vec) v = r.f32();
    }
    p.adam_step = r.i64();
    ck.params.push_back(std::move(p));
  }
  ck.rng_state = r.str();
  ck.step = r.i64();
  if (!r.at_end()) r.fail("trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(is, path.string());
}

/// Snapshot of a model's parameters and optimizer moments.
inline std::vector<ParamRecord> export_params(const ParamSet<float>& ps) {
  std::vector<ParamRecord> out;
  for (const auto& p : ps.params())
    out.push_back({p.name, p.tensor.dims(), p.tensor.vec(), p.first_moment, p.second_moment, p.step});
  return out;
}

/// Copies records into a parameter set; names and dims must match exactly.
inline void import_params(ParamSet<float>& ps, const std::vector<ParamRecord>& records) {
  if (records.size() != ps.params().size())
    throw DataError("checkpoint holds " + std::to_string(records.size()) + " parameters, model has " +
                    std::to_string(ps.params().size()));
  for (const auto& r : records) {
    auto* p = ps.find(r.name);
    if (!p) throw DataError("checkpoint parameter '" + r.name + "' does not exist in the model");
    if (p->tensor.dims() != r.dims)
      throw DataError("checkpoint parameter '" + r.name + "' has dims " + shape_str(r.dims) + ", model expects " +
                      shape_str(p->tensor.dims()));
    auto v = p->tensor.mutable_values();
    std::copy(r.values.begin(), r.values.end(), v.begin());
    p->first_moment = r.first_moment;
    p->second_moment = r.second_moment;
    p->step = r.adam_step;
  }
}

}  // namespace dmvfn
