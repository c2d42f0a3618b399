#pragma once

// Binary wire formats. All integers and floats are little-endian.
//
//   MCTF  teacher features   {magic, u32 version, u32 n_items, u32 dim,
//                             f64 temperature, u32 side} then n_items x
//                             {u64 id, dim x f32}
//   MCPS  pair scores        {magic, u32 version, u64 n_records, u32 d_ss}
//                             then {u64 image_id, u64 text_id, f32 score,
//                             d_ss x f32}
//   MCRV  raw sample vectors {magic, u32 version, u32 n_items, u32 dim,
//                             u32 side} then {u64 id, u64 group, dim x f32}
//   MCCK  parameter snapshot {magic, u32 version, u32 count} then per
//                             parameter {u32 name_len, name, u32 rows,
//                             u32 cols, u8 trainable, u8 decay, f64 values}

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "mcad/diffcore.hpp"
#include "mcad/teachers.hpp"

namespace mcad::dataio {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class FeatureSide : std::uint32_t { image = 0, text = 1, latent = 2 };

inline std::string to_string(FeatureSide s) {
  switch (s) {
    case FeatureSide::image: return "image";
    case FeatureSide::text: return "text";
    case FeatureSide::latent: return "latent";
  }
  return "?";
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void le(T v) {
    static_assert(std::is_arithmetic_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    }
    bytes(raw, sizeof(T));
  }
  void magic(const char (&m)[5]) { bytes(m, 4); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> buf, std::string what)
      : buf_(std::move(buf)), what_(std::move(what)) {}

  template <class T>
  T le() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, raw, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_magic(const char (&m)[5]) {
    const auto at = pos_;
    if (str(4) != std::string(m, 4)) fail(at, std::string("bad magic, expected ") + m);
  }

  void expect_version() {
    const auto at = pos_;
    const auto v = le<std::uint32_t>();
    if (v != kFormatVersion) fail(at, "unsupported version " + std::to_string(v));
  }

  void expect_end() const {
    if (pos_ != buf_.size()) fail(pos_, "trailing bytes after payload");
  }

  std::size_t offset() const { return pos_; }

  [[noreturn]] void fail(std::size_t at, const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) fail(pos_, "truncated payload");
  }

  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------

struct TeacherFeatureFile {
  FeatureSide side = FeatureSide::image;
  double temperature = 0.0;
  std::vector<ItemId> ids;
  Matrix<float> vectors;

  friend bool operator==(const TeacherFeatureFile&, const TeacherFeatureFile&) = default;
};

inline void validate(const TeacherFeatureFile& f) {
  if (f.ids.size() != f.vectors.rows) throw FormatError("MCTF: id count != vector rows");
  if (!(f.temperature > 0.0) || !std::isfinite(f.temperature)) {
    throw FormatError("MCTF: temperature must be positive");
  }
  for (std::size_t i = 1; i < f.ids.size(); ++i)
    if (f.ids[i] <= f.ids[i - 1]) throw FormatError("MCTF: ids not strictly increasing");
  for (std::size_t r = 0; r < f.vectors.rows; ++r) {
    double ss = 0.0;
    for (const float v : f.vectors.row(r)) ss += double(v) * double(v);
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-4) {
      throw FormatError("MCTF: vector for id " + std::to_string(f.ids[r]) +
                        " is not unit norm");
    }
  }
}

inline std::vector<std::uint8_t> encode(const TeacherFeatureFile& f) {
  validate(f);
  ByteWriter w;
  w.magic("MCTF");
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.ids.size()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.vectors.cols));
  w.le<double>(f.temperature);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.side));
  for (std::size_t r = 0; r < f.ids.size(); ++r) {
    w.le<std::uint64_t>(f.ids[r]);
    for (const float v : f.vectors.row(r)) w.le<float>(v);
  }
  return w.buffer();
}

inline TeacherFeatureFile decode_teacher_features(std::vector<std::uint8_t> bytes,
                                                  const std::string& what = "MCTF") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("MCTF");
  r.expect_version();
  TeacherFeatureFile f;
  const auto n = r.le<std::uint32_t>();
  const auto dim = r.le<std::uint32_t>();
  f.temperature = r.le<double>();
  const auto side_at = r.offset();
  const auto side = r.le<std::uint32_t>();
  if (side > 1) r.fail(side_at, "side must be image(0) or text(1)");
  f.side = static_cast<FeatureSide>(side);
  f.vectors = Matrix<float>(n, dim);
  f.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    f.ids[i] = r.le<std::uint64_t>();
    for (auto& v : f.vectors.row(i)) v = r.le<float>();
  }
  r.expect_end();
  try {
    validate(f);
  } catch (const FormatError& e) {
    throw FormatError(what + ": " + e.what());
  }
  return f;
}

// ---------------------------------------------------------------------------

struct PairScoreRecord {
  ItemId image_id = 0;
  ItemId text_id = 0;
  PairOracleRecord record;

  friend bool operator==(const PairScoreRecord&, const PairScoreRecord&) = default;
};

struct PairScoreFile {
  std::uint32_t d_ss = 0;
  std::vector<PairScoreRecord> records;

  friend bool operator==(const PairScoreFile&, const PairScoreFile&) = default;
};

inline void validate(const PairScoreFile& f) {
  std::set<std::pair<ItemId, ItemId>> seen;
  for (const auto& r : f.records) {
    if (!seen.insert({r.image_id, r.text_id}).second) {
      throw FormatError("MCPS: duplicate pair (" + std::to_string(r.image_id) + "," +
                        std::to_string(r.text_id) + ")");
    }
    if (!(r.record.score >= 0.0f && r.record.score <= 1.0f)) {
      throw FormatError("MCPS: score outside [0,1] for pair (" +
                        std::to_string(r.image_id) + "," + std::to_string(r.text_id) + ")");
    }
    if (r.record.h_ss.size() != f.d_ss) throw FormatError("MCPS: feature width mismatch");
  }
}

inline std::vector<std::uint8_t> encode(const PairScoreFile& f) {
  validate(f);
  ByteWriter w;
  w.magic("MCPS");
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint64_t>(f.records.size());
  w.le<std::uint32_t>(f.d_ss);
  for (const auto& r : f.records) {
    w.le<std::uint64_t>(r.image_id);
    w.le<std::uint64_t>(r.text_id);
    w.le<float>(r.record.score);
    for (const float v : r.record.h_ss) w.le<float>(v);
  }
  return w.buffer();
}

inline PairScoreFile decode_pair_scores(std::vector<std::uint8_t> bytes,
                                        const std::string& what = "MCPS") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("MCPS");
  r.expect_version();
  PairScoreFile f;
  const auto n = r.le<std::uint64_t>();
  f.d_ss = r.le<std::uint32_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    PairScoreRecord rec;
    rec.image_id = r.le<std::uint64_t>();
    rec.text_id = r.le<std::uint64_t>();
    rec.record.score = r.le<float>();
    rec.record.h_ss.resize(f.d_ss);
    for (auto& v : rec.record.h_ss) v = r.le<float>();
    f.records.push_back(std::move(rec));
  }
  r.expect_end();
  try {
    validate(f);
  } catch (const FormatError& e) {
    throw FormatError(what + ": " + e.what());
  }
  return f;
}

inline TablePairOracle to_oracle(const PairScoreFile& f) {
  TablePairOracle oracle(f.d_ss);
  for (const auto& r : f.records) oracle.insert(r.image_id, r.text_id, r.record);
  return oracle;
}

// ---------------------------------------------------------------------------

struct RawVectorFile {
  FeatureSide side = FeatureSide::image;
  std::vector<ItemId> ids;
  std::vector<std::uint64_t> groups;
  Matrix<float> vectors;

  friend bool operator==(const RawVectorFile&, const RawVectorFile&) = default;
};

inline std::vector<std::uint8_t> encode(const RawVectorFile& f) {
  if (f.ids.size() != f.vectors.rows || f.groups.size() != f.vectors.rows) {
    throw FormatError("MCRV: id/group count != vector rows");
  }
  ByteWriter w;
  w.magic("MCRV");
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.ids.size()));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.vectors.cols));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(f.side));
  for (std::size_t r = 0; r < f.ids.size(); ++r) {
    w.le<std::uint64_t>(f.ids[r]);
    w.le<std::uint64_t>(f.groups[r]);
    for (const float v : f.vectors.row(r)) w.le<float>(v);
  }
  return w.buffer();
}

inline RawVectorFile decode_raw_vectors(std::vector<std::uint8_t> bytes,
                                        const std::string& what = "MCRV") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("MCRV");
  r.expect_version();
  RawVectorFile f;
  const auto n = r.le<std::uint32_t>();
  const auto dim = r.le<std::uint32_t>();
  const auto side_at = r.offset();
  const auto side = r.le<std::uint32_t>();
  if (side > 2) r.fail(side_at, "unknown side " + std::to_string(side));
  f.side = static_cast<FeatureSide>(side);
  f.vectors = Matrix<float>(n, dim);
  f.ids.resize(n);
  f.groups.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    f.ids[i] = r.le<std::uint64_t>();
    f.groups[i] = r.le<std::uint64_t>();
    for (auto& v : f.vectors.row(i)) {
      v = r.le<float>();
      if (!std::isfinite(v)) r.fail(r.offset() - 4, "non-finite value");
    }
  }
  r.expect_end();
  return f;
}

// ---------------------------------------------------------------------------

template <class Real>
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<Real>& store) {
  ByteWriter w;
  w.magic("MCCK");
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.value.rows));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(p.value.cols));
    w.le<std::uint8_t>(p.trainable ? 1 : 0);
    w.le<std::uint8_t>(p.decay ? 1 : 0);
    for (const Real v : p.value.data) w.le<double>(static_cast<double>(v));
  }
  return w.buffer();
}

template <class Real>
ParamStore<Real> decode_checkpoint(std::vector<std::uint8_t> bytes,
                                   const std::string& what = "MCCK") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("MCCK");
  r.expect_version();
  ParamStore<Real> store;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint32_t>();
    auto name = r.str(len);
    const auto rows = r.le<std::uint32_t>();
    const auto cols = r.le<std::uint32_t>();
    const bool trainable = r.le<std::uint8_t>() != 0;
    const bool decay = r.le<std::uint8_t>() != 0;
    Matrix<Real> m(rows, cols);
    for (auto& v : m.data) v = static_cast<Real>(r.le<double>());
    auto& p = store.add(name, std::move(m), decay);
    p.trainable = trainable;
  }
  r.expect_end();
  return store;
}

/// Copies values of every parameter present in both stores.
template <class Dst, class Src>
void load_values(ParamStore<Dst>& dst, const ParamStore<Src>& src) {
  for (auto& p : dst) {
    if (!src.contains(p.name)) {
      throw FormatError("checkpoint lacks parameter '" + p.name + "'");
    }
    const auto& s = src.at(p.name);
    if (s.value.rows != p.value.rows || s.value.cols != p.value.cols) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " +
                        shape_str(s.value) + ", expected " + shape_str(p.value));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i)
      p.value.data[i] = static_cast<Dst>(s.value.data[i]);
  }
}

}  // namespace mcad::dataio
