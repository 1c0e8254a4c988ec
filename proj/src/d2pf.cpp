#include "d2p/d2pf.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace d2p {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct Layout {
  std::uint32_t rows, cols, count;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> index;
  std::uint64_t record_bytes;
};

Layout parse_layout(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kD2pfHeaderBytes) {
    throw D2pfError(D2pfErrorKind::kTruncated, "file has " + std::to_string(bytes.size()) +
                                                   " bytes, header needs " +
                                                   std::to_string(kD2pfHeaderBytes));
  }
  if (std::memcmp(bytes.data(), "D2PF", 4) != 0) {
    throw D2pfError(D2pfErrorKind::kBadMagic, "magic is not 'D2PF'");
  }
  const auto* p = bytes.data();
  const std::uint32_t version = get_u32(p + 4);
  if (version != kD2pfVersion) {
    throw D2pfError(D2pfErrorKind::kVersion, "version " + std::to_string(version) +
                                                 ", reader supports " +
                                                 std::to_string(kD2pfVersion));
  }
  const std::uint32_t dtype = get_u32(p + 8);
  if (dtype != kD2pfFloat32) {
    throw D2pfError(D2pfErrorKind::kDType, "dtype code " + std::to_string(dtype) +
                                               ", expected 1 (float32)");
  }
  Layout l{get_u32(p + 12), get_u32(p + 16), get_u32(p + 20), {}, 0};
  if (l.rows == 0 || l.cols == 0) {
    throw D2pfError(D2pfErrorKind::kIndex, "zero feature extent K = " + std::to_string(l.rows) +
                                               ", D = " + std::to_string(l.cols));
  }
  l.record_bytes = std::uint64_t{4} * l.rows * l.cols;
  const std::uint64_t data_start = kD2pfHeaderBytes + std::uint64_t{kD2pfIndexEntryBytes} * l.count;
  if (bytes.size() < data_start) {
    throw D2pfError(D2pfErrorKind::kTruncated, "index of " + std::to_string(l.count) +
                                                   " entries ends past the end of the file");
  }
  std::set<std::uint64_t> ids;
  std::uint64_t expected = data_start;
  for (std::uint32_t i = 0; i < l.count; ++i) {
    const auto* e = p + kD2pfHeaderBytes + kD2pfIndexEntryBytes * i;
    const std::uint64_t id = get_u64(e), offset = get_u64(e + 8);
    if (!ids.insert(id).second) {
      throw D2pfError(D2pfErrorKind::kIndex, "duplicate sentence id " + std::to_string(id));
    }
    if (offset != expected) {
      throw D2pfError(D2pfErrorKind::kIndex,
                      "record " + std::to_string(i) + " (sentence " + std::to_string(id) +
                          ") at offset " + std::to_string(offset) + ", expected " +
                          std::to_string(expected));
    }
    l.index.emplace_back(id, offset);
    expected += l.record_bytes;
  }
  if (bytes.size() < expected) {
    throw D2pfError(D2pfErrorKind::kTruncated, "records need " + std::to_string(expected) +
                                                   " bytes, file has " +
                                                   std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw D2pfError(D2pfErrorKind::kIndex, std::to_string(bytes.size() - expected) +
                                               " trailing bytes after the last record");
  }
  return l;
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw D2pfError(D2pfErrorKind::kIo, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

const char* d2pf_error_name(D2pfErrorKind k) {
  switch (k) {
    case D2pfErrorKind::kBadMagic: return "bad-magic";
    case D2pfErrorKind::kVersion: return "version";
    case D2pfErrorKind::kDType: return "dtype";
    case D2pfErrorKind::kTruncated: return "truncated";
    case D2pfErrorKind::kIndex: return "index";
    case D2pfErrorKind::kNonFinite: return "non-finite";
    case D2pfErrorKind::kIo: return "io";
  }
  return "?";
}

std::vector<unsigned char> encode_d2pf(const D2pfFile& file) {
  const std::size_t n = static_cast<std::size_t>(file.rows) * file.cols;
  if (n == 0) throw D2pfError(D2pfErrorKind::kIndex, "zero feature extent");
  std::vector<unsigned char> out;
  out.reserve(kD2pfHeaderBytes + file.records.size() * (kD2pfIndexEntryBytes + 4 * n));
  for (char c : {'D', '2', 'P', 'F'}) out.push_back(static_cast<unsigned char>(c));
  put_u32(out, kD2pfVersion);
  put_u32(out, kD2pfFloat32);
  put_u32(out, file.rows);
  put_u32(out, file.cols);
  put_u32(out, static_cast<std::uint32_t>(file.records.size()));
  std::uint64_t offset = kD2pfHeaderBytes + kD2pfIndexEntryBytes * file.records.size();
  std::set<std::uint64_t> ids;
  for (const auto& r : file.records) {
    if (r.values.size() != n) {
      throw D2pfError(D2pfErrorKind::kIndex, "record for sentence " +
                                                 std::to_string(r.sentence_id) + " has " +
                                                 std::to_string(r.values.size()) +
                                                 " values, expected " + std::to_string(n));
    }
    if (!ids.insert(r.sentence_id).second) {
      throw D2pfError(D2pfErrorKind::kIndex, "duplicate sentence id " +
                                                 std::to_string(r.sentence_id));
    }
    put_u64(out, r.sentence_id);
    put_u64(out, offset);
    offset += 4 * n;
  }
  for (const auto& r : file.records) {
    for (float v : r.values) {
      if (!std::isfinite(v)) {
        throw D2pfError(D2pfErrorKind::kNonFinite,
                        "sentence " + std::to_string(r.sentence_id) + " has a non-finite value");
      }
      put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
  }
  return out;
}

D2pfFile decode_d2pf(const std::vector<unsigned char>& bytes) {
  const Layout l = parse_layout(bytes);
  D2pfFile file;
  file.rows = l.rows;
  file.cols = l.cols;
  const std::size_t n = static_cast<std::size_t>(l.rows) * l.cols;
  file.records.reserve(l.count);
  for (const auto& [id, offset] : l.index) {
    FeatureRecord r;
    r.sentence_id = id;
    r.values.resize(n);
    const auto* p = bytes.data() + offset;
    for (std::size_t i = 0; i < n; ++i) {
      r.values[i] = std::bit_cast<float>(get_u32(p + 4 * i));
      if (!std::isfinite(r.values[i])) {
        throw D2pfError(D2pfErrorKind::kNonFinite,
                        "sentence " + std::to_string(id) + " value " + std::to_string(i) +
                            " is not finite");
      }
    }
    file.records.push_back(std::move(r));
  }
  return file;
}

void write_d2pf(const std::string& path, const D2pfFile& file) {
  const auto bytes = encode_d2pf(file);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw D2pfError(D2pfErrorKind::kIo, "cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw D2pfError(D2pfErrorKind::kIo, "failed writing '" + path + "'");
}

D2pfFile read_d2pf(const std::string& path) {
  try {
    return decode_d2pf(read_bytes(path));
  } catch (const D2pfError& e) {
    throw D2pfError(e.d2pf_kind(), e.detail() + " in '" + path + "'");
  }
}

D2pfSummary validate_d2pf(const std::string& path) {
  const D2pfFile f = read_d2pf(path);
  return {f.rows, f.cols, f.records.size(),
          kD2pfHeaderBytes + f.records.size() * (kD2pfIndexEntryBytes + 4ull * f.rows * f.cols)};
}

}  // namespace d2p
