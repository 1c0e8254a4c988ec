#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "d2p/error.hpp"

namespace d2p {

// Binary container for per-sentence K x D feature matrices.
//
//   offset  size        field
//   0       4           magic "D2PF"
//   4       4           version (u32, = 1)
//   8       4           dtype code (u32, 1 = float32)
//   12      4           K (u32)
//   16      4           D (u32)
//   20      4           record count N (u32)
//   24      16 * N      index: N x {sentence_id u64, absolute byte offset u64}
//   ...     4*K*D each  records, row-major float32
//
// All integers and floats are little-endian. Offsets are strictly
// increasing, records are contiguous and the file ends after the last one.
inline constexpr std::uint32_t kD2pfVersion = 1;
inline constexpr std::uint32_t kD2pfFloat32 = 1;
inline constexpr std::size_t kD2pfHeaderBytes = 24;
inline constexpr std::size_t kD2pfIndexEntryBytes = 16;

enum class D2pfErrorKind { kBadMagic, kVersion, kDType, kTruncated, kIndex, kNonFinite, kIo };

const char* d2pf_error_name(D2pfErrorKind k);

class D2pfError : public DataError {
 public:
  D2pfError(D2pfErrorKind kind, const std::string& what)
      : DataError(std::string("D2PF ") + d2pf_error_name(kind) + ": " + what),
        kind_(kind),
        detail_(what) {}
  D2pfErrorKind d2pf_kind() const { return kind_; }
  const std::string& detail() const { return detail_; }

 private:
  D2pfErrorKind kind_;
  std::string detail_;
};

struct FeatureRecord {
  std::uint64_t sentence_id = 0;
  std::vector<float> values;  // K * D, row-major
};

struct D2pfFile {
  std::uint32_t rows = 0;  // K
  std::uint32_t cols = 0;  // D
  std::vector<FeatureRecord> records;
};

std::vector<unsigned char> encode_d2pf(const D2pfFile& file);
D2pfFile decode_d2pf(const std::vector<unsigned char>& bytes);

void write_d2pf(const std::string& path, const D2pfFile& file);
D2pfFile read_d2pf(const std::string& path);

struct D2pfSummary {
  std::uint32_t rows = 0, cols = 0;
  std::size_t records = 0;
  std::uint64_t bytes = 0;
};

// Full structural check of a file on disk; throws D2pfError on the first
// violation.
D2pfSummary validate_d2pf(const std::string& path);

}  // namespace d2p
