#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emformer/matrix.hpp"

// Binary feature files: "EMF1", u32 LE frame count T, u32 LE width d, u8
// dtype (0 = f32, 1 = f64), then T*d little-endian values, row-major.

namespace emformer::tools {

struct FeatureFile {
  DType dtype = DType::F64;
  // f32 payloads are widened exactly; writing them back is lossless.
  Matrix<double> values;
};

// Throws FormatError on a bad magic, dtype, truncated or oversized payload
// or non-finite values; Error when the file cannot be opened.
FeatureFile read_feature_file(const std::string& path);
FeatureFile decode_feature_file(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_feature_file(const FeatureFile& file);

// Writes to a temporary file in the same directory, then renames it over
// path, so readers never see a partial file.
void write_feature_file(const std::string& path, const FeatureFile& file);

}  // namespace emformer::tools
