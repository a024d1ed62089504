#include "emformer_tools/feature_file.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

#include <unistd.h>

#include "emformer/error.hpp"

namespace emformer::tools {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'F', '1'};
constexpr std::size_t kHeader = 13;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

FeatureFile decode_feature_file(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeader) throw FormatError("feature file: truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("feature file: bad magic (expected EMF1)");
  const std::uint32_t t = get_le<std::uint32_t>(bytes.data() + 4);
  const std::uint32_t d = get_le<std::uint32_t>(bytes.data() + 8);
  const std::uint8_t code = bytes[12];
  if (code > 1) throw FormatError("feature file: unknown dtype code " + std::to_string(code));
  const DType dtype = code == 0 ? DType::F32 : DType::F64;
  const std::size_t width = code == 0 ? 4 : 8;
  const std::uint64_t expected = static_cast<std::uint64_t>(t) * d * width;
  const std::uint64_t actual = bytes.size() - kHeader;
  if (actual != expected) {
    throw FormatError("feature file: header says " + std::to_string(t) + "x" + std::to_string(d) + " (" +
                      std::to_string(expected) + " payload bytes) but payload has " + std::to_string(actual));
  }
  FeatureFile f{dtype, Matrix<double>(t, d)};
  auto out = f.values.data();
  const std::uint8_t* p = bytes.data() + kHeader;
  for (std::size_t i = 0; i < out.size(); ++i, p += width) {
    const double v = code == 0 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                               : std::bit_cast<double>(get_le<std::uint64_t>(p));
    if (!std::isfinite(v)) {
      throw FormatError("feature file: non-finite value at frame " + std::to_string(i / d) + ", dim " +
                        std::to_string(i % d));
    }
    out[i] = v;
  }
  return f;
}

std::vector<std::uint8_t> encode_feature_file(const FeatureFile& file) {
  const Matrix<double>& m = file.values;
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() || m.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError("feature file: dimensions exceed 32 bits");
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, static_cast<std::uint32_t>(m.rows()));
  put_le(out, static_cast<std::uint32_t>(m.cols()));
  out.push_back(file.dtype == DType::F32 ? 0 : 1);
  for (double v : m.data()) {
    if (!std::isfinite(v)) throw FormatError("feature file: refusing to write a non-finite value");
    if (file.dtype == DType::F32) {
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

FeatureFile read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("error reading feature file '" + path + "'");
  return decode_feature_file(bytes);
}

void write_feature_file(const std::string& path, const FeatureFile& file) {
  const std::vector<std::uint8_t> bytes = encode_feature_file(file);
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() /
                       (target.filename().string() + ".tmp." + std::to_string(static_cast<long>(::getpid())));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot create '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("error writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot rename onto '" + path + "'");
  }
}

}  // namespace emformer::tools
