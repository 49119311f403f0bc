#include "rilke/matrix.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace rilke {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::rank: return "rank";
    case ErrorKind::config: return "config";
    case ErrorKind::input: return "input";
    case ErrorKind::state: return "state";
    case ErrorKind::parse: return "parse";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::load: return "load";
    case ErrorKind::training: return "training";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

namespace {

constexpr char kMagic[4] = {'R', 'I', 'L', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_blob(const Matrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kBlobHeaderBytes + 4 * m.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (float v : m.flat()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

BlobHeader decode_blob_header(std::span<const std::uint8_t> bytes, const std::string& origin) {
  require(bytes.size() >= kBlobHeaderBytes, ErrorKind::integrity,
          origin + ": truncated blob header");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::integrity,
          origin + ": bad blob magic");
  BlobHeader h{get_u32(bytes.data() + 4), get_u32(bytes.data() + 8), get_u32(bytes.data() + 12)};
  require(h.version == kBlobVersion, ErrorKind::integrity,
          origin + ": unsupported blob version " + std::to_string(h.version));
  return h;
}

Matrix decode_blob(std::span<const std::uint8_t> bytes, const std::string& origin) {
  const BlobHeader h = decode_blob_header(bytes, origin);
  const std::size_t n = static_cast<std::size_t>(h.rows) * h.cols;
  require(bytes.size() == kBlobHeaderBytes + 4 * n, ErrorKind::integrity,
          origin + ": blob payload size mismatch (truncated or padded)");
  std::vector<float> data(n);
  const std::uint8_t* p = bytes.data() + kBlobHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  Matrix m(h.rows, h.cols, std::move(data));
  require(m.all_finite(), ErrorKind::integrity, origin + ": non-finite value in blob");
  return m;
}

void write_blob(const std::filesystem::path& path, const Matrix& m) {
  write_file_atomic(path, encode_blob(m));
}

Matrix read_blob(const std::filesystem::path& path) {
  return decode_blob(read_file_bytes(path), path.string());
}

BlobHeader read_blob_header(const std::filesystem::path& path) {
  return decode_blob_header(read_file_bytes(path), path.string());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::input, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::input, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::load, "missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_file_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::load, "missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace rilke
