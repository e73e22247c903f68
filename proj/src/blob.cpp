#include "annoboot/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace annoboot::blob {

static_assert(std::endian::native == std::endian::little,
              "blob encoding assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'B', 'T', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadHeader: return "bad header";
    case ErrorKind::Truncated: return "truncated tensor";
    case ErrorKind::MissingBlob: return "missing blob";
    case ErrorKind::ShapeMismatch: return "shape mismatch";
    case ErrorKind::MalformedManifest: return "malformed manifest";
    case ErrorKind::Io: return "i/o error";
  }
  return "unknown";
}

std::size_t Blob::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Blob make_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data) {
  Blob b{DType::U8, std::move(dims), std::move(data), {}};
  if (b.element_count() != b.u8.size()) {
    throw BlobError(ErrorKind::ShapeMismatch, "u8 payload size does not match dims");
  }
  return b;
}

Blob make_f32(std::vector<std::uint32_t> dims, std::vector<float> data) {
  Blob b{DType::F32, std::move(dims), {}, std::move(data)};
  if (b.element_count() != b.f32.size()) {
    throw BlobError(ErrorKind::ShapeMismatch, "f32 payload size does not match dims");
  }
  return b;
}

void encode(const Blob& blob, std::vector<std::uint8_t>& out) {
  if (blob.dims.size() > 255) throw BlobError(ErrorKind::ShapeMismatch, "rank exceeds 255");
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(blob.dtype));
  out.push_back(static_cast<std::uint8_t>(blob.dims.size()));
  for (auto d : blob.dims) put_u32(out, d);
  if (blob.dtype == DType::U8) {
    out.insert(out.end(), blob.u8.begin(), blob.u8.end());
  } else {
    const auto* p = reinterpret_cast<const std::uint8_t*>(blob.f32.data());
    out.insert(out.end(), p, p + blob.f32.size() * sizeof(float));
  }
}

Blob decode(const std::vector<std::uint8_t>& bytes, std::size_t offset, std::size_t* next) {
  if (offset > bytes.size() || bytes.size() - offset < 6) {
    throw BlobError(ErrorKind::Truncated, "header extends past end of file");
  }
  const std::uint8_t* p = bytes.data() + offset;
  if (std::memcmp(p, kMagic, 4) != 0) {
    throw BlobError(ErrorKind::BadHeader, "magic bytes are not ABT1 at offset " +
                                              std::to_string(offset));
  }
  const std::uint8_t code = p[4];
  if (code > 1) throw BlobError(ErrorKind::BadHeader, "unknown dtype code " + std::to_string(code));
  const std::size_t rank = p[5];
  std::size_t pos = offset + 6;
  if (bytes.size() - pos < 4 * rank) throw BlobError(ErrorKind::Truncated, "dims cut short");
  Blob b;
  b.dtype = static_cast<DType>(code);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) b.dims.push_back(get_u32(bytes.data() + pos));
  const std::size_t count = b.element_count();
  const std::size_t width = b.dtype == DType::U8 ? 1 : sizeof(float);
  if ((bytes.size() - pos) / width < count) {
    throw BlobError(ErrorKind::Truncated, "payload needs " + std::to_string(count * width) +
                                              " bytes, " + std::to_string(bytes.size() - pos) +
                                              " available");
  }
  if (b.dtype == DType::U8) {
    b.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                bytes.begin() + static_cast<std::ptrdiff_t>(pos + count));
  } else {
    b.f32.resize(count);
    std::memcpy(b.f32.data(), bytes.data() + pos, count * sizeof(float));
  }
  if (next) *next = pos + count * width;
  return b;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BlobError(ErrorKind::MissingBlob, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BlobError(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw BlobError(ErrorKind::Io, "short write to " + path.string());
}

}  // namespace annoboot::blob
