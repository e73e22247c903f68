#pragma once

// "ABT1" tensor blob container shared by datasets and checkpoints.
//
// Layout (little-endian): magic "ABT1" | dtype u8 (0 = u8, 1 = f32) | rank u8 |
// rank x u32 dims | row-major payload.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace annoboot::blob {

enum class DType : std::uint8_t { U8 = 0, F32 = 1 };

enum class ErrorKind { BadHeader, Truncated, MissingBlob, ShapeMismatch, MalformedManifest, Io };

const char* to_string(ErrorKind kind);

class BlobError : public std::runtime_error {
 public:
  BlobError(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

/// Decoded blob. Exactly one of `u8` / `f32` is populated, matching `dtype`.
struct Blob {
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> u8;
  std::vector<float> f32;

  std::size_t element_count() const;
};

Blob make_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data);
Blob make_f32(std::vector<std::uint32_t> dims, std::vector<float> data);

/// Appends one encoded blob to `out`.
void encode(const Blob& blob, std::vector<std::uint8_t>& out);

/// Decodes the blob starting at `offset`. Sets `next` (if given) to the byte after it.
Blob decode(const std::vector<std::uint8_t>& bytes, std::size_t offset,
            std::size_t* next = nullptr);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace annoboot::blob
