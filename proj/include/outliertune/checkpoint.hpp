#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "outliertune/block.hpp"
#include "outliertune/transform.hpp"

namespace otune {

// OTUN1 container: "OTUN1", u32 tensor count, then per tensor
//   u16 name length, name bytes, u8 dtype, u32 rows, u32 cols, row-major payload.
// All integers and floats little-endian.
enum class DType : std::uint8_t { kF64 = 0, kF32 = 1, kI8 = 2 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF64;
  std::uint32_t rows = 0, cols = 0;
  std::vector<double> values;  // f64 / f32 payloads (f32 widened on read)
  std::vector<std::int8_t> codes;  // i8 payload
};

class TensorArchive {
 public:
  void add(std::string name, const MatF& m, DType dtype = DType::kF64);
  void add(std::string name, std::span<const double> v, DType dtype = DType::kF64);
  void add(std::string name, const MatI8& m);

  bool contains(std::string_view name) const;
  // Throw FormatError when missing or of the wrong kind.
  MatF matrix(std::string_view name) const;
  std::vector<double> vector(std::string_view name) const;
  MatI8 codes(std::string_view name) const;
  double scalar(std::string_view name) const;

  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }

  std::vector<std::uint8_t> encode() const;
  // Throws FormatError on bad magic, truncation, unknown dtype, duplicate names or
  // trailing bytes.
  static TensorArchive decode(std::span<const std::uint8_t> bytes);

 private:
  const NamedTensor& find(std::string_view name) const;
  std::vector<NamedTensor> tensors_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes);

// f32 storage halves the file but loses the exact round trip.
TensorArchive to_archive(const BlockModel& m, DType dtype = DType::kF64);
TensorArchive to_archive(const TransformedBlock& t);
BlockModel model_from_archive(const TensorArchive& a);
TransformedBlock transformed_from_archive(const TensorArchive& a);
bool is_transformed(const TensorArchive& a);

void save_model(const std::filesystem::path& p, const BlockModel& m, DType dtype = DType::kF64);
BlockModel load_model(const std::filesystem::path& p);
void save_transformed(const std::filesystem::path& p, const TransformedBlock& t);
TransformedBlock load_transformed(const std::filesystem::path& p);

}  // namespace otune
