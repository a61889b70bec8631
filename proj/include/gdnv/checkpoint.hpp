#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "gdnv/tensor.hpp"

namespace gdnv {

// "GDNV" container: magic, u32 version, then records until end of file.
// Record: u32 name length, UTF-8 name, u32 rank, u64 dims, u8 dtype, raw little-endian values.
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t {
  Float32 = 0,
  Utf8 = 1,  // rank 1, dim = byte count
};

struct Record {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::Float32;
  std::vector<float> values;
  std::string text;
};

class Container {
 public:
  void put(std::string name, const Tensor<float>& t);
  void put(std::string name, std::vector<std::uint64_t> dims, std::vector<float> values);
  void put_text(std::string name, std::string text);

  bool contains(std::string_view name) const { return find(name) != nullptr; }
  const Record* find(std::string_view name) const;
  /// Rank-4 records come back with their shape; lower ranks are left-padded with 1s.
  Tensor<float> tensor(std::string_view name) const;
  const std::string& text(std::string_view name) const;

  const std::vector<Record>& records() const { return records_; }
  /// Appends every record of another container, replacing same-named ones.
  void merge(const Container& other);

  std::string encode() const;
  static Container decode(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  void upsert(Record r);
  std::vector<Record> records_;
};

}  // namespace gdnv
