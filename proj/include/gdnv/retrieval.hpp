#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gdnv/checkpoint.hpp"
#include "gdnv/tensor.hpp"

namespace gdnv {

struct Position {
  double x_m = 0.0;  // easting
  double y_m = 0.0;  // northing
};

double distance_m(const Position& a, const Position& b);

struct ImageRecord {
  std::string id;
  std::string image;  // path relative to the manifest directory
  Position position;
  std::string split;  // db, query, train, val, test
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
std::string encode_ppm(const RgbImage& img);

/// Bilinear resize (half-pixel centers) to width x height and scale to (v/255 - 0.5) / 0.25, as (1, 3, H, W).
Tensor<float> image_to_tensor(const RgbImage& img, std::size_t width, std::size_t height);

std::vector<ImageRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const ImageRecord> records);
std::string manifest_line(const ImageRecord& r);

std::vector<ImageRecord> filter_split(std::span<const ImageRecord> records, const std::string& split);

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t places = 64;
  std::size_t views = 8;
  std::size_t width = 128;
  std::size_t height = 96;
  double spacing_m = 100.0;
  /// Extra places whose views are all tagged "train", laid out on a separate row block.
  std::size_t train_places = 0;
  double view_radius_m = 4.0;
  double negative_radius_m = 25.0;
  // view jitter
  double max_shift = 0.22;     // fraction of the view size
  double max_rotation = 0.35;  // radians
  double scale_jitter = 0.2;
  double brightness = 45.0;
  double contrast = 0.35;
  double noise = 12.0;
};

struct SynthDataset {
  std::vector<ImageRecord> records;
  std::vector<RgbImage> images;  // parallel to records
};

SynthDataset synth_dataset(const SynthConfig& cfg);
/// Writes manifest.jsonl and images/<id>.ppm under dir.
void write_dataset(const std::filesystem::path& dir, const SynthDataset& data);

struct Match {
  std::string id;
  double distance = 0.0;
};

class DescriptorIndex {
 public:
  DescriptorIndex() = default;
  explicit DescriptorIndex(std::size_t dim) : dim_(dim) {}

  /// Rows must be unit-norm within 1e-5.
  void add(std::string id, std::span<const float> descriptor);
  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> row(std::size_t i) const { return {rows_.data() + i * dim_, dim_}; }

  /// Exhaustive Euclidean search, ascending distance, ties broken by id.
  std::vector<Match> query_topn(std::span<const float> descriptor, std::size_t n) const;

  void save(Container& c) const;
  static DescriptorIndex load(const Container& c);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> rows_;
};

/// Rows are descriptors of the db records in id order.
DescriptorIndex build_index(std::span<const ImageRecord> db,
                            const std::function<std::vector<float>(const ImageRecord&)>& describe);

struct RecallTable {
  std::vector<std::size_t> ns;
  std::vector<double> recall;
  std::size_t queries = 0;

  std::string format() const;
  bool monotone() const;
};

/// first_hit[i] is the 1-based rank of the first correct result for query i, 0 when none.
RecallTable recall_from_first_hits(std::span<const std::size_t> first_hit, std::span<const std::size_t> ns);

struct QueryDescriptor {
  std::vector<float> descriptor;
  Position position;
};

RecallTable recall_at_n(std::span<const QueryDescriptor> queries, const DescriptorIndex& index,
                        const std::map<std::string, Position>& db_positions, double tolerance_m,
                        std::span<const std::size_t> ns);

inline const std::vector<std::size_t>& default_recall_ns() {
  static const std::vector<std::size_t> ns{1, 5, 10, 20, 25};
  return ns;
}

}  // namespace gdnv
