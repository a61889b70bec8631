#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gdnv/model.hpp"
#include "gdnv/retrieval.hpp"

namespace gdnv {

struct TripletLossConfig {
  double margin = 0.1;
  std::size_t negatives_per_tuple = 10;
  std::size_t negative_pool = 100;
  double positive_radius_m = 10.0;
  double negative_radius_m = 25.0;

  void validate() const;
};

struct SgdConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t batch_size = 4;

  void validate() const;
};

struct TripletLossResult {
  double loss = 0.0;
  std::size_t best_positive = 0;    // index into the positive list
  std::vector<double> grad_positive;  // d loss / d d2(q, p_i)
  std::vector<double> grad_negative;  // d loss / d d2(q, n_j)
  std::size_t active = 0;             // negatives inside the margin
};

/// sum_j max(0, min_i d2p_i + margin - d2n_j); ties among positives go to the lowest index.
TripletLossResult triplet_loss(std::span<const double> d2_positive, std::span<const double> d2_negative,
                               double margin);

/// Rows of desc: query, positives, then negatives. Adds scale * d loss / d desc into grad and returns the loss.
template <typename T>
double tuple_loss(std::span<const T> desc, std::size_t dim, std::size_t positives, double margin, std::span<T> grad,
                  double scale = 1.0);

/// Indices refer to the training record list, which is sorted by id.
struct TripletTuple {
  std::size_t query = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;  // hardest first
  std::size_t best_positive = 0;       // element of positives
};

/// Squared Euclidean distance between rows of a row-major descriptor matrix.
double squared_distance(std::span<const float> a, std::span<const float> b);

/// Positives within the positive radius, a seeded pool of candidates beyond the negative radius,
/// the hardest of them under the cached descriptors. Returns nullopt when the query has no positive.
std::optional<TripletTuple> mine_tuple(std::size_t query, std::span<const ImageRecord> records,
                                       std::span<const float> cache, std::size_t dim, const TripletLossConfig& cfg,
                                       Rng& rng);

/// g = grad + wd * param; v = momentum * v + g; param -= lr * v.
template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, const SgdConfig& cfg);

/// Momentum buffers keyed by parameter name.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }
  void step(ParamList<T>& params);
  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::map<std::string, std::vector<T>> velocity_;
};

/// Training images decoded and resized once.
struct TrainingSet {
  std::vector<ImageRecord> records;  // sorted by id
  std::vector<Tensor<float>> images;  // (1, 3, H, W)
};

TrainingSet load_training_set(std::span<const ImageRecord> records,
                              const std::function<Tensor<float>(const ImageRecord&)>& load);

/// Global descriptors (rows, in record order) computed in inference mode.
std::vector<float> extract_descriptors(PlaceModel<float>& model, std::span<const Tensor<float>> images,
                                       std::size_t batch = 16);

struct VladInitConfig {
  std::size_t calibration_images = 128;
  std::size_t kmeans_images = 128;
  std::size_t max_local_descriptors = 20000;
  std::size_t kmeans_iters = 100;
};

/// Calibrates BatchNorm running statistics with cumulative batch stats, then seeds the VLAD centers
/// by k-means over L2-normalized local descriptors and sets alpha from the nearest-center gap.
void initialize_model(PlaceModel<float>& model, std::span<const Tensor<float>> images, std::uint64_t seed,
                      const VladInitConfig& cfg = {});

struct BatchLog {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;  // summed over the batch's tuples
  std::size_t tuples = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;  // per tuple
  std::size_t tuples = 0;
  std::size_t skipped = 0;
  std::size_t batches = 0;
};

class Trainer {
 public:
  Trainer(PlaceModel<float>& model, const TrainingSet& data, TripletLossConfig loss, SgdConfig sgd,
          std::uint64_t seed);

  /// Refreshes the descriptor cache, shuffles queries, mines tuples and takes one step per batch
  /// on the summed tuple losses.
  EpochStats train_epoch(std::size_t epoch, const std::function<void(const BatchLog&)>& on_batch = {});

  const std::vector<float>& cache() const { return cache_; }

 private:
  double train_batch(std::span<const TripletTuple> tuples);

  PlaceModel<float>& model_;
  const TrainingSet& data_;
  TripletLossConfig loss_;
  Sgd<float> sgd_;
  std::uint64_t seed_;
  std::vector<float> cache_;
};

}  // namespace gdnv
