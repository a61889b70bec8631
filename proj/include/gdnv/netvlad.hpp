#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gdnv/checkpoint.hpp"
#include "gdnv/nn.hpp"

namespace gdnv {

/// Cluster centers plus the decoupled soft-assignment parameters (w_k, b_k).
template <typename T>
struct VladParams {
  VladParams() = default;
  VladParams(std::size_t clusters, std::size_t dim);

  /// w_k = 2 alpha c_k, b_k = -alpha |c_k|^2, so the assignment is softmax(-alpha |x - c_k|^2).
  static VladParams from_centers(std::span<const T> centers, std::size_t clusters, std::size_t dim, double alpha);

  std::size_t clusters() const { return centers.shape().n; }
  std::size_t dim() const { return centers.shape().c; }

  Tensor<T> centers;  // (K, D, 1, 1)
  Tensor<T> weights;  // (K, D, 1, 1)
  Tensor<T> biases;   // (K, 1, 1, 1)
  double alpha = 1.0;
};

/// Softmax over clusters of w_k . x + b_k; x is used as given.
template <typename T>
std::vector<T> soft_assign(std::span<const T> x, const VladParams<T>& params);

/// Soft-assigned VLAD pooling: per-descriptor L2 norm, residual sums, intra-normalization,
/// cluster-major flattening, global L2 norm.
template <typename T>
class NetVladLayer {
 public:
  NetVladLayer() = default;
  explicit NetVladLayer(VladParams<T> p, T eps = T(1e-12)) : params(std::move(p)), eps(eps) {}

  std::size_t output_dim() const { return params.clusters() * params.dim(); }
  /// (N, D, h, w) -> (N, K*D, 1, 1)
  Tensor<T> forward(const Tensor<T>& features, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix = "vlad.");

  VladParams<T> params;
  T eps = T(1e-12);

 private:
  struct ItemCache {
    std::vector<T> raw;         // P x D
    std::vector<T> normalized;  // P x D
    std::vector<T> assign;      // P x K
    std::vector<T> residual;    // K x D, before intra-normalization
    std::vector<T> flat;        // K*D, after intra-normalization
  };
  std::vector<ItemCache> cache_;
  Shape input_shape_;
};

/// Single feature map (1, D, h, w) to its global vector.
template <typename T>
std::vector<T> vlad_aggregate(const Tensor<T>& features, const VladParams<T>& params, T eps = T(1e-12));

struct KMeansResult {
  std::vector<double> centers;  // K x D
  double distortion = 0.0;      // mean squared distance to the assigned center
  std::size_t iterations = 0;
};

/// Lloyd iterations from k-means++ seeding; empty clusters are reseeded from the farthest point.
KMeansResult kmeans(std::span<const double> data, std::size_t rows, std::size_t dim, std::size_t k,
                    std::uint64_t seed, std::size_t max_iters = 100, double tol = 1e-7);

/// ln(100) / mean(second-nearest minus nearest squared distance) over the sample.
double init_alpha(std::span<const double> data, std::size_t rows, std::size_t dim, std::span<const double> centers,
                  std::size_t k);

struct PcaWhitening {
  std::vector<double> mean;        // input_dim
  std::vector<double> projection;  // out_dim x input_dim, row-major
  std::vector<double> variances;   // retained eigenvalues, descending
  std::size_t input_dim = 0;
  std::size_t out_dim = 0;
  double epsilon = 1e-8;

  /// Projects (v - mean) and L2-normalizes.
  std::vector<double> apply(std::span<const double> v) const;
  std::vector<float> apply(std::span<const float> v) const;

  void save(Container& c) const;
  static PcaWhitening load(const Container& c);
};

PcaWhitening fit_pca_whitening(std::span<const double> data, std::size_t rows, std::size_t dim,
                               std::size_t out_dim, double epsilon = 1e-8);

}  // namespace gdnv
