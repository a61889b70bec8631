#pragma once

#include <optional>
#include <span>
#include <vector>

#include "gdnv/checkpoint.hpp"
#include "gdnv/ghostnet.hpp"
#include "gdnv/netvlad.hpp"

namespace gdnv {

/// GhostCNN backbone followed by the NetVLAD head, with optional PCA-whitening at inference.
template <typename T>
class PlaceModel {
 public:
  PlaceModel() = default;
  PlaceModel(const GhostCNNConfig& cfg, std::size_t clusters);

  void init(Rng& rng);
  /// (N, 3, H, W) -> (N, K*D, 1, 1), unit rows.
  Tensor<T> forward(const Tensor<T>& images, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  ParamList<T> parameters();

  /// Inference descriptor of one image, reduced when a whitening is attached.
  std::vector<T> global_descriptor(const Tensor<T>& image);
  std::size_t descriptor_dim() const;

  /// Sets every BatchNorm to accumulate (or stop accumulating) a cumulative average of batch stats.
  void set_bn_cumulative(bool on);

  Container to_container();
  static PlaceModel from_container(const Container& c);

  GhostCNN<T> backbone;
  NetVladLayer<T> vlad;
  std::optional<PcaWhitening> pca;
};

}  // namespace gdnv
