#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gdnv/nn.hpp"

namespace gdnv {

/// Single-layer receptive extent (k-1)*r + 1.
std::size_t effective_kernel(std::size_t k, std::size_t dilation);

/// Receptive field of a stack of stride-1 layers: 1 + sum((k_i - 1) * r_i).
std::size_t stacked_receptive_field(const std::vector<std::pair<std::size_t, std::size_t>>& kernel_dilation);

struct GhostModuleConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t ratio = 2;
  std::size_t primary_kernel = 1;
  std::size_t cheap_kernel = 3;
  std::size_t dilation = 1;
  bool relu = true;

  std::size_t intrinsic() const { return out_channels / ratio; }
  void validate() const;
  ConvSpec primary_spec() const;
  /// Depthwise cheap op producing (ratio-1) ghost maps per intrinsic map.
  ConvSpec cheap_spec() const;
};

struct BottleneckEntry {
  std::size_t in_channels = 16;
  std::size_t mid_channels = 16;
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool se = false;
  std::size_t dilation = 1;

  bool identity_shortcut() const { return stride == 1 && in_channels == out_channels; }
};

struct GhostCNNConfig {
  std::size_t stem_channels = 24;
  std::vector<std::vector<BottleneckEntry>> stages;
  std::size_t final_channels = 960;
  double channel_multiplier = 1.0;
  std::size_t ghost_ratio = 2;
  std::size_t primary_kernel = 1;
  std::size_t cheap_kernel = 3;
  std::size_t se_reduction = 4;

  /// Widths after applying the channel multiplier (rounded to multiples of 4).
  GhostCNNConfig resolved() const;
  std::size_t total_stride() const;
  void validate() const;
};

/// Dilation scheme "a" or "a-b": rate a in stages 1-4, b in stage 5.
struct DilationScheme {
  std::size_t early = 1;
  std::size_t last = 1;
  static DilationScheme parse(const std::string& text);
  std::string str() const;
};

GhostCNNConfig default_ghostcnn_config(const DilationScheme& scheme = {}, double channel_multiplier = 1.0);
GhostCNNConfig default_ghostcnn_config(const std::string& scheme, double channel_multiplier = 1.0);

std::string config_to_json(const GhostCNNConfig& cfg);
GhostCNNConfig config_from_json(const std::string& text);

/// Rounds v to a multiple of divisor, never below 90% of v.
std::size_t make_divisible(double v, std::size_t divisor = 4);

template <typename T>
class GhostModule {
 public:
  GhostModule() = default;
  explicit GhostModule(const GhostModuleConfig& cfg);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);
  void collect_bn(std::vector<BatchNormState<T>*>& out);

  GhostModuleConfig cfg;
  ConvBnAct<T> primary;
  std::optional<ConvBnAct<T>> cheap;
};

/// Pool, reduce, ReLU, expand, hard-sigmoid gate.
template <typename T>
class SEBlock {
 public:
  SEBlock() = default;
  SEBlock(std::size_t channels, std::size_t reduction);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);

  Conv2d<T> reduce;
  Conv2d<T> expand;

 private:
  Tensor<T> input_;
  Tensor<T> mid_pre_;
  Tensor<T> gate_pre_;
  Tensor<T> gate_;
};

template <typename T>
class GhostBottleneck {
 public:
  GhostBottleneck() = default;
  GhostBottleneck(const BottleneckEntry& entry, const GhostCNNConfig& net);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);
  void collect_bn(std::vector<BatchNormState<T>*>& out);

  BottleneckEntry entry;
  GhostModule<T> expand;
  std::optional<ConvBnAct<T>> downsample;
  std::optional<SEBlock<T>> se;
  GhostModule<T> project;
  std::optional<ConvBnAct<T>> shortcut_dw;
  std::optional<ConvBnAct<T>> shortcut_pw;
};

template <typename T>
class GhostCNN {
 public:
  GhostCNN() = default;
  /// Widths are taken from cfg.resolved().
  explicit GhostCNN(const GhostCNNConfig& cfg);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& image, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix = "backbone.");
  void collect_bn(std::vector<BatchNormState<T>*>& out);
  std::size_t output_channels() const { return resolved_.final_channels; }
  const GhostCNNConfig& config() const { return config_; }
  const GhostCNNConfig& resolved() const { return resolved_; }

  /// Shapes after the stem, each stage, and the final conv, by shape inference only.
  std::vector<Shape> stage_shapes(const Shape& input) const;

  ConvBnAct<T> stem;
  std::vector<std::vector<GhostBottleneck<T>>> stages;
  ConvBnAct<T> final_conv;

 private:
  GhostCNNConfig config_;
  GhostCNNConfig resolved_;
};

}  // namespace gdnv
