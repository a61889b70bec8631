#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gdnv/ghostnet.hpp"

namespace gdnv {

struct LayerCost {
  std::string name;
  Shape output;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;  // 2 * macs
  std::uint64_t params = 0;
};

/// One convolution; bias and normalization-affine parameters are counted when flagged.
LayerCost conv_cost(const ConvSpec& spec, const Shape& in, bool bias = false, bool norm = false,
                    std::string name = "conv");

/// Primary conv + BN at m outputs plus the depthwise cheap op + BN at (s-1)m outputs.
LayerCost ghost_module_cost(const GhostModuleConfig& cfg, const Shape& in, std::string name = "ghost");

struct ConvLayer {
  std::string name;
  ConvSpec spec;
  bool bias = false;
  bool norm = true;
};
struct GhostModuleLayer {
  std::string name;
  GhostModuleConfig cfg;
};
struct BottleneckLayer {
  std::string name;
  BottleneckEntry entry;
  std::size_t ghost_ratio = 2;
  std::size_t primary_kernel = 1;
  std::size_t cheap_kernel = 3;
  std::size_t se_reduction = 4;
};
struct SELayer {
  std::string name;
  std::size_t channels = 0;
  std::size_t reduction = 4;
};
struct PoolLayer {
  std::string name;
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;
};
struct VladHeadLayer {
  std::string name;
  std::size_t clusters = 64;
};

using LayerSpec = std::variant<ConvLayer, GhostModuleLayer, BottleneckLayer, SELayer, PoolLayer, VladHeadLayer>;

struct ArchitectureSpec {
  std::string name;
  Shape input;
  std::vector<LayerSpec> layers;
};

struct CostReport {
  std::string name;
  Shape input;
  std::vector<LayerCost> layers;  // layers with zero cost (pooling) keep their row for the shape trail
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  /// PCA projection parameters, reported apart from the headline totals.
  std::uint64_t pca_params = 0;
};

/// Chains shapes through the layers; throws ShapeError on a channel mismatch.
CostReport model_cost(const ArchitectureSpec& arch);

struct CostComparison {
  std::string baseline;
  std::string candidate;
  double flops_reduction = 0.0;  // percent
  double params_reduction = 0.0;
};

/// 100 * (1 - b / a) on both axes.
CostComparison compare_costs(const CostReport& a, const CostReport& b);

ArchitectureSpec ghostcnn_netvlad_arch(const GhostCNNConfig& cfg, std::size_t height, std::size_t width,
                                       std::size_t clusters);
/// The 13 convolutions of VGG16, cropped at the last one (D = 512), then the VLAD head.
ArchitectureSpec vgg16_netvlad_arch(std::size_t height, std::size_t width, std::size_t clusters);
/// The 5 convolutions of AlexNet, cropped at the last one (D = 256), then the VLAD head.
ArchitectureSpec alexnet_netvlad_arch(std::size_t height, std::size_t width, std::size_t clusters);

/// Names accepted by named_arch: ghostcnn-netvlad, vgg16-netvlad, alexnet-netvlad.
ArchitectureSpec named_arch(const std::string& name, std::size_t height, std::size_t width, std::size_t clusters,
                            const std::string& dilation = "1", double channel_multiplier = 1.0);

std::string render_text(const CostReport& report);
std::string render_comparison_text(const CostComparison& c);
std::string render_json(const std::vector<CostReport>& reports, const std::optional<CostComparison>& comparison);

}  // namespace gdnv
