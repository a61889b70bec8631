#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gdnv/ops.hpp"
#include "gdnv/rng.hpp"
#include "gdnv/tensor.hpp"

namespace gdnv {

// Infer: running stats, nothing saved. Train: batch stats, saved for backward.
// Frozen: running stats, saved for backward.
enum class Mode { Infer, Train, Frozen };

inline bool records(Mode m) { return m != Mode::Infer; }

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const ConvSpec& spec, bool with_bias);

  /// He-normal weights times gain, zero bias.
  void init(Rng& rng, double gain = 1.0);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  /// Accumulates parameter gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);

  ConvSpec spec;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

 private:
  Tensor<T> saved_input_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels, BatchNormConfig cfg = {}) : state(channels, cfg) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);

  BatchNormState<T> state;

 private:
  BatchNormCache<T> cache_;
};

/// Init scale of a convolution that feeds a BatchNorm, relative to He-normal. The normalized output
/// ignores it, but the step a fixed learning rate takes relative to the weights grows as it shrinks.
inline constexpr double kBnConvInitGain = 0.2;

/// Convolution (no bias) followed by batch normalization and an optional ReLU.
template <typename T>
class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(const ConvSpec& spec, bool act);

  void init(Rng& rng) { conv.init(rng, kBnConvInitGain); }
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& upstream);
  void collect(ParamList<T>& out, const std::string& prefix);
  void collect_bn(std::vector<BatchNormState<T>*>& out) { out.push_back(&bn.state); }

  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  bool act = true;

 private:
  Tensor<T> pre_act_;
};

/// Zeroes the gradients of every trainable tensor in the list.
template <typename T>
void zero_grads(ParamList<T>& params);

template <typename T>
std::size_t count_trainable(const ParamList<T>& params);

}  // namespace gdnv
