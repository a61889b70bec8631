#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "gdnv/tensor.hpp"

namespace gdnv {

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t dilation_h = 1, dilation_w = 1;
  std::size_t groups = 1;

  /// Square kernel with "same" padding r(k-1)/2 for odd k.
  static ConvSpec square(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                         std::size_t dilation = 1, std::size_t groups = 1);

  void validate() const;
  /// Throws ShapeError when the output would be empty.
  std::size_t out_h(std::size_t h) const;
  std::size_t out_w(std::size_t w) const;
  Shape output_shape(const Shape& in) const;
  Shape weight_shape() const;
  bool is_depthwise() const { return groups == in_channels && groups > 1; }
};

/// Worker cap for ops that split over batch items. 0 means hardware concurrency.
void set_num_threads(std::size_t n);
std::size_t num_threads();
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

// Cross-correlation with zero padding, stride, dilation and groups.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, std::span<const T> bias,
                         const ConvSpec& spec);

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& upstream, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvSpec& spec, bool with_bias);

struct BatchNormConfig {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

template <typename T>
struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 1, BatchNormConfig cfg = {});

  std::size_t channels() const { return gamma.numel(); }

  Tensor<T> gamma;  // (C,1,1,1)
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  BatchNormConfig config;
  /// When set, running stats accumulate a cumulative average instead of the momentum update.
  bool cumulative = false;
  std::size_t batches_seen = 0;
};

/// Saved quantities for the backward pass.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;
  std::vector<T> inv_std;
  bool training = false;
};

template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& input, BatchNormState<T>& state, bool training,
                              BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& upstream, const BatchNormCache<T>& cache,
                                       const BatchNormState<T>& state);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Passes upstream where the forward input was positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream, const Tensor<T>& input);

/// clip(x/6 + 1/2, 0, 1)
template <typename T>
T hard_sigmoid(T x);
template <typename T>
T hard_sigmoid_grad(T x);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& upstream, const Shape& input_shape);

/// Row-wise softmax of a row-major rows x cols matrix.
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t rows, std::size_t cols);

/// x / max(|x|, eps)
template <typename T>
std::vector<T> l2_normalize(std::span<const T> x, T eps = T(1e-12));

/// Backward of l2_normalize given the forward input.
template <typename T>
std::vector<T> l2_normalize_backward(std::span<const T> upstream, std::span<const T> x, T eps = T(1e-12));

}  // namespace gdnv
