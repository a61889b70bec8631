#include "gdnv/nn.hpp"

#include <cmath>

namespace gdnv {

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& s, bool with_bias) : spec(s), weight(s.weight_shape()) {
  spec.validate();
  if (with_bias) bias.emplace(Shape{s.out_channels, 1, 1, 1}, T(0));
}

template <typename T>
void Conv2d<T>::init(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w);
  const double stddev = gain * std::sqrt(2.0 / fan_in);
  for (auto& v : weight.values()) v = static_cast<T>(rng.normal() * stddev);
  if (bias) bias->fill(T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode mode) {
  std::span<const T> b;
  if (bias) b = bias->data();
  Tensor<T> y = conv2d_forward<T>(x, weight, b, spec);
  if (records(mode)) saved_input_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& upstream) {
  ConvGrads<T> g = conv2d_backward<T>(upstream, saved_input_, weight, spec, bias.has_value());
  auto& gw = weight.grad();
  for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g.weight[i];
  if (bias) {
    auto& gb = bias->grad();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.bias[i];
  }
  return std::move(g.input);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "weight", &weight, true});
  if (bias) out.push_back({prefix + "bias", &*bias, true});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  return batchnorm2d_forward<T>(x, state, mode == Mode::Train, records(mode) ? &cache_ : nullptr);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& upstream) {
  BatchNormGrads<T> g = batchnorm2d_backward<T>(upstream, cache_, state);
  auto& gg = state.gamma.grad();
  auto& gb = state.beta.grad();
  for (std::size_t i = 0; i < gg.size(); ++i) {
    gg[i] += g.gamma[i];
    gb[i] += g.beta[i];
  }
  return std::move(g.input);
}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "gamma", &state.gamma, true});
  out.push_back({prefix + "beta", &state.beta, true});
  out.push_back({prefix + "running_mean", &state.running_mean, false});
  out.push_back({prefix + "running_var", &state.running_var, false});
}

template <typename T>
ConvBnAct<T>::ConvBnAct(const ConvSpec& spec, bool with_act)
    : conv(spec, false), bn(spec.out_channels), act(with_act) {}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y = bn.forward(conv.forward(x, mode), mode);
  if (!act) return y;
  Tensor<T> out = relu(y);
  if (records(mode)) pre_act_ = std::move(y);
  return out;
}

template <typename T>
Tensor<T> ConvBnAct<T>::backward(const Tensor<T>& upstream) {
  if (act) return conv.backward(bn.backward(relu_backward(upstream, pre_act_)));
  return conv.backward(bn.backward(upstream));
}

template <typename T>
void ConvBnAct<T>::collect(ParamList<T>& out, const std::string& prefix) {
  conv.collect(out, prefix + "conv.");
  bn.collect(out, prefix + "bn.");
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) {
    if (p.trainable) p.tensor->grad().assign(p.tensor->numel(), T{});
  }
}

template <typename T>
std::size_t count_trainable(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.tensor->numel();
  }
  return n;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class ConvBnAct<float>;
template class ConvBnAct<double>;
template void zero_grads(ParamList<float>&);
template void zero_grads(ParamList<double>&);
template std::size_t count_trainable(const ParamList<float>&);
template std::size_t count_trainable(const ParamList<double>&);

}  // namespace gdnv
