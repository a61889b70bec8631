#pragma once

// Reference implementations shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gdnv/netvlad.hpp"
#include "gdnv/ops.hpp"
#include "gdnv/rng.hpp"

namespace gdnv::oracle {

// Direct definition, one output element at a time.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>& b,
                          const ConvSpec& s) {
  const Shape in = x.shape();
  const long oh = (static_cast<long>(in.h + 2 * s.pad_h) - static_cast<long>(s.dilation_h * (s.kernel_h - 1) + 1)) /
                      static_cast<long>(s.stride_h) + 1;
  const long ow = (static_cast<long>(in.w + 2 * s.pad_w) - static_cast<long>(s.dilation_w * (s.kernel_w - 1) + 1)) /
                      static_cast<long>(s.stride_w) + 1;
  Tensor<double> y({in.n, s.out_channels, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  const std::size_t cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t o = 0; o < s.out_channels; ++o)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double acc = b.empty() ? 0.0 : b[o];
          const std::size_t g = o / cout_g;
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t u = 0; u < s.kernel_h; ++u)
              for (std::size_t v = 0; v < s.kernel_w; ++v) {
                const long r = i * static_cast<long>(s.stride_h) - static_cast<long>(s.pad_h) +
                               static_cast<long>(u * s.dilation_h);
                const long q = j * static_cast<long>(s.stride_w) - static_cast<long>(s.pad_w) +
                               static_cast<long>(v * s.dilation_w);
                if (r < 0 || q < 0 || r >= static_cast<long>(in.h) || q >= static_cast<long>(in.w)) continue;
                acc += x.at(n, g * cin_g + c, r, q) * w.at(o, c, u, v);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

inline ConvSpec random_spec(Rng& rng) {
  ConvSpec s;
  const std::size_t groups_choices[] = {1, 1, 2, 3};
  s.groups = groups_choices[rng.index(4)];
  s.in_channels = s.groups * (1 + rng.index(3));
  s.out_channels = s.groups * (1 + rng.index(3));
  if (rng.index(4) == 0) {
    s.groups = s.in_channels;
    s.out_channels = s.in_channels * (1 + rng.index(2));
  }
  s.kernel_h = 1 + rng.index(4);
  s.kernel_w = 1 + rng.index(4);
  s.stride_h = 1 + rng.index(3);
  s.stride_w = 1 + rng.index(3);
  const std::size_t dilations[] = {1, 2, 3, 5};
  s.dilation_h = dilations[rng.index(4)];
  s.dilation_w = dilations[rng.index(4)];
  s.pad_h = rng.index(4);
  s.pad_w = rng.index(4);
  return s;
}

// VLAD written out element by element.
inline std::vector<double> brute_vlad(const Tensor<double>& f, const VladParams<double>& p) {
  const std::size_t D = f.shape().c, N = f.shape().plane(), K = p.clusters();
  std::vector<std::vector<double>> x(N, std::vector<double>(D));
  for (std::size_t i = 0; i < N; ++i) {
    double nrm = 0;
    for (std::size_t j = 0; j < D; ++j) nrm += f.plane(0, j)[i] * f.plane(0, j)[i];
    nrm = std::max(std::sqrt(nrm), 1e-12);
    for (std::size_t j = 0; j < D; ++j) x[i][j] = f.plane(0, j)[i] / nrm;
  }
  std::vector<double> V(K * D, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> logit(K);
    for (std::size_t k = 0; k < K; ++k) {
      logit[k] = p.biases[k];
      for (std::size_t j = 0; j < D; ++j) logit[k] += p.weights[k * D + j] * x[i][j];
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0;
    for (auto& l : logit) z += std::exp(l - mx);
    for (std::size_t k = 0; k < K; ++k) {
      const double a = std::exp(logit[k] - mx) / z;
      for (std::size_t j = 0; j < D; ++j) V[k * D + j] += a * (x[i][j] - p.centers[k * D + j]);
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    double n = 0;
    for (std::size_t j = 0; j < D; ++j) n += V[k * D + j] * V[k * D + j];
    n = std::max(std::sqrt(n), 1e-12);
    for (std::size_t j = 0; j < D; ++j) V[k * D + j] /= n;
  }
  double n = std::sqrt(std::inner_product(V.begin(), V.end(), V.begin(), 0.0));
  n = std::max(n, 1e-12);
  for (auto& v : V) v /= n;
  return V;
}

}  // namespace gdnv::oracle
