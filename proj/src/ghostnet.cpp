#include "gdnv/ghostnet.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace gdnv {

std::size_t effective_kernel(std::size_t k, std::size_t dilation) {
  if (k == 0 || dilation == 0) throw std::invalid_argument("effective_kernel: k and dilation must be >= 1");
  return (k - 1) * dilation + 1;
}

std::size_t stacked_receptive_field(const std::vector<std::pair<std::size_t, std::size_t>>& kernel_dilation) {
  std::size_t rf = 1;
  for (auto [k, r] : kernel_dilation) rf += effective_kernel(k, r) - 1;
  return rf;
}

std::size_t make_divisible(double v, std::size_t divisor) {
  const auto d = static_cast<double>(divisor);
  double rounded = std::max(d, std::floor((v + d / 2.0) / d) * d);
  if (rounded < 0.9 * v) rounded += d;
  return static_cast<std::size_t>(rounded);
}

void GhostModuleConfig::validate() const {
  if (ratio == 0) throw ShapeError("ghost module: ratio must be >= 1");
  if (out_channels % ratio != 0 || out_channels / ratio == 0) {
    throw ShapeError("ghost module: out_channels " + std::to_string(out_channels) + " not divisible by ratio " +
                     std::to_string(ratio));
  }
  if (primary_kernel % 2 == 0 || cheap_kernel % 2 == 0) throw ShapeError("ghost module: kernels must be odd");
}

ConvSpec GhostModuleConfig::primary_spec() const {
  return ConvSpec::square(in_channels, intrinsic(), primary_kernel, 1, primary_kernel > 1 ? dilation : 1);
}

ConvSpec GhostModuleConfig::cheap_spec() const {
  const std::size_t m = intrinsic();
  return ConvSpec::square(m, m * (ratio - 1), cheap_kernel, 1, dilation, m);
}

GhostCNNConfig GhostCNNConfig::resolved() const {
  GhostCNNConfig r = *this;
  r.channel_multiplier = 1.0;
  auto scale = [&](std::size_t c) { return make_divisible(static_cast<double>(c) * channel_multiplier); };
  r.stem_channels = scale(stem_channels);
  for (auto& stage : r.stages) {
    for (auto& e : stage) {
      e.in_channels = scale(e.in_channels);
      e.mid_channels = scale(e.mid_channels);
      e.out_channels = scale(e.out_channels);
    }
  }
  r.final_channels = scale(final_channels);
  return r;
}

std::size_t GhostCNNConfig::total_stride() const {
  std::size_t s = 2;
  for (const auto& stage : stages) {
    for (const auto& e : stage) s *= e.stride;
  }
  return s;
}

void GhostCNNConfig::validate() const {
  if (stages.empty()) throw ShapeError("ghostcnn: no stages");
  if (channel_multiplier <= 0) throw ShapeError("ghostcnn: channel multiplier must be > 0");
  std::size_t prev = stem_channels;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t i = 0; i < stages[s].size(); ++i) {
      const auto& e = stages[s][i];
      const std::string where = "stage " + std::to_string(s + 1) + " block " + std::to_string(i);
      if (e.in_channels != prev) throw ShapeError("ghostcnn: " + where + " input width does not chain");
      if (e.stride != 1 && e.stride != 2) throw ShapeError("ghostcnn: " + where + " stride must be 1 or 2");
      if (e.dilation == 0 || e.kernel % 2 == 0) throw ShapeError("ghostcnn: " + where + " bad kernel/dilation");
      prev = e.out_channels;
    }
  }
}

DilationScheme DilationScheme::parse(const std::string& text) {
  DilationScheme s;
  try {
    const auto dash = text.find('-');
    std::size_t pos = 0;
    if (dash == std::string::npos) {
      s.early = s.last = std::stoul(text, &pos);
      if (pos != text.size()) throw std::invalid_argument(text);
    } else {
      s.early = std::stoul(text.substr(0, dash), &pos);
      if (pos != dash) throw std::invalid_argument(text);
      const std::string tail = text.substr(dash + 1);
      s.last = std::stoul(tail, &pos);
      if (pos != tail.size()) throw std::invalid_argument(text);
    }
  } catch (const std::exception&) {
    throw std::invalid_argument("dilation scheme must look like 'a' or 'a-b', got '" + text + "'");
  }
  if (s.early == 0 || s.last == 0) throw std::invalid_argument("dilation rates must be >= 1");
  return s;
}

std::string DilationScheme::str() const {
  return early == last ? std::to_string(early) : std::to_string(early) + "-" + std::to_string(last);
}

GhostCNNConfig default_ghostcnn_config(const DilationScheme& scheme, double channel_multiplier) {
  GhostCNNConfig cfg;
  cfg.channel_multiplier = channel_multiplier;
  auto e = [](std::size_t in, std::size_t mid, std::size_t out, std::size_t stride, bool se) {
    return BottleneckEntry{in, mid, out, 3, stride, se, 1};
  };
  cfg.stages = {
      {e(24, 48, 24, 1, false), e(24, 72, 40, 2, false)},
      {e(40, 120, 40, 1, false), e(40, 240, 112, 2, true)},
      {e(112, 336, 112, 1, true), e(112, 480, 160, 2, false)},
      {e(160, 480, 160, 1, false), e(160, 480, 160, 1, false), e(160, 480, 160, 1, false),
       e(160, 672, 160, 1, true), e(160, 672, 160, 1, true), e(160, 960, 160, 2, true)},
      {e(160, 960, 160, 1, false), e(160, 960, 160, 1, true), e(160, 960, 160, 1, false),
       e(160, 960, 160, 1, true)},
  };
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    for (auto& entry : cfg.stages[s]) entry.dilation = s < 4 ? scheme.early : scheme.last;
  }
  return cfg;
}

GhostCNNConfig default_ghostcnn_config(const std::string& scheme, double channel_multiplier) {
  return default_ghostcnn_config(DilationScheme::parse(scheme), channel_multiplier);
}

std::string config_to_json(const GhostCNNConfig& cfg) {
  nlohmann::ordered_json j;
  j["stem"] = cfg.stem_channels;
  j["stages"] = nlohmann::ordered_json::array();
  for (const auto& stage : cfg.stages) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : stage) {
      arr.push_back({{"in", e.in_channels},
                     {"mid", e.mid_channels},
                     {"out", e.out_channels},
                     {"kernel", e.kernel},
                     {"stride", e.stride},
                     {"se", e.se ? 1 : 0},
                     {"dilation", e.dilation}});
    }
    j["stages"].push_back(arr);
  }
  j["final_conv"] = cfg.final_channels;
  j["channel_multiplier"] = cfg.channel_multiplier;
  j["ghost_ratio"] = cfg.ghost_ratio;
  j["primary_kernel"] = cfg.primary_kernel;
  j["cheap_kernel"] = cfg.cheap_kernel;
  j["se_reduction"] = cfg.se_reduction;
  return j.dump(2);
}

GhostCNNConfig config_from_json(const std::string& text) {
  GhostCNNConfig cfg;
  try {
    const auto j = nlohmann::json::parse(text);
    cfg.stem_channels = j.at("stem").get<std::size_t>();
    for (const auto& stage : j.at("stages")) {
      std::vector<BottleneckEntry> entries;
      for (const auto& e : stage) {
        BottleneckEntry b;
        b.in_channels = e.at("in").get<std::size_t>();
        b.mid_channels = e.at("mid").get<std::size_t>();
        b.out_channels = e.at("out").get<std::size_t>();
        b.kernel = e.value("kernel", std::size_t{3});
        b.stride = e.at("stride").get<std::size_t>();
        b.se = e.value("se", 0) != 0;
        b.dilation = e.value("dilation", std::size_t{1});
        entries.push_back(b);
      }
      cfg.stages.push_back(std::move(entries));
    }
    cfg.final_channels = j.at("final_conv").get<std::size_t>();
    cfg.channel_multiplier = j.value("channel_multiplier", 1.0);
    cfg.ghost_ratio = j.value("ghost_ratio", std::size_t{2});
    cfg.primary_kernel = j.value("primary_kernel", std::size_t{1});
    cfg.cheap_kernel = j.value("cheap_kernel", std::size_t{3});
    cfg.se_reduction = j.value("se_reduction", std::size_t{4});
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("backbone config: ") + ex.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

template <typename T>
GhostModule<T>::GhostModule(const GhostModuleConfig& c) : cfg(c) {
  cfg.validate();
  primary = ConvBnAct<T>(cfg.primary_spec(), cfg.relu);
  if (cfg.ratio > 1) cheap.emplace(cfg.cheap_spec(), cfg.relu);
}

template <typename T>
void GhostModule<T>::init(Rng& rng) {
  primary.init(rng);
  if (cheap) cheap->init(rng);
}

template <typename T>
Tensor<T> GhostModule<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> intrinsic = primary.forward(x, mode);
  if (!cheap) return intrinsic;
  Tensor<T> ghost = cheap->forward(intrinsic, mode);
  return concat_channels(intrinsic, ghost);
}

template <typename T>
Tensor<T> GhostModule<T>::backward(const Tensor<T>& upstream) {
  if (!cheap) return primary.backward(upstream);
  auto [d_intrinsic, d_ghost] = split_channels(upstream, cfg.intrinsic());
  add_inplace(d_intrinsic, cheap->backward(d_ghost));
  return primary.backward(d_intrinsic);
}

template <typename T>
void GhostModule<T>::collect(ParamList<T>& out, const std::string& prefix) {
  primary.collect(out, prefix + "primary.");
  if (cheap) cheap->collect(out, prefix + "cheap.");
}

template <typename T>
void GhostModule<T>::collect_bn(std::vector<BatchNormState<T>*>& out) {
  primary.collect_bn(out);
  if (cheap) cheap->collect_bn(out);
}

template <typename T>
SEBlock<T>::SEBlock(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ShapeError("se block: " + std::to_string(channels) + " channels not divisible by reduction " +
                     std::to_string(reduction));
  }
  reduce = Conv2d<T>(ConvSpec::square(channels, channels / reduction, 1), true);
  expand = Conv2d<T>(ConvSpec::square(channels / reduction, channels, 1), true);
}

template <typename T>
void SEBlock<T>::init(Rng& rng) {
  reduce.init(rng);
  expand.init(rng);
}

template <typename T>
Tensor<T> SEBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> mid = reduce.forward(global_avg_pool(x), mode);
  Tensor<T> gate_pre = expand.forward(relu(mid), mode);
  Tensor<T> gate(gate_pre.shape());
  for (std::size_t i = 0; i < gate.numel(); ++i) gate[i] = hard_sigmoid(gate_pre[i]);

  const Shape& s = x.shape();
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T g = gate.at(n, c, 0, 0);
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = src[i] * g;
    }
  }
  if (records(mode)) {
    input_ = x;
    mid_pre_ = std::move(mid);
    gate_pre_ = std::move(gate_pre);
    gate_ = std::move(gate);
  }
  return out;
}

template <typename T>
Tensor<T> SEBlock<T>::backward(const Tensor<T>& upstream) {
  const Shape& s = input_.shape();
  Tensor<T> dx(s);
  Tensor<T> dgate_pre(gate_.shape());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T g = gate_.at(n, c, 0, 0);
      const T* dy = upstream.plane(n, c);
      const T* x = input_.plane(n, c);
      T* d = dx.plane(n, c);
      T acc{};
      for (std::size_t i = 0; i < s.plane(); ++i) {
        d[i] = dy[i] * g;
        acc += dy[i] * x[i];
      }
      dgate_pre.at(n, c, 0, 0) = acc * hard_sigmoid_grad(gate_pre_.at(n, c, 0, 0));
    }
  }
  Tensor<T> dmid = relu_backward(expand.backward(dgate_pre), mid_pre_);
  add_inplace(dx, global_avg_pool_backward(reduce.backward(dmid), s));
  return dx;
}

template <typename T>
void SEBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
  reduce.collect(out, prefix + "reduce.");
  expand.collect(out, prefix + "expand.");
}

template <typename T>
GhostBottleneck<T>::GhostBottleneck(const BottleneckEntry& e, const GhostCNNConfig& net) : entry(e) {
  GhostModuleConfig g1{e.in_channels, e.mid_channels, net.ghost_ratio, net.primary_kernel, net.cheap_kernel,
                       e.dilation, true};
  expand = GhostModule<T>(g1);
  if (e.stride > 1) {
    downsample.emplace(ConvSpec::square(e.mid_channels, e.mid_channels, e.kernel, e.stride, 1, e.mid_channels),
                       false);
  }
  if (e.se) se.emplace(e.mid_channels, net.se_reduction);
  GhostModuleConfig g2{e.mid_channels, e.out_channels, net.ghost_ratio, net.primary_kernel, net.cheap_kernel,
                       e.dilation, false};
  project = GhostModule<T>(g2);
  if (!e.identity_shortcut()) {
    shortcut_dw.emplace(ConvSpec::square(e.in_channels, e.in_channels, e.kernel, e.stride, 1, e.in_channels), false);
    shortcut_pw.emplace(ConvSpec::square(e.in_channels, e.out_channels, 1), false);
  }
}

template <typename T>
void GhostBottleneck<T>::init(Rng& rng) {
  expand.init(rng);
  if (downsample) downsample->init(rng);
  if (se) se->init(rng);
  project.init(rng);
  if (shortcut_dw) shortcut_dw->init(rng);
  if (shortcut_pw) shortcut_pw->init(rng);
}

template <typename T>
Tensor<T> GhostBottleneck<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.shape().c != entry.in_channels) {
    throw ShapeError("ghost bottleneck: input has " + std::to_string(x.shape().c) + " channels, expected " +
                     std::to_string(entry.in_channels));
  }
  Tensor<T> y = expand.forward(x, mode);
  if (downsample) y = downsample->forward(y, mode);
  if (se) y = se->forward(y, mode);
  y = project.forward(y, mode);
  if (shortcut_dw) {
    add_inplace(y, shortcut_pw->forward(shortcut_dw->forward(x, mode), mode));
  } else {
    add_inplace(y, x);
  }
  return y;
}

template <typename T>
Tensor<T> GhostBottleneck<T>::backward(const Tensor<T>& upstream) {
  Tensor<T> d = project.backward(upstream);
  if (se) d = se->backward(d);
  if (downsample) d = downsample->backward(d);
  Tensor<T> dx = expand.backward(d);
  if (shortcut_dw) {
    add_inplace(dx, shortcut_dw->backward(shortcut_pw->backward(upstream)));
  } else {
    add_inplace(dx, upstream);
  }
  return dx;
}

template <typename T>
void GhostBottleneck<T>::collect(ParamList<T>& out, const std::string& prefix) {
  expand.collect(out, prefix + "ghost1.");
  if (downsample) downsample->collect(out, prefix + "dw.");
  if (se) se->collect(out, prefix + "se.");
  project.collect(out, prefix + "ghost2.");
  if (shortcut_dw) shortcut_dw->collect(out, prefix + "shortcut.dw.");
  if (shortcut_pw) shortcut_pw->collect(out, prefix + "shortcut.pw.");
}

template <typename T>
void GhostBottleneck<T>::collect_bn(std::vector<BatchNormState<T>*>& out) {
  expand.collect_bn(out);
  if (downsample) downsample->collect_bn(out);
  project.collect_bn(out);
  if (shortcut_dw) shortcut_dw->collect_bn(out);
  if (shortcut_pw) shortcut_pw->collect_bn(out);
}

template <typename T>
GhostCNN<T>::GhostCNN(const GhostCNNConfig& cfg) : config_(cfg), resolved_(cfg.resolved()) {
  resolved_.validate();
  stem = ConvBnAct<T>(ConvSpec::square(3, resolved_.stem_channels, 3, 2), true);
  for (const auto& stage : resolved_.stages) {
    std::vector<GhostBottleneck<T>> blocks;
    for (const auto& e : stage) blocks.emplace_back(e, resolved_);
    stages.push_back(std::move(blocks));
  }
  std::size_t last = resolved_.stem_channels;
  if (!resolved_.stages.empty() && !resolved_.stages.back().empty()) {
    last = resolved_.stages.back().back().out_channels;
  }
  final_conv = ConvBnAct<T>(ConvSpec::square(last, resolved_.final_channels, 1), false);
}

template <typename T>
void GhostCNN<T>::init(Rng& rng) {
  stem.init(rng);
  for (auto& stage : stages) {
    for (auto& b : stage) b.init(rng);
  }
  final_conv.init(rng);
}

template <typename T>
Tensor<T> GhostCNN<T>::forward(const Tensor<T>& image, Mode mode) {
  const Shape& s = image.shape();
  const std::size_t stride = resolved_.total_stride();
  if (s.c != 3) throw ShapeError("ghostcnn: expected 3 input channels, got " + std::to_string(s.c));
  if (s.h % stride != 0 || s.w % stride != 0) {
    throw ShapeError("ghostcnn: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " not divisible by " + std::to_string(stride));
  }
  Tensor<T> y = stem.forward(image, mode);
  for (auto& stage : stages) {
    for (auto& b : stage) y = b.forward(y, mode);
  }
  return final_conv.forward(y, mode);
}

template <typename T>
Tensor<T> GhostCNN<T>::backward(const Tensor<T>& upstream) {
  Tensor<T> d = final_conv.backward(upstream);
  for (auto s = stages.rbegin(); s != stages.rend(); ++s) {
    for (auto b = s->rbegin(); b != s->rend(); ++b) d = b->backward(d);
  }
  return stem.backward(d);
}

template <typename T>
void GhostCNN<T>::collect(ParamList<T>& out, const std::string& prefix) {
  stem.collect(out, prefix + "stem.");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t i = 0; i < stages[s].size(); ++i) {
      stages[s][i].collect(out, prefix + "stage" + std::to_string(s + 1) + "." + std::to_string(i) + ".");
    }
  }
  final_conv.collect(out, prefix + "final.");
}

template <typename T>
void GhostCNN<T>::collect_bn(std::vector<BatchNormState<T>*>& out) {
  stem.collect_bn(out);
  for (auto& stage : stages) {
    for (auto& b : stage) b.collect_bn(out);
  }
  final_conv.collect_bn(out);
}

template <typename T>
std::vector<Shape> GhostCNN<T>::stage_shapes(const Shape& input) const {
  std::vector<Shape> out;
  Shape s = stem.conv.spec.output_shape(input);
  out.push_back(s);
  for (const auto& stage : resolved_.stages) {
    for (const auto& e : stage) {
      if (e.stride > 1) {
        s = ConvSpec::square(e.mid_channels, e.mid_channels, e.kernel, e.stride, 1, e.mid_channels)
                .output_shape(Shape{s.n, e.mid_channels, s.h, s.w});
      }
      s.c = e.out_channels;
    }
    out.push_back(s);
  }
  s.c = resolved_.final_channels;
  out.push_back(s);
  return out;
}

template class GhostModule<float>;
template class GhostModule<double>;
template class SEBlock<float>;
template class SEBlock<double>;
template class GhostBottleneck<float>;
template class GhostBottleneck<double>;
template class GhostCNN<float>;
template class GhostCNN<double>;

}  // namespace gdnv
