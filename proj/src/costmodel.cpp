#include "gdnv/costmodel.hpp"

#include <json.hpp>

#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace gdnv {

namespace {

std::uint64_t u64(std::size_t v) { return static_cast<std::uint64_t>(v); }

LayerCost sum_into(std::string name, const std::vector<LayerCost>& parts) {
  LayerCost total;
  total.name = std::move(name);
  for (const auto& p : parts) {
    total.macs += p.macs;
    total.params += p.params;
    total.output = p.output;
  }
  total.flops = 2 * total.macs;
  return total;
}

void expect_channels(const std::string& name, const Shape& in, std::size_t channels) {
  if (in.c != channels) {
    throw ShapeError("cost: layer '" + name + "' expects " + std::to_string(channels) + " channels, got " +
                     std::to_string(in.c));
  }
}

std::vector<LayerCost> ghost_module_parts(const GhostModuleConfig& cfg, const Shape& in, const std::string& name) {
  cfg.validate();
  std::vector<LayerCost> parts;
  parts.push_back(conv_cost(cfg.primary_spec(), in, false, true, name + ".primary"));
  if (cfg.ratio > 1) parts.push_back(conv_cost(cfg.cheap_spec(), parts.back().output, false, true, name + ".cheap"));
  for (auto& p : parts) p.output.c = cfg.out_channels;
  parts.front().output = parts.back().output;
  return parts;
}

std::vector<LayerCost> se_parts(std::size_t channels, std::size_t reduction, const Shape& in, const std::string& name) {
  if (reduction == 0 || channels % reduction != 0) throw ShapeError("cost: SE channels not divisible by reduction");
  const Shape pooled{in.n, channels, 1, 1};
  auto reduce = conv_cost(ConvSpec::square(channels, channels / reduction, 1), pooled, true, false, name + ".reduce");
  auto expand = conv_cost(ConvSpec::square(channels / reduction, channels, 1), reduce.output, true, false,
                          name + ".expand");
  reduce.output = in;
  expand.output = in;
  return {reduce, expand};
}

std::vector<LayerCost> bottleneck_parts(const BottleneckLayer& b, const Shape& in) {
  const auto& e = b.entry;
  expect_channels(b.name, in, e.in_channels);
  std::vector<LayerCost> parts;
  GhostModuleConfig g1{e.in_channels, e.mid_channels, b.ghost_ratio, b.primary_kernel, b.cheap_kernel, e.dilation,
                       true};
  for (auto& p : ghost_module_parts(g1, in, b.name + ".ghost1")) parts.push_back(p);
  Shape cur = parts.back().output;
  if (e.stride > 1) {
    parts.push_back(conv_cost(ConvSpec::square(e.mid_channels, e.mid_channels, e.kernel, e.stride, 1, e.mid_channels),
                              cur, false, true, b.name + ".dw"));
    cur = parts.back().output;
  }
  if (e.se) {
    for (auto& p : se_parts(e.mid_channels, b.se_reduction, cur, b.name + ".se")) parts.push_back(p);
  }
  GhostModuleConfig g2{e.mid_channels, e.out_channels, b.ghost_ratio, b.primary_kernel, b.cheap_kernel, e.dilation,
                       false};
  for (auto& p : ghost_module_parts(g2, cur, b.name + ".ghost2")) parts.push_back(p);
  const Shape out = parts.back().output;
  if (!e.identity_shortcut()) {
    auto dw = conv_cost(ConvSpec::square(e.in_channels, e.in_channels, e.kernel, e.stride, 1, e.in_channels), in,
                        false, true, b.name + ".shortcut.dw");
    auto pw = conv_cost(ConvSpec::square(e.in_channels, e.out_channels, 1), dw.output, false, true,
                        b.name + ".shortcut.pw");
    dw.output = out;
    pw.output = out;
    parts.push_back(dw);
    parts.push_back(pw);
  }
  return parts;
}

}  // namespace

LayerCost conv_cost(const ConvSpec& spec, const Shape& in, bool bias, bool norm, std::string name) {
  spec.validate();
  expect_channels(name, in, spec.in_channels);
  LayerCost c;
  c.name = std::move(name);
  c.output = spec.output_shape(in);
  const std::uint64_t per_out = u64(spec.in_channels / spec.groups) * u64(spec.kernel_h) * u64(spec.kernel_w);
  c.macs = u64(in.n) * u64(spec.out_channels) * u64(c.output.h) * u64(c.output.w) * per_out;
  c.flops = 2 * c.macs;
  c.params = u64(spec.out_channels) * per_out + (bias ? u64(spec.out_channels) : 0) +
             (norm ? 2 * u64(spec.out_channels) : 0);
  return c;
}

LayerCost ghost_module_cost(const GhostModuleConfig& cfg, const Shape& in, std::string name) {
  return sum_into(name, ghost_module_parts(cfg, in, name));
}

CostReport model_cost(const ArchitectureSpec& arch) {
  CostReport r;
  r.name = arch.name;
  r.input = arch.input;
  Shape cur = arch.input;
  auto add = [&](const LayerCost& c) {
    r.layers.push_back(c);
    r.macs += c.macs;
    r.params += c.params;
    cur = c.output;
  };
  for (const auto& layer : arch.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            add(conv_cost(l.spec, cur, l.bias, l.norm, l.name));
          } else if constexpr (std::is_same_v<L, GhostModuleLayer>) {
            for (const auto& p : ghost_module_parts(l.cfg, cur, l.name)) add(p);
          } else if constexpr (std::is_same_v<L, BottleneckLayer>) {
            for (const auto& p : bottleneck_parts(l, cur)) add(p);
          } else if constexpr (std::is_same_v<L, SELayer>) {
            expect_channels(l.name, cur, l.channels);
            for (const auto& p : se_parts(l.channels, l.reduction, cur, l.name)) add(p);
          } else if constexpr (std::is_same_v<L, PoolLayer>) {
            if (cur.h + 2 * l.pad < l.kernel || cur.w + 2 * l.pad < l.kernel || l.stride == 0) {
              throw ShapeError("cost: pooling '" + l.name + "' does not fit its input");
            }
            LayerCost c;
            c.name = l.name;
            c.output = {cur.n, cur.c, (cur.h + 2 * l.pad - l.kernel) / l.stride + 1,
                        (cur.w + 2 * l.pad - l.kernel) / l.stride + 1};
            add(c);
          } else if constexpr (std::is_same_v<L, VladHeadLayer>) {
            // soft-assignment projection D*K plus residual accumulation K*D per location
            const std::uint64_t k = u64(l.clusters), d = u64(cur.c);
            LayerCost c;
            c.name = l.name;
            c.macs = u64(cur.n) * u64(cur.h) * u64(cur.w) * (d * k + k * d);
            c.flops = 2 * c.macs;
            c.params = 2 * k * d + k;
            c.output = {cur.n, l.clusters * cur.c, 1, 1};
            add(c);
          }
        },
        layer);
  }
  r.flops = 2 * r.macs;
  return r;
}

CostComparison compare_costs(const CostReport& a, const CostReport& b) {
  if (a.flops == 0 || a.params == 0) throw std::invalid_argument("compare_costs: baseline totals are zero");
  CostComparison c;
  c.baseline = a.name;
  c.candidate = b.name;
  c.flops_reduction = 100.0 * (1.0 - static_cast<double>(b.flops) / static_cast<double>(a.flops));
  c.params_reduction = 100.0 * (1.0 - static_cast<double>(b.params) / static_cast<double>(a.params));
  return c;
}

ArchitectureSpec ghostcnn_netvlad_arch(const GhostCNNConfig& cfg, std::size_t height, std::size_t width,
                                       std::size_t clusters) {
  const GhostCNNConfig r = cfg.resolved();
  r.validate();
  ArchitectureSpec a;
  a.name = "ghostcnn-netvlad";
  a.input = {1, 3, height, width};
  a.layers.push_back(ConvLayer{"stem", ConvSpec::square(3, r.stem_channels, 3, 2), false, true});
  std::size_t last = r.stem_channels;
  for (std::size_t s = 0; s < r.stages.size(); ++s) {
    for (std::size_t i = 0; i < r.stages[s].size(); ++i) {
      const auto& e = r.stages[s][i];
      a.layers.push_back(BottleneckLayer{"stage" + std::to_string(s + 1) + "." + std::to_string(i), e, r.ghost_ratio,
                                         r.primary_kernel, r.cheap_kernel, r.se_reduction});
      last = e.out_channels;
    }
  }
  a.layers.push_back(ConvLayer{"final", ConvSpec::square(last, r.final_channels, 1), false, true});
  a.layers.push_back(VladHeadLayer{"netvlad", clusters});
  return a;
}

ArchitectureSpec vgg16_netvlad_arch(std::size_t height, std::size_t width, std::size_t clusters) {
  ArchitectureSpec a;
  a.name = "vgg16-netvlad";
  a.input = {1, 3, height, width};
  const std::vector<std::vector<std::size_t>> blocks{{64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512},
                                                     {512, 512, 512}};
  std::size_t in = 3;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b > 0) a.layers.push_back(PoolLayer{"pool" + std::to_string(b), 2, 2, 0});
    for (std::size_t i = 0; i < blocks[b].size(); ++i) {
      const std::string name = "conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1);
      a.layers.push_back(ConvLayer{name, ConvSpec::square(in, blocks[b][i], 3), true, false});
      in = blocks[b][i];
    }
  }
  a.layers.push_back(VladHeadLayer{"netvlad", clusters});
  return a;
}

ArchitectureSpec alexnet_netvlad_arch(std::size_t height, std::size_t width, std::size_t clusters) {
  ArchitectureSpec a;
  a.name = "alexnet-netvlad";
  a.input = {1, 3, height, width};
  ConvSpec c1 = ConvSpec::square(3, 64, 11, 4);
  c1.pad_h = c1.pad_w = 2;
  a.layers.push_back(ConvLayer{"conv1", c1, true, false});
  a.layers.push_back(PoolLayer{"pool1", 3, 2, 0});
  a.layers.push_back(ConvLayer{"conv2", ConvSpec::square(64, 192, 5), true, false});
  a.layers.push_back(PoolLayer{"pool2", 3, 2, 0});
  a.layers.push_back(ConvLayer{"conv3", ConvSpec::square(192, 384, 3), true, false});
  a.layers.push_back(ConvLayer{"conv4", ConvSpec::square(384, 256, 3), true, false});
  a.layers.push_back(ConvLayer{"conv5", ConvSpec::square(256, 256, 3), true, false});
  a.layers.push_back(VladHeadLayer{"netvlad", clusters});
  return a;
}

ArchitectureSpec named_arch(const std::string& name, std::size_t height, std::size_t width, std::size_t clusters,
                            const std::string& dilation, double channel_multiplier) {
  if (name == "ghostcnn-netvlad") {
    return ghostcnn_netvlad_arch(default_ghostcnn_config(dilation, channel_multiplier), height, width, clusters);
  }
  if (name == "vgg16-netvlad") return vgg16_netvlad_arch(height, width, clusters);
  if (name == "alexnet-netvlad") return alexnet_netvlad_arch(height, width, clusters);
  throw std::invalid_argument("unknown architecture '" + name +
                              "' (expected ghostcnn-netvlad, vgg16-netvlad or alexnet-netvlad)");
}

std::string render_text(const CostReport& r) {
  std::ostringstream out;
  out << r.name << "  input " << r.input.c << "x" << r.input.h << "x" << r.input.w << "\n";
  out << "convention: FLOPs = 2 x MACs over conv/linear layers; params = weights + biases + BN affine\n";
  out << std::left << std::setw(28) << "layer" << std::setw(18) << "output" << std::right << std::setw(16) << "MACs"
      << std::setw(16) << "FLOPs" << std::setw(12) << "params" << "\n";
  for (const auto& l : r.layers) {
    const std::string shape = std::to_string(l.output.c) + "x" + std::to_string(l.output.h) + "x" +
                              std::to_string(l.output.w);
    out << std::left << std::setw(28) << l.name << std::setw(18) << shape << std::right << std::setw(16) << l.macs
        << std::setw(16) << l.flops << std::setw(12) << l.params << "\n";
  }
  out << std::left << std::setw(46) << "total" << std::right << std::setw(16) << r.macs << std::setw(16) << r.flops
      << std::setw(12) << r.params << "\n";
  if (r.pca_params) out << "pca projection params (not in total): " << r.pca_params << "\n";
  return out.str();
}

std::string render_comparison_text(const CostComparison& c) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << c.candidate << " vs " << c.baseline << "\n";
  out << "FLOPs reduction:  " << c.flops_reduction << " %\n";
  out << "params reduction: " << c.params_reduction << " %\n";
  return out.str();
}

std::string render_json(const std::vector<CostReport>& reports, const std::optional<CostComparison>& comparison) {
  nlohmann::ordered_json j;
  j["convention"] = "flops = 2 * macs; conv/linear layers only; params include biases and BN affine";
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json jr;
    jr["name"] = r.name;
    jr["input"] = {r.input.c, r.input.h, r.input.w};
    jr["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : r.layers) {
      jr["layers"].push_back({{"name", l.name},
                              {"out_shape", {l.output.c, l.output.h, l.output.w}},
                              {"macs", l.macs},
                              {"flops", l.flops},
                              {"params", l.params}});
    }
    jr["totals"] = {{"macs", r.macs}, {"flops", r.flops}, {"params", r.params}};
    if (r.pca_params) jr["pca_params"] = r.pca_params;
    j["reports"].push_back(jr);
  }
  if (comparison) {
    j["comparison"] = {{"baseline", comparison->baseline},
                       {"candidate", comparison->candidate},
                       {"flops_reduction_pct", comparison->flops_reduction},
                       {"params_reduction_pct", comparison->params_reduction}};
  }
  return j.dump(2);
}

}  // namespace gdnv
