#include "gdnv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gdnv/ghostnet.hpp"
#include "gdnv/netvlad.hpp"
#include "gdnv/training.hpp"

namespace gdnv {

GradcheckResult check_gradients(const std::string& name, const std::function<double()>& loss,
                                std::vector<GradTarget>& targets, Rng& rng, const GradcheckOptions& opts) {
  GradcheckResult res;
  res.name = name;
  auto central = [&](double& v, double h) {
    const double orig = v;
    v = orig + h;
    const double lp = loss();
    v = orig - h;
    const double lm = loss();
    v = orig;
    return (lp - lm) / (2 * h);
  };
  for (auto& t : targets) {
    std::vector<std::size_t> idx(t.values.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opts.max_entries) {
      rng.shuffle(idx);
      idx.resize(opts.max_entries);
    }
    for (std::size_t i : idx) {
      const double n1 = central(t.values[i], opts.eps);
      const double n2 = central(t.values[i], opts.eps / 2);
      if (std::abs(n1 - n2) > 1e-6 * std::max(1.0, std::abs(n1))) {
        ++res.skipped;
        continue;
      }
      const double a = t.analytic[i];
      const double rel = std::abs(a - n1) / std::max({std::abs(a), std::abs(n1), opts.floor});
      res.max_rel_error = std::max(res.max_rel_error, rel);
      ++res.checked;
    }
  }
  return res;
}

namespace {

Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  return std::inner_product(a.data().begin(), a.data().end(), b.data().begin(), 0.0);
}

GradcheckResult merge(const std::string& name, const std::vector<GradcheckResult>& parts) {
  GradcheckResult r;
  r.name = name;
  for (const auto& p : parts) {
    r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
    r.checked += p.checked;
    r.skipped += p.skipped;
  }
  return r;
}

// Generic module check: loss = <forward(x), R>; targets are the input and every trainable parameter.
template <typename Module>
GradcheckResult check_module(const std::string& name, Module& m, Tensor<double> x, Rng& rng,
                             const GradcheckOptions& opts) {
  ParamList<double> params;
  m.collect(params, "");
  const Tensor<double> probe = m.forward(x, Mode::Train);
  const Tensor<double> r = random_tensor(probe.shape(), rng);

  zero_grads(params);
  m.forward(x, Mode::Train);
  const Tensor<double> dx = m.backward(r);

  std::vector<GradTarget> targets;
  targets.push_back({"input", x.data(), dx.values()});
  for (auto& p : params) {
    if (!p.trainable) continue;
    targets.push_back({p.name, p.tensor->data(), p.tensor->grad()});
  }
  auto loss = [&] { return dot(m.forward(x, Mode::Train), r); };
  return check_gradients(name, loss, targets, rng, opts);
}

GradcheckResult check_conv(Rng& rng, const GradcheckOptions& opts) {
  std::vector<ConvSpec> specs;
  ConvSpec a = ConvSpec::square(4, 6, 3, 2, 1, 2);
  specs.push_back(a);
  specs.push_back(ConvSpec::square(6, 6, 3, 1, 2, 6));
  ConvSpec b = ConvSpec::square(3, 4, 1);
  specs.push_back(b);
  ConvSpec c;
  c.in_channels = 4;
  c.out_channels = 4;
  c.kernel_h = 3;
  c.kernel_w = 2;
  c.stride_h = 1;
  c.stride_w = 2;
  c.pad_h = 2;
  c.pad_w = 0;
  c.dilation_h = 2;
  c.dilation_w = 1;
  c.groups = 2;
  specs.push_back(c);

  std::vector<GradcheckResult> parts;
  for (const auto& spec : specs) {
    Tensor<double> x = random_tensor({2, spec.in_channels, 7, 6}, rng);
    Tensor<double> w = random_tensor(spec.weight_shape(), rng, 0.5);
    std::vector<double> bias(spec.out_channels);
    for (auto& v : bias) v = rng.normal();
    const Tensor<double> y = conv2d_forward<double>(x, w, bias, spec);
    const Tensor<double> r = random_tensor(y.shape(), rng);
    ConvGrads<double> g = conv2d_backward<double>(r, x, w, spec, true);
    std::vector<GradTarget> targets{{"input", x.data(), g.input.values()},
                                    {"weight", w.data(), g.weight.values()},
                                    {"bias", bias, g.bias}};
    auto loss = [&] { return dot(conv2d_forward<double>(x, w, bias, spec), r); };
    parts.push_back(check_gradients("conv2d", loss, targets, rng, opts));
  }
  return merge("conv2d", parts);
}

GradcheckResult check_batchnorm(Rng& rng, const GradcheckOptions& opts) {
  BatchNorm2d<double> bn(3);
  for (auto& v : bn.state.gamma.data()) v = 1.0 + 0.3 * rng.normal();
  for (auto& v : bn.state.beta.data()) v = 0.3 * rng.normal();
  return check_module("batchnorm", bn, random_tensor({3, 3, 4, 5}, rng, 2.0), rng, opts);
}

GradcheckResult check_se(Rng& rng, const GradcheckOptions& opts) {
  SEBlock<double> se(8, 4);
  se.init(rng);
  for (auto& v : se.reduce.bias->data()) v = 0.2 * rng.normal();
  for (auto& v : se.expand.bias->data()) v = 0.5 * rng.normal();
  return check_module("se_block", se, random_tensor({2, 8, 4, 4}, rng), rng, opts);
}

GradcheckResult check_ghost_module(Rng& rng, const GradcheckOptions& opts) {
  GhostModule<double> g(GhostModuleConfig{6, 12, 2, 1, 3, 2, true});
  g.init(rng);
  return check_module("ghost_module", g, random_tensor({2, 6, 6, 6}, rng), rng, opts);
}

GradcheckResult check_bottleneck(Rng& rng, const GradcheckOptions& opts) {
  GhostCNNConfig net;
  std::vector<GradcheckResult> parts;
  {
    GhostBottleneck<double> b(BottleneckEntry{8, 16, 12, 3, 2, true, 1}, net);
    b.init(rng);
    parts.push_back(check_module("ghost_bottleneck", b, random_tensor({2, 8, 8, 8}, rng), rng, opts));
  }
  {
    GhostBottleneck<double> b(BottleneckEntry{8, 16, 8, 3, 1, true, 2}, net);
    b.init(rng);
    parts.push_back(check_module("ghost_bottleneck", b, random_tensor({2, 8, 6, 6}, rng), rng, opts));
  }
  return merge("ghost_bottleneck", parts);
}

GradcheckResult check_vlad(Rng& rng, const GradcheckOptions& opts) {
  VladParams<double> p(3, 5);
  for (auto* t : {&p.centers, &p.weights}) {
    for (auto& v : t->data()) v = rng.normal();
  }
  for (auto& v : p.biases.data()) v = rng.normal();
  NetVladLayer<double> layer(p);
  return check_module("vlad", layer, random_tensor({2, 5, 3, 3}, rng), rng, opts);
}

GradcheckResult check_triplet(Rng& rng, const GradcheckOptions& opts) {
  const std::size_t dim = 6, positives = 3, negatives = 4;
  std::vector<double> desc((1 + positives + negatives) * dim);
  for (auto& v : desc) v = 0.4 * rng.normal();
  const double margin = 0.5;
  std::vector<double> grad(desc.size(), 0.0);
  tuple_loss<double>(desc, dim, positives, margin, grad);
  std::vector<GradTarget> targets{{"descriptors", desc, grad}};
  auto loss = [&] {
    std::vector<double> scratch(desc.size(), 0.0);
    return tuple_loss<double>(desc, dim, positives, margin, scratch);
  };
  return check_gradients("triplet_loss", loss, targets, rng, opts);
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, const GradcheckOptions& opts) {
  std::vector<GradcheckResult> out;
  auto run = [&](const char* name, GradcheckResult (*fn)(Rng&, const GradcheckOptions&)) {
    Rng rng(derive_seed(seed, name));
    out.push_back(fn(rng, opts));
  };
  run("conv2d", check_conv);
  run("batchnorm", check_batchnorm);
  run("se_block", check_se);
  run("ghost_module", check_ghost_module);
  run("ghost_bottleneck", check_bottleneck);
  run("vlad", check_vlad);
  run("triplet_loss", check_triplet);
  return out;
}

}  // namespace gdnv
