#include "gdnv/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gdnv {

void TripletLossConfig::validate() const {
  if (!(margin > 0)) throw std::invalid_argument("triplet: margin must be > 0");
  if (negatives_per_tuple == 0) throw std::invalid_argument("triplet: need at least one negative per tuple");
  if (negative_pool < negatives_per_tuple) throw std::invalid_argument("triplet: negative pool smaller than negatives");
  if (!(positive_radius_m > 0)) throw std::invalid_argument("triplet: positive radius must be > 0");
  if (!(negative_radius_m > positive_radius_m)) {
    throw std::invalid_argument("triplet: negative radius must exceed positive radius");
  }
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("sgd: learning rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("sgd: momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("sgd: weight decay must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("sgd: batch size must be > 0");
}

TripletLossResult triplet_loss(std::span<const double> d2_positive, std::span<const double> d2_negative,
                               double margin) {
  if (d2_positive.empty()) throw std::invalid_argument("triplet_loss: empty positive list");
  if (d2_negative.empty()) throw std::invalid_argument("triplet_loss: empty negative list");
  TripletLossResult r;
  r.grad_positive.assign(d2_positive.size(), 0.0);
  r.grad_negative.assign(d2_negative.size(), 0.0);
  for (std::size_t i = 1; i < d2_positive.size(); ++i) {
    if (d2_positive[i] < d2_positive[r.best_positive]) r.best_positive = i;
  }
  const double best = d2_positive[r.best_positive];
  for (std::size_t j = 0; j < d2_negative.size(); ++j) {
    const double h = best + margin - d2_negative[j];
    if (h > 0) {
      r.loss += h;
      r.grad_negative[j] = -1.0;
      r.grad_positive[r.best_positive] += 1.0;
      ++r.active;
    }
  }
  return r;
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

std::optional<TripletTuple> mine_tuple(std::size_t query, std::span<const ImageRecord> records,
                                       std::span<const float> cache, std::size_t dim, const TripletLossConfig& cfg,
                                       Rng& rng) {
  if (query >= records.size()) throw std::out_of_range("mine_tuple: query index out of range");
  if (cache.size() != records.size() * dim) throw ShapeError("mine_tuple: descriptor cache size mismatch");
  auto row = [&](std::size_t i) { return cache.subspan(i * dim, dim); };
  const Position& qp = records[query].position;

  TripletTuple t;
  t.query = query;
  std::vector<std::size_t> far;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (i == query) continue;
    const double d = distance_m(records[i].position, qp);
    if (d <= cfg.positive_radius_m) {
      t.positives.push_back(i);
    } else if (d > cfg.negative_radius_m) {
      far.push_back(i);
    }
  }
  if (t.positives.empty() || far.empty()) return std::nullopt;

  // records are in id order, so the first strict minimum is the lowest id among ties
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t p : t.positives) {
    const double d = squared_distance(row(query), row(p));
    if (d < best) {
      best = d;
      t.best_positive = p;
    }
  }

  // seeded pool: partial Fisher-Yates over the far set
  const std::size_t pool = std::min(cfg.negative_pool, far.size());
  for (std::size_t i = 0; i < pool; ++i) {
    const std::size_t j = i + rng.index(far.size() - i);
    std::swap(far[i], far[j]);
  }
  far.resize(pool);
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(pool);
  for (std::size_t n : far) scored.emplace_back(squared_distance(row(query), row(n)), n);
  std::sort(scored.begin(), scored.end());
  const std::size_t keep = std::min(cfg.negatives_per_tuple, scored.size());
  for (std::size_t i = 0; i < keep; ++i) t.negatives.push_back(scored[i].second);
  return t;
}

template <typename T>
double tuple_loss(std::span<const T> desc, std::size_t dim, std::size_t positives, double margin, std::span<T> grad,
                  double scale) {
  if (dim == 0 || desc.size() % dim != 0 || grad.size() != desc.size()) throw ShapeError("tuple_loss: bad row layout");
  const std::size_t rows = desc.size() / dim;
  if (positives == 0 || rows < positives + 2) throw std::invalid_argument("tuple_loss: need a positive and a negative");
  auto row = [&](std::size_t i) { return desc.subspan(i * dim, dim); };
  auto d2 = [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = static_cast<double>(row(0)[c]) - static_cast<double>(row(i)[c]);
      s += d * d;
    }
    return s;
  };
  std::vector<double> dp(positives), dn(rows - 1 - positives);
  for (std::size_t i = 0; i < dp.size(); ++i) dp[i] = d2(1 + i);
  for (std::size_t j = 0; j < dn.size(); ++j) dn[j] = d2(1 + positives + j);
  const TripletLossResult r = triplet_loss(dp, dn, margin);
  // d d2(a, b) / da = 2 (a - b)
  auto accumulate = [&](std::size_t other, double coeff) {
    if (coeff == 0.0) return;
    for (std::size_t c = 0; c < dim; ++c) {
      const double d = 2.0 * coeff * scale * (static_cast<double>(row(0)[c]) - static_cast<double>(row(other)[c]));
      grad[c] += static_cast<T>(d);
      grad[other * dim + c] -= static_cast<T>(d);
    }
  };
  for (std::size_t i = 0; i < dp.size(); ++i) accumulate(1 + i, r.grad_positive[i]);
  for (std::size_t j = 0; j < dn.size(); ++j) accumulate(1 + positives + j, r.grad_negative[j]);
  return r.loss;
}

template double tuple_loss<float>(std::span<const float>, std::size_t, std::size_t, double, std::span<float>, double);
template double tuple_loss<double>(std::span<const double>, std::size_t, std::size_t, double, std::span<double>,
                                   double);

template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, const SgdConfig& cfg) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient and buffer sizes differ");
  }
  const T lr = static_cast<T>(cfg.learning_rate);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    velocity[i] = mu * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

template <typename T>
void Sgd<T>::step(ParamList<T>& params) {
  for (auto& p : params) {
    if (!p.trainable) continue;
    auto& v = velocity_[p.name];
    if (v.empty()) v.assign(p.tensor->numel(), T(0));
    if (!p.tensor->has_grad()) continue;
    sgd_step<T>(p.tensor->data(), std::span<const T>(p.tensor->grad()), std::span<T>(v), cfg_);
  }
}

template void sgd_step<float>(std::span<float>, std::span<const float>, std::span<float>, const SgdConfig&);
template void sgd_step<double>(std::span<double>, std::span<const double>, std::span<double>, const SgdConfig&);
template class Sgd<float>;
template class Sgd<double>;

TrainingSet load_training_set(std::span<const ImageRecord> records,
                              const std::function<Tensor<float>(const ImageRecord&)>& load) {
  TrainingSet set;
  set.records.assign(records.begin(), records.end());
  std::sort(set.records.begin(), set.records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  for (const auto& r : set.records) set.images.push_back(load(r));
  return set;
}

namespace {

Tensor<float> stack(std::span<const Tensor<float>> images, std::size_t begin, std::size_t end) {
  std::vector<const Tensor<float>*> ptrs;
  for (std::size_t i = begin; i < end; ++i) ptrs.push_back(&images[i]);
  return stack_batch<float>(ptrs);
}

}  // namespace

std::vector<float> extract_descriptors(PlaceModel<float>& model, std::span<const Tensor<float>> images,
                                       std::size_t batch) {
  std::vector<float> out;
  for (std::size_t b = 0; b < images.size(); b += batch) {
    const std::size_t e = std::min(images.size(), b + batch);
    const Tensor<float> d = model.forward(stack(images, b, e), Mode::Infer);
    out.insert(out.end(), d.data().begin(), d.data().end());
  }
  return out;
}

void initialize_model(PlaceModel<float>& model, std::span<const Tensor<float>> images, std::uint64_t seed,
                      const VladInitConfig& cfg) {
  if (images.empty()) throw DataError("initialize: no images");
  Rng rng(derive_seed(seed, "vlad-init"));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  auto pick = [&](std::size_t count) {
    std::vector<Tensor<float>> out;
    for (std::size_t i = 0; i < std::min(count, order.size()); ++i) out.push_back(images[order[i]]);
    return out;
  };

  const std::vector<Tensor<float>> calib = pick(cfg.calibration_images);
  model.set_bn_cumulative(true);
  for (std::size_t b = 0; b < calib.size(); b += 16) {
    model.backbone.forward(stack(calib, b, std::min(calib.size(), b + 16)), Mode::Train);
  }
  model.set_bn_cumulative(false);

  const std::vector<Tensor<float>> sample = pick(cfg.kmeans_images);
  const std::size_t dim = model.backbone.output_channels();
  std::vector<double> locals;
  for (std::size_t b = 0; b < sample.size(); b += 16) {
    const Tensor<float> f = model.backbone.forward(stack(sample, b, std::min(sample.size(), b + 16)), Mode::Infer);
    const Shape s = f.shape();
    std::vector<float> x(dim);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < s.plane(); ++p) {
        for (std::size_t c = 0; c < dim; ++c) x[c] = f.plane(n, c)[p];
        const auto u = l2_normalize<float>(x);
        locals.insert(locals.end(), u.begin(), u.end());
      }
    }
  }
  std::size_t rows = locals.size() / dim;
  if (rows > cfg.max_local_descriptors) {
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(cfg.max_local_descriptors);
    std::sort(idx.begin(), idx.end());
    std::vector<double> kept;
    kept.reserve(idx.size() * dim);
    for (std::size_t i : idx) kept.insert(kept.end(), locals.begin() + i * dim, locals.begin() + (i + 1) * dim);
    locals = std::move(kept);
    rows = idx.size();
  }
  const std::size_t k = model.vlad.params.clusters();
  if (rows < k) throw DataError("initialize: fewer local descriptors than clusters");
  const KMeansResult km = kmeans(locals, rows, dim, k, derive_seed(seed, "kmeans"), cfg.kmeans_iters);
  const double alpha = init_alpha(locals, rows, dim, km.centers, k);
  const std::vector<float> centers(km.centers.begin(), km.centers.end());
  model.vlad.params = VladParams<float>::from_centers(centers, k, dim, alpha);
}

Trainer::Trainer(PlaceModel<float>& model, const TrainingSet& data, TripletLossConfig loss, SgdConfig sgd,
                 std::uint64_t seed)
    : model_(model), data_(data), loss_(loss), sgd_(sgd), seed_(seed) {
  loss_.validate();
  if (data_.records.empty()) throw DataError("train: empty training split");
  if (data_.images.size() != data_.records.size()) throw DataError("train: records and images differ in count");
}

EpochStats Trainer::train_epoch(std::size_t epoch, const std::function<void(const BatchLog&)>& on_batch) {
  cache_ = extract_descriptors(model_, data_.images);
  const std::size_t dim = cache_.size() / data_.records.size();

  Rng shuffle(derive_seed(seed_, "shuffle/" + std::to_string(epoch)));
  Rng mining(derive_seed(seed_, "mining/" + std::to_string(epoch)));
  std::vector<std::size_t> order(data_.records.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle.shuffle(order);

  EpochStats stats;
  stats.epoch = epoch;
  double loss_sum = 0.0;
  std::vector<TripletTuple> batch;
  auto flush = [&] {
    if (batch.empty()) return;
    const double l = train_batch(batch);
    loss_sum += l;
    stats.tuples += batch.size();
    ++stats.batches;
    if (on_batch) on_batch({epoch, stats.batches, l, batch.size()});
    batch.clear();
  };
  for (std::size_t q : order) {
    auto t = mine_tuple(q, data_.records, cache_, dim, loss_, mining);
    if (!t) {
      ++stats.skipped;
      continue;
    }
    batch.push_back(std::move(*t));
    if (batch.size() == sgd_.config().batch_size) flush();
  }
  flush();
  if (stats.tuples == 0) throw DataError("train: no minable tuples (check positive/negative radii)");
  stats.mean_loss = loss_sum / static_cast<double>(stats.tuples);
  return stats;
}

double Trainer::train_batch(std::span<const TripletTuple> tuples) {
  // per tuple: query, best positive, negatives
  std::vector<const Tensor<float>*> ptrs;
  std::vector<std::size_t> offsets;
  for (const auto& t : tuples) {
    offsets.push_back(ptrs.size());
    ptrs.push_back(&data_.images[t.query]);
    ptrs.push_back(&data_.images[t.best_positive]);
    for (std::size_t n : t.negatives) ptrs.push_back(&data_.images[n]);
  }
  ParamList<float> params = model_.parameters();
  zero_grads(params);
  const Tensor<float> desc = model_.forward(stack_batch<float>(ptrs), Mode::Train);
  const std::size_t dim = desc.shape().c;

  Tensor<float> upstream(desc.shape());
  double total = 0.0;
  for (std::size_t ti = 0; ti < tuples.size(); ++ti) {
    const std::size_t rows = 2 + tuples[ti].negatives.size();
    total += tuple_loss<float>(desc.data().subspan(offsets[ti] * dim, rows * dim), dim, 1, loss_.margin,
                               upstream.data().subspan(offsets[ti] * dim, rows * dim));
  }
  if (!std::isfinite(total)) throw NumericalError("train: non-finite loss");
  model_.backward(upstream);
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor->has_grad()) continue;
    for (float g : p.tensor->grad()) {
      if (!std::isfinite(g)) throw NumericalError("train: non-finite gradient in " + p.name);
    }
  }
  sgd_.step(params);
  return total;
}

}  // namespace gdnv
