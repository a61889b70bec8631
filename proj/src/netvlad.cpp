#include "gdnv/netvlad.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gdnv/rng.hpp"

namespace gdnv {

template <typename T>
VladParams<T>::VladParams(std::size_t clusters, std::size_t dim)
    : centers(Shape{clusters, dim, 1, 1}), weights(Shape{clusters, dim, 1, 1}), biases(Shape{clusters, 1, 1, 1}) {}

template <typename T>
VladParams<T> VladParams<T>::from_centers(std::span<const T> c, std::size_t clusters, std::size_t dim,
                                          double alpha) {
  if (clusters == 0 || dim == 0) throw ShapeError("vlad: clusters and dim must be >= 1");
  if (c.size() != clusters * dim) throw ShapeError("vlad: center matrix size mismatch");
  VladParams p(clusters, dim);
  p.alpha = alpha;
  for (std::size_t k = 0; k < clusters; ++k) {
    double sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const T v = c[k * dim + j];
      p.centers[k * dim + j] = v;
      p.weights[k * dim + j] = static_cast<T>(2.0 * alpha * static_cast<double>(v));
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    p.biases[k] = static_cast<T>(-alpha * sq);
  }
  return p;
}

template <typename T>
std::vector<T> soft_assign(std::span<const T> x, const VladParams<T>& params) {
  const std::size_t K = params.clusters();
  const std::size_t D = params.dim();
  if (x.size() != D) throw ShapeError("soft_assign: descriptor dimension mismatch");
  std::vector<T> logits(K);
  for (std::size_t k = 0; k < K; ++k) {
    T acc = params.biases[k];
    const T* w = params.weights.data().data() + k * D;
    for (std::size_t j = 0; j < D; ++j) acc += w[j] * x[j];
    logits[k] = acc;
  }
  return softmax_rows<T>(logits, 1, K);
}

template <typename T>
Tensor<T> NetVladLayer<T>::forward(const Tensor<T>& features, Mode mode) {
  const Shape& s = features.shape();
  const std::size_t K = params.clusters();
  const std::size_t D = params.dim();
  if (s.c != D) {
    throw ShapeError("netvlad: feature map has " + std::to_string(s.c) + " channels, expected " +
                     std::to_string(D));
  }
  const std::size_t P = s.plane();
  Tensor<T> out(Shape{s.n, K * D, 1, 1});
  const bool keep = records(mode);
  if (keep) {
    cache_.assign(s.n, {});
    input_shape_ = s;
  }

  for (std::size_t n = 0; n < s.n; ++n) {
    ItemCache item;
    item.raw.resize(P * D);
    for (std::size_t j = 0; j < D; ++j) {
      const T* plane = features.plane(n, j);
      for (std::size_t i = 0; i < P; ++i) item.raw[i * D + j] = plane[i];
    }
    item.normalized.resize(P * D);
    item.assign.resize(P * K);
    for (std::size_t i = 0; i < P; ++i) {
      std::span<const T> xi(item.raw.data() + i * D, D);
      auto xn = l2_normalize<T>(xi, eps);
      std::copy(xn.begin(), xn.end(), item.normalized.begin() + static_cast<std::ptrdiff_t>(i * D));
      auto a = soft_assign<T>(xn, params);
      std::copy(a.begin(), a.end(), item.assign.begin() + static_cast<std::ptrdiff_t>(i * K));
    }
    item.residual.assign(K * D, T{});
    for (std::size_t k = 0; k < K; ++k) {
      T* v = item.residual.data() + k * D;
      const T* c = params.centers.data().data() + k * D;
      for (std::size_t i = 0; i < P; ++i) {
        const T a = item.assign[i * K + k];
        const T* x = item.normalized.data() + i * D;
        for (std::size_t j = 0; j < D; ++j) v[j] += a * (x[j] - c[j]);
      }
    }
    item.flat.resize(K * D);
    for (std::size_t k = 0; k < K; ++k) {
      auto u = l2_normalize<T>(std::span<const T>(item.residual.data() + k * D, D), eps);
      std::copy(u.begin(), u.end(), item.flat.begin() + static_cast<std::ptrdiff_t>(k * D));
    }
    auto z = l2_normalize<T>(item.flat, eps);
    std::copy(z.begin(), z.end(), out.plane(n, 0));
    if (keep) cache_[n] = std::move(item);
  }
  return out;
}

template <typename T>
Tensor<T> NetVladLayer<T>::backward(const Tensor<T>& upstream) {
  const Shape& s = input_shape_;
  const std::size_t K = params.clusters();
  const std::size_t D = params.dim();
  const std::size_t P = s.plane();
  if (upstream.shape() != Shape{s.n, K * D, 1, 1}) throw ShapeError("netvlad backward: shape mismatch");

  auto& g_centers = params.centers.grad();
  auto& g_weights = params.weights.grad();
  auto& g_biases = params.biases.grad();
  Tensor<T> dx(s);

  for (std::size_t n = 0; n < s.n; ++n) {
    const ItemCache& item = cache_[n];
    auto dflat = l2_normalize_backward<T>(std::span<const T>(upstream.plane(n, 0), K * D), item.flat, eps);
    std::vector<T> dv(K * D);
    std::vector<T> ds(K, T{});
    std::vector<T> mass(K, T{});
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t k = 0; k < K; ++k) mass[k] += item.assign[i * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) {
      auto d = l2_normalize_backward<T>(std::span<const T>(dflat.data() + k * D, D),
                                        std::span<const T>(item.residual.data() + k * D, D), eps);
      std::copy(d.begin(), d.end(), dv.begin() + static_cast<std::ptrdiff_t>(k * D));
      const T* c = params.centers.data().data() + k * D;
      T acc{};
      for (std::size_t j = 0; j < D; ++j) {
        g_centers[k * D + j] -= mass[k] * d[j];
        acc += c[j] * d[j];
      }
      ds[k] = -acc;
    }

    std::vector<T> dxn(P * D, T{});
    std::vector<T> da(K);
    for (std::size_t i = 0; i < P; ++i) {
      const T* x = item.normalized.data() + i * D;
      const T* a = item.assign.data() + i * K;
      T* gx = dxn.data() + i * D;
      T weighted{};
      for (std::size_t k = 0; k < K; ++k) {
        const T* d = dv.data() + k * D;
        T dot{};
        for (std::size_t j = 0; j < D; ++j) {
          dot += x[j] * d[j];
          gx[j] += a[k] * d[j];
        }
        da[k] = dot + ds[k];
        weighted += a[k] * da[k];
      }
      for (std::size_t k = 0; k < K; ++k) {
        const T dl = a[k] * (da[k] - weighted);
        g_biases[k] += dl;
        const T* w = params.weights.data().data() + k * D;
        T* gw = g_weights.data() + k * D;
        for (std::size_t j = 0; j < D; ++j) {
          gw[j] += dl * x[j];
          gx[j] += dl * w[j];
        }
      }
      auto graw = l2_normalize_backward<T>(std::span<const T>(gx, D),
                                           std::span<const T>(item.raw.data() + i * D, D), eps);
      for (std::size_t j = 0; j < D; ++j) dx.plane(n, j)[i] = graw[j];
    }
  }
  return dx;
}

template <typename T>
void NetVladLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.push_back({prefix + "centers", &params.centers, true});
  out.push_back({prefix + "w", &params.weights, true});
  out.push_back({prefix + "b", &params.biases, true});
}

template <typename T>
std::vector<T> vlad_aggregate(const Tensor<T>& features, const VladParams<T>& params, T eps) {
  if (features.shape().n != 1) throw ShapeError("vlad_aggregate: expects a single feature map");
  NetVladLayer<T> layer(params, eps);
  return layer.forward(features, Mode::Infer).values();
}

// ---------------------------------------------------------------------------

namespace {

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(std::span<const double> data, std::size_t rows, std::size_t dim, std::size_t k,
                    std::uint64_t seed, std::size_t max_iters, double tol) {
  if (k == 0 || dim == 0) throw std::invalid_argument("kmeans: k and dim must be >= 1");
  if (data.size() != rows * dim) throw ShapeError("kmeans: data size mismatch");
  if (rows < k) {
    throw std::invalid_argument("kmeans: need at least " + std::to_string(k) + " samples, got " +
                                std::to_string(rows));
  }
  Rng rng(seed);
  std::vector<double> centers(k * dim);
  std::vector<double> best(rows, std::numeric_limits<double>::infinity());

  // k-means++ seeding
  std::size_t first = rng.index(rows);
  std::copy_n(data.data() + first * dim, dim, centers.data());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      best[i] = std::min(best[i], sq_dist(data.data() + i * dim, centers.data() + (c - 1) * dim, dim));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.index(rows);
    } else {
      double target = rng.uniform() * total;
      pick = rows - 1;
      for (std::size_t i = 0; i < rows; ++i) {
        target -= best[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    }
    std::copy_n(data.data() + pick * dim, dim, centers.data() + c * dim);
  }

  KMeansResult result;
  std::vector<std::size_t> label(rows, 0);
  std::vector<double> dist(rows, 0.0);
  auto assign = [&] {
    for (std::size_t i = 0; i < rows; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      std::size_t bk = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(data.data() + i * dim, centers.data() + c * dim, dim);
        if (d < bd) {
          bd = d;
          bk = c;
        }
      }
      label[i] = bk;
      dist[i] = bd;
    }
  };

  for (std::size_t it = 0; it < max_iters; ++it) {
    assign();
    std::vector<double> next(k * dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < rows; ++i) {
      ++counts[label[i]];
      for (std::size_t j = 0; j < dim; ++j) next[label[i] * dim + j] += data[i * dim + j];
    }
    std::vector<bool> taken(rows, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < dim; ++j) next[c * dim + j] /= static_cast<double>(counts[c]);
        continue;
      }
      // empty cluster: move it onto the point farthest from its center
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < rows; ++i) {
        if (!taken[i] && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      dist[far] = 0.0;
      std::copy_n(data.data() + far * dim, dim, next.data() + c * dim);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, std::sqrt(sq_dist(next.data() + c * dim, centers.data() + c * dim, dim)));
    }
    centers = std::move(next);
    result.iterations = it + 1;
    if (shift < tol) break;
  }
  assign();
  result.distortion = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(rows);
  result.centers = std::move(centers);
  return result;
}

double init_alpha(std::span<const double> data, std::size_t rows, std::size_t dim, std::span<const double> centers,
                  std::size_t k) {
  if (k < 2 || rows == 0) return 1.0;
  double gap = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double m1 = std::numeric_limits<double>::infinity(), m2 = m1;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = sq_dist(data.data() + i * dim, centers.data() + c * dim, dim);
      if (d < m1) {
        m2 = m1;
        m1 = d;
      } else if (d < m2) {
        m2 = d;
      }
    }
    gap += m2 - m1;
  }
  gap /= static_cast<double>(rows);
  return gap > 0.0 ? std::log(100.0) / gap : 1.0;
}

std::vector<double> PcaWhitening::apply(std::span<const double> v) const {
  if (v.size() != input_dim) {
    throw ShapeError("pca: input has dimension " + std::to_string(v.size()) + ", expected " +
                     std::to_string(input_dim));
  }
  std::vector<double> centered(input_dim);
  for (std::size_t j = 0; j < input_dim; ++j) centered[j] = v[j] - mean[j];
  std::vector<double> out(out_dim, 0.0);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const double* row = projection.data() + r * input_dim;
    double acc = 0.0;
    for (std::size_t j = 0; j < input_dim; ++j) acc += row[j] * centered[j];
    out[r] = acc;
  }
  return l2_normalize<double>(out, 1e-12);
}

std::vector<float> PcaWhitening::apply(std::span<const float> v) const {
  std::vector<double> d(v.begin(), v.end());
  auto r = apply(std::span<const double>(d));
  return {r.begin(), r.end()};
}

void PcaWhitening::save(Container& c) const {
  c.put("pca.mean", {input_dim}, std::vector<float>(mean.begin(), mean.end()));
  c.put("pca.proj", {out_dim, input_dim}, std::vector<float>(projection.begin(), projection.end()));
  c.put("pca.var", {out_dim}, std::vector<float>(variances.begin(), variances.end()));
}

PcaWhitening PcaWhitening::load(const Container& c) {
  PcaWhitening p;
  const Record* mean = c.find("pca.mean");
  const Record* proj = c.find("pca.proj");
  if (!mean || !proj || proj->dims.size() != 2) throw DataError("checkpoint: missing PCA records");
  p.input_dim = proj->dims[1];
  p.out_dim = proj->dims[0];
  p.mean.assign(mean->values.begin(), mean->values.end());
  p.projection.assign(proj->values.begin(), proj->values.end());
  if (const Record* var = c.find("pca.var")) p.variances.assign(var->values.begin(), var->values.end());
  if (p.mean.size() != p.input_dim) throw DataError("checkpoint: PCA mean/projection mismatch");
  return p;
}

PcaWhitening fit_pca_whitening(std::span<const double> data, std::size_t rows, std::size_t dim,
                               std::size_t out_dim, double epsilon) {
  using Mat = Eigen::MatrixXd;
  if (data.size() != rows * dim) throw ShapeError("pca: data size mismatch");
  if (out_dim == 0 || rows <= out_dim) {
    throw std::invalid_argument("pca: need more samples (" + std::to_string(rows) + ") than output dimensions (" +
                                std::to_string(out_dim) + ")");
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> raw(
      data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  const Eigen::RowVectorXd mu = raw.colwise().mean();
  const Mat X = raw.rowwise() - mu;
  const double m = static_cast<double>(rows);

  Eigen::VectorXd evals;
  Mat evecs;  // dim x r, columns unit-norm
  if (dim <= rows) {
    Eigen::SelfAdjointEigenSolver<Mat> es((X.transpose() * X) / m);
    evals = es.eigenvalues();
    evecs = es.eigenvectors();
  } else {
    Eigen::SelfAdjointEigenSolver<Mat> es((X * X.transpose()) / m);
    evals = es.eigenvalues();
    evecs = X.transpose() * es.eigenvectors();
    for (Eigen::Index c = 0; c < evecs.cols(); ++c) {
      const double nrm = evecs.col(c).norm();
      if (nrm > 0) evecs.col(c) /= nrm;
    }
  }
  // eigen returns ascending order
  const Eigen::Index count = evals.size();
  const double top = std::max(evals(count - 1), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < count; ++i) {
    if (evals(i) > 1e-10 * top && evals(i) > 0) ++rank;
  }
  if (out_dim > rank) {
    throw std::invalid_argument("pca: output dimension " + std::to_string(out_dim) + " exceeds data rank " +
                                std::to_string(rank));
  }

  PcaWhitening p;
  p.input_dim = dim;
  p.out_dim = out_dim;
  p.epsilon = epsilon;
  p.mean.assign(mu.data(), mu.data() + dim);
  p.projection.resize(out_dim * dim);
  p.variances.resize(out_dim);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const Eigen::Index src = count - 1 - static_cast<Eigen::Index>(r);
    Eigen::VectorXd v = evecs.col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const double scale = 1.0 / std::sqrt(evals(src) + epsilon);
    p.variances[r] = evals(src);
    for (std::size_t j = 0; j < dim; ++j) p.projection[r * dim + j] = v(static_cast<Eigen::Index>(j)) * scale;
  }
  // held at the checkpoint's single precision so a reloaded model gives identical descriptors
  for (auto* vec : {&p.mean, &p.projection, &p.variances}) {
    for (double& x : *vec) x = static_cast<double>(static_cast<float>(x));
  }
  return p;
}

template struct VladParams<float>;
template struct VladParams<double>;
template std::vector<float> soft_assign(std::span<const float>, const VladParams<float>&);
template std::vector<double> soft_assign(std::span<const double>, const VladParams<double>&);
template class NetVladLayer<float>;
template class NetVladLayer<double>;
template std::vector<float> vlad_aggregate(const Tensor<float>&, const VladParams<float>&, float);
template std::vector<double> vlad_aggregate(const Tensor<double>&, const VladParams<double>&, double);

}  // namespace gdnv
