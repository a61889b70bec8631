#include "gdnv/retrieval.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gdnv/rng.hpp"

namespace gdnv {

double distance_m(const Position& a, const Position& b) { return std::hypot(a.x_m - b.x_m, a.y_m - b.y_m); }

// ---------------------------------------------------------------------------
// PPM

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  if (next_token(in) != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  RgbImage img;
  try {
    img.width = std::stoul(next_token(in));
    img.height = std::stoul(next_token(in));
    const auto maxval = std::stoul(next_token(in));
    if (maxval != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (img.width == 0 || img.height == 0) throw DataError(path.string() + ": empty image");
  img.pixels.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError(path.string() + ": truncated");
  return img;
}

std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor<float> image_to_tensor(const RgbImage& img, std::size_t width, std::size_t height) {
  if (img.pixels.size() != img.width * img.height * 3) throw DataError("image buffer size mismatch");
  Tensor<float> t(Shape{1, 3, height, width});
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx =
          std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(img.pixels[(yy * img.width + xx) * 3 + c]);
        };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                         wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        t.at(0, c, y, x) = static_cast<float>((v / 255.0 - 0.5) / 0.25);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Manifest

std::string manifest_line(const ImageRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["image"] = r.image;
  j["x_m"] = r.position.x_m;
  j["y_m"] = r.position.y_m;
  j["split"] = r.split;
  return j.dump();
}

void write_manifest(const std::filesystem::path& path, std::span<const ImageRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : records) out << manifest_line(r) << '\n';
}

std::vector<ImageRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ImageRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImageRecord r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.position.x_m = j.at("x_m").get<double>();
      r.position.y_m = j.at("y_m").get<double>();
      r.split = j.at("split").get<std::string>();
      if (!std::isfinite(r.position.x_m) || !std::isfinite(r.position.y_m)) {
        throw DataError("non-finite position");
      }
      out.push_back(std::move(r));
    } catch (const std::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  std::vector<std::string> ids;
  for (const auto& r : out) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw DataError(path.string() + ": duplicate ids");
  return out;
}

std::vector<ImageRecord> filter_split(std::span<const ImageRecord> records, const std::string& split) {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic places

namespace {

struct Canvas {
  std::size_t w = 0, h = 0;
  std::vector<float> rgb;  // 0..255
  float& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * w + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * w + x) * 3 + c]; }
};

double smooth(double t) { return t * t * (3 - 2 * t); }

// Lattice value noise in [0, 1].
class ValueNoise {
 public:
  ValueNoise(Rng& rng, double cell, std::size_t w, std::size_t h) : cell_(cell) {
    gw_ = static_cast<std::size_t>(static_cast<double>(w) / cell) + 2;
    gh_ = static_cast<std::size_t>(static_cast<double>(h) / cell) + 2;
    values_.resize(gw_ * gh_);
    for (auto& v : values_) v = rng.uniform();
  }
  double at(double x, double y) const {
    const double fx = x / cell_, fy = y / cell_;
    const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
    const double tx = smooth(fx - static_cast<double>(ix)), ty = smooth(fy - static_cast<double>(iy));
    auto v = [&](std::size_t a, std::size_t b) { return values_[std::min(b, gh_ - 1) * gw_ + std::min(a, gw_ - 1)]; };
    return (1 - ty) * ((1 - tx) * v(ix, iy) + tx * v(ix + 1, iy)) + ty * ((1 - tx) * v(ix, iy + 1) + tx * v(ix + 1, iy + 1));
  }

 private:
  double cell_;
  std::size_t gw_ = 0, gh_ = 0;
  std::vector<double> values_;
};

std::array<double, 3> random_color(Rng& rng) {
  return {rng.uniform(20, 235), rng.uniform(20, 235), rng.uniform(20, 235)};
}

Canvas make_place_canvas(Rng& rng, std::size_t w, std::size_t h) {
  Canvas cv{w, h, std::vector<float>(w * h * 3)};
  const auto c1 = random_color(rng);
  const auto c2 = random_color(rng);
  const auto c3 = random_color(rng);
  const double base = static_cast<double>(std::min(w, h));
  ValueNoise coarse(rng, base * rng.uniform(0.25, 0.45), w, h);
  ValueNoise mid(rng, base * rng.uniform(0.08, 0.15), w, h);
  ValueNoise fine(rng, base * rng.uniform(0.03, 0.05), w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double t = 0.6 * coarse.at(fx, fy) + 0.4 * mid.at(fx, fy);
      const double u = fine.at(fx, fy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - t) * c1[c] + t * c2[c];
        cv.at(x, y, c) = static_cast<float>(0.75 * v + 0.25 * (u * c3[c] + (1 - u) * v));
      }
    }
  }

  // geometric motifs: rectangles, discs, bars
  const std::size_t motifs = 6 + rng.index(6);
  for (std::size_t m = 0; m < motifs; ++m) {
    const auto col = random_color(rng);
    const auto kind = rng.index(3);
    const double cx = rng.uniform(0, static_cast<double>(w));
    const double cy = rng.uniform(0, static_cast<double>(h));
    const double size = base * rng.uniform(0.08, 0.3);
    const double angle = rng.uniform(0, 3.14159265358979323846);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double aspect = rng.uniform(0.3, 1.0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
        bool inside = false;
        if (kind == 0) {
          inside = std::abs(u) < size && std::abs(v) < size * aspect;
        } else if (kind == 1) {
          inside = dx * dx + dy * dy < size * size;
        } else {
          inside = std::abs(v) < size * 0.12 && std::abs(u) < size * 2.5;
        }
        if (inside) {
          for (std::size_t c = 0; c < 3; ++c) cv.at(x, y, c) = static_cast<float>(col[c]);
        }
      }
    }
  }
  return cv;
}

double sample(const Canvas& cv, double x, double y, std::size_t c) {
  x = std::clamp(x, 0.0, static_cast<double>(cv.w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(cv.h - 1));
  const auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, cv.w - 1), y1 = std::min(y0 + 1, cv.h - 1);
  const double wx = x - static_cast<double>(x0), wy = y - static_cast<double>(y0);
  return (1 - wy) * ((1 - wx) * cv.at(x0, y0, c) + wx * cv.at(x1, y0, c)) +
         wy * ((1 - wx) * cv.at(x0, y1, c) + wx * cv.at(x1, y1, c));
}

RgbImage render_view(const Canvas& cv, Rng& rng, const SynthConfig& cfg) {
  RgbImage img{cfg.width, cfg.height, std::vector<std::uint8_t>(cfg.width * cfg.height * 3)};
  const double W = static_cast<double>(cfg.width), H = static_cast<double>(cfg.height);
  const double scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
  const double rot = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
  const double tx = rng.uniform(-cfg.max_shift, cfg.max_shift) * W;
  const double ty = rng.uniform(-cfg.max_shift, cfg.max_shift) * H;
  const double gain = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
  const double bias = rng.uniform(-cfg.brightness, cfg.brightness);
  std::array<double, 3> cast{};
  for (auto& v : cast) v = rng.uniform(-0.3, 0.3) * cfg.brightness;
  const double cr = std::cos(rot) / scale, sr = std::sin(rot) / scale;
  const double ox = static_cast<double>(cv.w) / 2 + tx, oy = static_cast<double>(cv.h) / 2 + ty;
  for (std::size_t y = 0; y < cfg.height; ++y) {
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const double u = static_cast<double>(x) + 0.5 - W / 2, v = static_cast<double>(y) + 0.5 - H / 2;
      const double sx = ox + cr * u - sr * v, sy = oy + sr * u + cr * v;
      for (std::size_t c = 0; c < 3; ++c) {
        double val = sample(cv, sx, sy, c);
        val = (val - 128.0) * gain + 128.0 + bias + cast[c] + rng.normal() * cfg.noise;
        img.pixels[(y * cfg.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 255.0)));
      }
    }
  }
  return img;
}

}  // namespace

SynthDataset synth_dataset(const SynthConfig& cfg) {
  if (!(cfg.spacing_m > 2.0 * cfg.negative_radius_m)) {
    throw std::invalid_argument("synth: spacing must exceed twice the negative radius (" +
                                std::to_string(2.0 * cfg.negative_radius_m) + " m)");
  }
  if (cfg.places == 0 || cfg.views < 2) throw std::invalid_argument("synth: need >= 1 place and >= 2 views");
  if (cfg.width == 0 || cfg.height == 0) throw std::invalid_argument("synth: empty image size");

  SynthDataset out;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.places + cfg.train_places))));
  const std::size_t canvas_w = cfg.width * 8 / 5, canvas_h = cfg.height * 8 / 5;
  const std::size_t eval_rows = (cfg.places + cols - 1) / cols;

  auto emit_place = [&](std::size_t place, bool train) {
    const std::string tag = train ? "t" : "p";
    std::ostringstream pid;
    pid << tag << std::setw(3) << std::setfill('0') << place;
    Rng prng(derive_seed(cfg.seed, "place/" + pid.str()));
    const Canvas cv = make_place_canvas(prng, canvas_w, canvas_h);
    const std::size_t row = train ? eval_rows + 1 + place / cols : place / cols;
    const Position center{static_cast<double>(place % cols) * cfg.spacing_m, static_cast<double>(row) * cfg.spacing_m};
    for (std::size_t v = 0; v < cfg.views; ++v) {
      std::ostringstream id;
      id << pid.str() << "_v" << std::setw(2) << std::setfill('0') << v;
      Rng vrng(derive_seed(cfg.seed, "view/" + id.str()));
      const double r = cfg.view_radius_m * std::sqrt(vrng.uniform());
      const double a = vrng.uniform(0, 2 * 3.14159265358979323846);
      ImageRecord rec;
      rec.id = id.str();
      rec.image = "images/" + rec.id + ".ppm";
      rec.position = {center.x_m + r * std::cos(a), center.y_m + r * std::sin(a)};
      rec.split = train ? "train" : (v < cfg.views / 2 ? "db" : "query");
      out.images.push_back(render_view(cv, vrng, cfg));
      out.records.push_back(std::move(rec));
    }
  };
  for (std::size_t p = 0; p < cfg.places; ++p) emit_place(p, false);
  for (std::size_t p = 0; p < cfg.train_places; ++p) emit_place(p, true);
  return out;
}

void write_dataset(const std::filesystem::path& dir, const SynthDataset& data) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < data.records.size(); ++i) write_ppm(dir / data.records[i].image, data.images[i]);
  write_manifest(dir / "manifest.jsonl", data.records);
}

// ---------------------------------------------------------------------------
// Index and recall

void DescriptorIndex::add(std::string id, std::span<const float> descriptor) {
  if (dim_ != 0 && descriptor.size() != dim_) {
    throw ShapeError("index: descriptor has dimension " + std::to_string(descriptor.size()) + ", expected " +
                     std::to_string(dim_));
  }
  double sq = 0.0;
  for (float v : descriptor) sq += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(sq) - 1.0) > 1e-5) throw NumericalError("index: descriptor for '" + id + "' is not unit-norm");
  dim_ = descriptor.size();
  ids_.push_back(std::move(id));
  rows_.insert(rows_.end(), descriptor.begin(), descriptor.end());
}

std::vector<Match> DescriptorIndex::query_topn(std::span<const float> q, std::size_t n) const {
  if (q.size() != dim_) {
    throw ShapeError("query: descriptor has dimension " + std::to_string(q.size()) + ", index has " +
                     std::to_string(dim_));
  }
  std::vector<std::pair<double, std::size_t>> scored(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const float* r = rows_.data() + i * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double d = static_cast<double>(q[j]) - static_cast<double>(r[j]);
      s += d * d;
    }
    scored[i] = {std::sqrt(s), i};
  }
  const std::size_t take = std::min(n, scored.size());
  auto less = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return ids_[a.second] < ids_[b.second];
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), less);
  std::vector<Match> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back({ids_[scored[i].second], scored[i].first});
  return out;
}

void DescriptorIndex::save(Container& c) const {
  c.put("index.descriptors", {ids_.size(), dim_}, rows_);
  std::string joined;
  for (const auto& id : ids_) joined += id + "\n";
  c.put_text("index.ids", joined);
}

DescriptorIndex DescriptorIndex::load(const Container& c) {
  const Record* rows = c.find("index.descriptors");
  if (!rows || rows->dims.size() != 2) throw DataError("index: missing descriptor matrix");
  DescriptorIndex idx(rows->dims[1]);
  std::istringstream ids(c.text("index.ids"));
  std::string id;
  std::size_t i = 0;
  while (std::getline(ids, id)) {
    if (i >= rows->dims[0]) throw DataError("index: more ids than rows");
    idx.ids_.push_back(id);
    ++i;
  }
  if (i != rows->dims[0]) throw DataError("index: id count does not match rows");
  idx.rows_ = rows->values;
  return idx;
}

DescriptorIndex build_index(std::span<const ImageRecord> db,
                            const std::function<std::vector<float>(const ImageRecord&)>& describe) {
  if (db.empty()) throw DataError("build_index: empty database");
  std::vector<const ImageRecord*> order;
  for (const auto& r : db) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  DescriptorIndex idx;
  for (const auto* r : order) idx.add(r->id, describe(*r));
  return idx;
}

std::string RecallTable::format() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < ns.size(); ++i) out << "recall@" << ns[i] << "\t" << recall[i] << "\n";
  return out.str();
}

bool RecallTable::monotone() const {
  for (std::size_t i = 1; i < recall.size(); ++i) {
    if (ns[i] >= ns[i - 1] && recall[i] < recall[i - 1]) return false;
  }
  return true;
}

RecallTable recall_from_first_hits(std::span<const std::size_t> first_hit, std::span<const std::size_t> ns) {
  if (first_hit.empty()) throw DataError("recall: no queries");
  RecallTable t;
  t.ns.assign(ns.begin(), ns.end());
  t.queries = first_hit.size();
  for (std::size_t n : ns) {
    std::size_t ok = 0;
    for (std::size_t r : first_hit) {
      if (r != 0 && r <= n) ++ok;
    }
    t.recall.push_back(static_cast<double>(ok) / static_cast<double>(first_hit.size()));
  }
  return t;
}

RecallTable recall_at_n(std::span<const QueryDescriptor> queries, const DescriptorIndex& index,
                        const std::map<std::string, Position>& db_positions, double tolerance_m,
                        std::span<const std::size_t> ns) {
  if (!(tolerance_m > 0)) throw std::invalid_argument("recall: tolerance must be > 0");
  if (queries.empty()) throw DataError("recall: no queries");
  std::size_t depth = 0;
  for (auto n : ns) depth = std::max(depth, n);
  std::vector<std::size_t> first_hit;
  for (const auto& q : queries) {
    std::size_t hit = 0;
    const auto ranked = index.query_topn(q.descriptor, depth);
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      auto it = db_positions.find(ranked[r].id);
      if (it == db_positions.end()) throw DataError("recall: no position for db id '" + ranked[r].id + "'");
      if (distance_m(it->second, q.position) <= tolerance_m) {
        hit = r + 1;
        break;
      }
    }
    first_hit.push_back(hit);
  }
  return recall_from_first_hits(first_hit, ns);
}

}  // namespace gdnv
