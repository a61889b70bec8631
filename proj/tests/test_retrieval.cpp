#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gdnv/retrieval.hpp"
#include "gdnv/rng.hpp"

using namespace gdnv;
namespace fs = std::filesystem;

namespace {

std::vector<float> unit(std::size_t dim, Rng& rng) {
  std::vector<float> v(dim);
  double n = 0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    n += double(x) * x;
  }
  for (auto& x : v) x = static_cast<float>(x / std::sqrt(n));
  return v;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("gdnv_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("query ranking against a sort oracle") {
  Rng rng(41);
  DescriptorIndex idx;
  std::vector<std::vector<float>> rows;
  for (int i = 0; i < 50; ++i) {
    rows.push_back(unit(7, rng));
    idx.add("r" + std::to_string(100 + i), rows.back());
  }
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = unit(7, rng);
    std::vector<std::pair<double, std::string>> want;
    for (int i = 0; i < 50; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += (double(q[j]) - rows[i][j]) * (double(q[j]) - rows[i][j]);
      want.emplace_back(std::sqrt(s), "r" + std::to_string(100 + i));
    }
    std::sort(want.begin(), want.end());
    const auto got = idx.query_topn(q, 10);
    REQUIRE(got.size() == 10);
    for (int i = 0; i < 10; ++i) {
      CHECK(got[i].id == want[i].second);
      CHECK(got[i].distance == doctest::Approx(want[i].first).epsilon(1e-12));
      CHECK(got[i].distance >= 0.0);
      if (i) CHECK(got[i].distance >= got[i - 1].distance);
    }
  }
  CHECK(idx.query_topn(rows[3], 1)[0].id == "r103");
  CHECK(idx.query_topn(rows[3], 1)[0].distance == doctest::Approx(0.0));
  CHECK(idx.query_topn(rows[3], 500).size() == 50);
  CHECK_THROWS_AS(idx.query_topn(std::vector<float>(3, 0.f), 1), ShapeError);
}

TEST_CASE("ties are broken by id") {
  DescriptorIndex idx;
  const std::vector<float> a{1, 0}, b{0, 1};
  idx.add("zeta", a);
  idx.add("alpha", a);
  idx.add("mid", b);
  const auto got = idx.query_topn(a, 3);
  CHECK(got[0].id == "alpha");
  CHECK(got[1].id == "zeta");
  CHECK(got[2].id == "mid");
}

TEST_CASE("index rejects non-unit rows and round-trips through a container") {
  DescriptorIndex idx;
  const std::vector<float> bad{1, 1};
  CHECK_THROWS_AS(idx.add("x", bad), NumericalError);
  Rng rng(42);
  for (int i = 0; i < 5; ++i) idx.add("id" + std::to_string(i), unit(4, rng));
  Container c;
  idx.save(c);
  const auto back = DescriptorIndex::load(Container::decode(c.encode()));
  CHECK(back.ids() == idx.ids());
  for (std::size_t i = 0; i < 5; ++i) {
    const auto r0 = idx.row(i), r1 = back.row(i);
    CHECK(std::equal(r0.begin(), r0.end(), r1.begin()));
  }
}

TEST_CASE("build index") {
  std::vector<ImageRecord> db{{"b", "", {}, "db"}, {"a", "", {}, "db"}};
  const auto idx = build_index(db, [](const ImageRecord& r) {
    return r.id == "a" ? std::vector<float>{1, 0} : std::vector<float>{0, 1};
  });
  CHECK(idx.size() == 2);
  CHECK(idx.ids()[0] == "a");
  CHECK(idx.row(0)[0] == 1.0f);
  CHECK_THROWS_AS(build_index({}, [](const ImageRecord&) { return std::vector<float>{}; }), DataError);
}

TEST_CASE("recall from first hits") {
  const std::vector<std::size_t> hits{1, 3, 7, 0}, ns{1, 5, 10, 25};
  const auto t = recall_from_first_hits(hits, ns);
  CHECK(t.recall[0] == doctest::Approx(0.25));
  CHECK(t.recall[1] == doctest::Approx(0.5));
  CHECK(t.recall[2] == doctest::Approx(0.75));
  CHECK(t.recall[3] == doctest::Approx(0.75));
  CHECK(t.monotone());
  CHECK_THROWS_AS(recall_from_first_hits({}, ns), DataError);
}

TEST_CASE("recall at N") {
  Rng rng(43);
  DescriptorIndex idx;
  std::map<std::string, Position> pos;
  std::vector<QueryDescriptor> queries;
  for (int p = 0; p < 10; ++p) {
    const auto d = unit(8, rng);
    const std::string id = "p" + std::to_string(p);
    idx.add(id, d);
    pos[id] = {100.0 * p, 0.0};
    queries.push_back({d, {100.0 * p + 3.0, 0.0}});
  }
  const auto perfect = recall_at_n(queries, idx, pos, 25.0, default_recall_ns());
  for (double r : perfect.recall) CHECK(r == 1.0);

  for (int trial = 0; trial < 10; ++trial) {
    std::vector<QueryDescriptor> random;
    for (int i = 0; i < 30; ++i) random.push_back({unit(8, rng), {100.0 * rng.index(10), 0.0}});
    const auto t = recall_at_n(random, idx, pos, 25.0, default_recall_ns());
    CHECK(t.monotone());
    for (std::size_t i = 1; i < t.recall.size(); ++i) CHECK(t.recall[i] >= t.recall[i - 1]);
    CHECK(t.recall.back() == 1.0);
  }
  CHECK_THROWS(recall_at_n(queries, idx, pos, 0.0, default_recall_ns()));
  CHECK_THROWS_AS(recall_at_n({}, idx, pos, 25.0, default_recall_ns()), DataError);
}

TEST_CASE("synthetic dataset") {
  SynthConfig cfg;
  cfg.places = 6;
  cfg.views = 4;
  cfg.width = 40;
  cfg.height = 30;
  const auto a = synth_dataset(cfg);
  REQUIRE(a.records.size() == 24);
  REQUIRE(a.images.size() == 24);
  CHECK(filter_split(a.records, "db").size() == 12);
  CHECK(filter_split(a.records, "query").size() == 12);
  for (const auto& img : a.images) {
    CHECK(img.width == 40);
    CHECK(img.height == 30);
  }
  std::set<std::string> ids;
  for (const auto& r : a.records) ids.insert(r.id);
  CHECK(ids.size() == 24);

  // within 25 m of a query are exactly its own place's db views
  for (const auto& q : filter_split(a.records, "query")) {
    for (const auto& d : filter_split(a.records, "db")) {
      const bool same = q.id.substr(0, 4) == d.id.substr(0, 4);
      CHECK((distance_m(q.position, d.position) <= 25.0) == same);
      if (same) CHECK(distance_m(q.position, d.position) <= 10.0);
    }
  }

  const auto b = synth_dataset(cfg);
  for (std::size_t i = 0; i < 24; ++i) {
    CHECK(a.images[i].pixels == b.images[i].pixels);
    CHECK(manifest_line(a.records[i]) == manifest_line(b.records[i]));
  }
  SynthConfig other = cfg;
  other.seed = 8;
  CHECK(synth_dataset(other).images[0].pixels != a.images[0].pixels);

  SynthConfig bad = cfg;
  bad.spacing_m = 50.0;
  CHECK_THROWS(synth_dataset(bad));

  SynthConfig with_train = cfg;
  with_train.train_places = 3;
  CHECK(filter_split(synth_dataset(with_train).records, "train").size() == 12);
}

TEST_CASE("dataset files are byte-identical for a fixed seed") {
  SynthConfig cfg;
  cfg.places = 3;
  cfg.views = 2;
  cfg.width = 16;
  cfg.height = 16;
  const fs::path d1 = scratch("ds1"), d2 = scratch("ds2");
  write_dataset(d1, synth_dataset(cfg));
  write_dataset(d2, synth_dataset(cfg));
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(d1 / "manifest.jsonl") == slurp(d2 / "manifest.jsonl"));
  CHECK(slurp(d1 / "images/p000_v00.ppm") == slurp(d2 / "images/p000_v00.ppm"));

  const auto recs = read_manifest(d1 / "manifest.jsonl");
  CHECK(recs.size() == 6);
  const auto img = read_ppm(d1 / recs[0].image);
  CHECK(img.width == 16);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("manifest validation") {
  const fs::path d = scratch("manifest");
  auto write = [&](const std::string& text) {
    std::ofstream(d / "m.jsonl") << text;
    return d / "m.jsonl";
  };
  CHECK(read_manifest(write(R"({"id":"a","image":"a.ppm","x_m":1,"y_m":2,"split":"db"})"
                            "\n")).size() == 1);
  CHECK_THROWS(read_manifest(write(R"({"id":"a","image":"a.ppm","x_m":1,"y_m":2,"split":"db"})"
                                   "\n"
                                   R"({"id":"a","image":"b.ppm","x_m":1,"y_m":2,"split":"db"})"
                                   "\n")));
  CHECK_THROWS(read_manifest(write(R"({"id":"a","image":"a.ppm","x_m":"east","y_m":2,"split":"db"})"
                                   "\n")));
  CHECK_THROWS(read_manifest(write("not json\n")));
  CHECK_THROWS(read_manifest(d / "missing.jsonl"));
  fs::remove_all(d);
}

TEST_CASE("ppm and image preprocessing") {
  RgbImage img{2, 1, {0, 0, 0, 255, 255, 255}};
  const std::string bytes = encode_ppm(img);
  CHECK(bytes.rfind("P6", 0) == 0);
  const fs::path d = scratch("ppm");
  write_ppm(d / "x.ppm", img);
  const auto back = read_ppm(d / "x.ppm");
  CHECK(back.pixels == img.pixels);
  std::ofstream(d / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS(read_ppm(d / "bad.ppm"));
  fs::remove_all(d);

  // same size: pixels map straight through the normalization
  const auto t = image_to_tensor(img, 2, 1);
  CHECK(t.shape() == Shape{1, 3, 1, 2});
  CHECK(t.at(0, 0, 0, 0) == doctest::Approx(-2.0));
  CHECK(t.at(0, 2, 0, 1) == doctest::Approx(2.0));
  // constant image stays constant under resize
  RgbImage flat{5, 3, std::vector<std::uint8_t>(45, 51)};
  const Tensor<float> ft = image_to_tensor(flat, 8, 6);
  for (float v : ft.data()) CHECK(v == doctest::Approx((0.2 - 0.5) / 0.25));
}
