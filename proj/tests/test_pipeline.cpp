#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "gdnv/checkpoint.hpp"
#include "gdnv/pipeline.hpp"

using namespace gdnv;
namespace fs = std::filesystem;

TEST_CASE("container encoding") {
  Container c;
  Tensor<float> t({2, 3, 1, 2});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.1f * static_cast<float>(i) - 0.3f;
  c.put("a.weight", t);
  c.put("b.rows", {3, 2}, {1, 2, 3, 4, 5, 6});
  c.put_text("note", "grüße");
  const std::string bytes = c.encode();
  CHECK(bytes.substr(0, 4) == "GDNV");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kContainerVersion);

  const Container d = Container::decode(bytes);
  CHECK(d.tensor("a.weight").shape() == t.shape());
  CHECK(d.tensor("a.weight").values() == t.values());
  CHECK(d.find("b.rows")->dims == std::vector<std::uint64_t>{3, 2});
  CHECK(d.text("note") == "grüße");
  CHECK(d.encode() == bytes);

  CHECK_THROWS(Container::decode("GDNX" + bytes.substr(4)));
  CHECK_THROWS(Container::decode(bytes.substr(0, bytes.size() - 3)));
  CHECK_THROWS(d.tensor("missing"));
  CHECK_THROWS(c.put("bad", {2, 2}, {1, 2, 3}));

  Container e;
  e.put("a.weight", Tensor<float>({1, 1, 1, 1}, 9.0f));
  c.merge(e);
  CHECK(c.tensor("a.weight")[0] == 9.0f);
}

TEST_CASE("model checkpoint reproduces descriptors bit for bit") {
  RunConfig cfg;
  cfg.input_width = 64;
  cfg.input_height = 64;
  cfg.clusters = 4;
  PlaceModel<float> model = make_model(cfg);
  Rng rng(51);
  std::vector<Tensor<float>> imgs;
  for (int i = 0; i < 6; ++i) {
    Tensor<float> t({1, 3, 64, 64});
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    imgs.push_back(std::move(t));
  }
  initialize_model(model, imgs, 2);

  const fs::path path = fs::temp_directory_path() / "gdnv_test_model.gdnv";
  model_checkpoint(model, cfg).save(path);
  RunConfig loaded_cfg;
  PlaceModel<float> back = model_from_checkpoint(Container::load(path), loaded_cfg);
  CHECK(loaded_cfg.input_width == 64);
  CHECK(loaded_cfg.input_height == 64);
  for (const auto& img : imgs) CHECK(back.global_descriptor(img) == model.global_descriptor(img));
  CHECK(model_checkpoint(back, loaded_cfg).encode() == model_checkpoint(model, cfg).encode());

  std::vector<double> flat;
  for (const auto& img : imgs)
    for (float v : model.global_descriptor(img)) flat.push_back(v);
  model.pca = fit_pca_whitening(flat, imgs.size(), model.descriptor_dim(), 3);
  model_checkpoint(model, cfg).save(path);
  back = model_from_checkpoint(Container::load(path), loaded_cfg);
  REQUIRE(back.pca.has_value());
  CHECK(back.descriptor_dim() == 3);
  for (const auto& img : imgs) CHECK(back.global_descriptor(img) == model.global_descriptor(img));
  fs::remove(path);
}

TEST_CASE("run config documents") {
  const RunConfig c = parse_run_config(
      "# desk run\n"
      "input = 160x128\n"
      "dilation = 5-3   # trailing comment\n"
      "clusters = 16\n"
      "learning_rate = 0.0005\n"
      "recall_ns = 1,2,3\n"
      "seed = 18446744073709551615\n");
  CHECK(c.input_width == 160);
  CHECK(c.input_height == 128);
  CHECK(c.dilation == "5-3");
  CHECK(c.clusters == 16);
  CHECK(c.sgd.learning_rate == 0.0005);
  CHECK(c.recall_ns == std::vector<std::size_t>{1, 2, 3});
  CHECK(c.seed == 18446744073709551615ull);
  CHECK(c.sgd.momentum == 0.9);

  const RunConfig again = parse_run_config(format_run_config(c));
  CHECK(format_run_config(again) == format_run_config(c));

  CHECK_THROWS_AS(parse_run_config("no_such_key = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_run_config("clusters\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_run_config("clusters = many\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_run_config("input = 128\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_run_config("momentum = 1.5\n"), std::invalid_argument);

  const RunConfig d;
  CHECK(d.sgd.learning_rate == 1e-4);
  CHECK(d.loss.margin == 0.1);
  CHECK(d.dilation == "5-2");
}

TEST_CASE("training records") {
  std::vector<ImageRecord> recs{{"a", "", {}, "db"}, {"b", "", {}, "query"}, {"c", "", {}, "db"}};
  auto t = training_records(recs);
  CHECK(t.size() == 2);
  recs.push_back({"d", "", {}, "train"});
  t = training_records(recs);
  REQUIRE(t.size() == 1);
  CHECK(t[0].id == "d");
}
