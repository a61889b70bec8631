#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "gdnv_cli_test";

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const fs::path out = kWork / "stdout.txt";
  const std::string cmd = std::string(GDNV_CLI) + " " + args + " > " + out.string() + " 2> " +
                          (kWork / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream buf;
  buf << in.rdbuf();
  r.out = buf.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  fs::create_directories(kWork);
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("cost --k").code == 1);
  CHECK(run("synth").code == 1);
}

TEST_CASE("cost report") {
  fs::create_directories(kWork);
  const auto r = run("cost --arch ghostcnn-netvlad --baseline vgg16-netvlad --input 640x480 --k 64");
  CHECK(r.code == 0);
  CHECK(r.out.find("FLOPs reduction") != std::string::npos);
  CHECK(r.out.find("params reduction") != std::string::npos);
  CHECK(run("cost --arch lenet").code == 2);
  CHECK(run("cost --input 640").code == 2);
}

TEST_CASE("data and numerical failures") {
  fs::create_directories(kWork);
  CHECK(run("eval --index " + (kWork / "missing.gdnv").string() + " --manifest nope.jsonl").code == 2);
  std::ofstream(kWork / "bad.cfg") << "colour = blue\n";
  CHECK(run("train --config " + (kWork / "bad.cfg").string()).code == 2);
  CHECK(run("gradcheck --tolerance 1e-14").code == 3);
}

TEST_CASE("synth, train, index, query, eval") {
  const fs::path data = kWork / "data", data2 = kWork / "data2", model = kWork / "model";
  fs::remove_all(data);
  fs::remove_all(data2);
  fs::remove_all(model);
  REQUIRE(run("synth --places 6 --views 4 --width 64 --height 64 --seed 3 --out " + data.string()).code == 0);
  REQUIRE(run("synth --places 6 --views 4 --width 64 --height 64 --seed 3 --out " + data2.string()).code == 0);
  CHECK(slurp(data / "manifest.jsonl") == slurp(data2 / "manifest.jsonl"));
  CHECK(slurp(data / "images/p005_v03.ppm") == slurp(data2 / "images/p005_v03.ppm"));

  std::ofstream(kWork / "run.cfg") << "input = 64x64\nclusters = 4\nnegatives_per_tuple = 3\nepochs = 1\n";
  const auto t = run("train --config " + (kWork / "run.cfg").string() + " --manifest " +
                     (data / "manifest.jsonl").string() + " --out " + model.string() + " --seed 5");
  REQUIRE(t.code == 0);
  CHECK(t.out.find("recall@1") != std::string::npos);
  CHECK(fs::exists(model / "model.gdnv"));
  CHECK(fs::exists(model / "epoch_001.gdnv"));
  CHECK(slurp(model / "config.txt").find("seed = 5") != std::string::npos);

  const std::string idx = (kWork / "idx.gdnv").string();
  REQUIRE(run("index --model " + (model / "model.gdnv").string() + " --manifest " + (data / "manifest.jsonl").string() +
              " --out " + idx)
              .code == 0);
  const auto q = run("query --index " + idx + " --image " + (data / "images/p002_v03.ppm").string() + " --top 3");
  CHECK(q.code == 0);
  CHECK(std::count(q.out.begin(), q.out.end(), '\n') >= 3);

  const auto e = run("eval --index " + idx + " --manifest " + (data / "manifest.jsonl").string() +
                     " --tolerance 25 --at 1,5,10,20,25");
  CHECK(e.code == 0);
  for (const char* n : {"recall@1", "recall@5", "recall@10", "recall@20", "recall@25"})
    CHECK(e.out.find(n) != std::string::npos);

  const auto x1 = run("extract --model " + (model / "model.gdnv").string() + " --image " +
                      (data / "images/p000_v00.ppm").string());
  const auto x2 = run("extract --model " + (model / "model.gdnv").string() + " --image " +
                      (data / "images/p000_v00.ppm").string());
  CHECK(x1.code == 0);
  CHECK(x1.out == x2.out);
  CHECK(run("extract --model " + (model / "model.gdnv").string() + " --image " + (kWork / "none.ppm").string()).code ==
        2);
  fs::remove_all(kWork);
}
