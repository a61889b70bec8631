// gdnv: synthetic data, training, descriptor extraction, retrieval evaluation and cost reports.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "gdnv/costmodel.hpp"
#include "gdnv/gradcheck.hpp"
#include "gdnv/pipeline.hpp"

namespace {

using namespace gdnv;

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumerical = 3;

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw std::invalid_argument("expected WxH, got '" + text + "'");
  try {
    return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
  } catch (const std::logic_error&) {
    throw std::invalid_argument("expected WxH, got '" + text + "'");
  }
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("expected a comma-separated list of integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

void print_recall(const std::string& title, const RecallTable& t) {
  std::cout << title << " (" << t.queries << " queries)\n" << t.format();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  std::string out;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* cmd = app.add_subcommand("synth", "write a synthetic geotagged dataset (manifest.jsonl + P6 images)");
  cmd->add_option("--places", a.cfg.places, "number of evaluation places")->capture_default_str();
  cmd->add_option("--views", a.cfg.views, "views per place (half db, half query)")->capture_default_str();
  cmd->add_option("--width", a.cfg.width, "image width")->capture_default_str();
  cmd->add_option("--height", a.cfg.height, "image height")->capture_default_str();
  cmd->add_option("--spacing", a.cfg.spacing_m, "grid spacing in meters")->capture_default_str();
  cmd->add_option("--seed", a.cfg.seed, "dataset seed")->capture_default_str();
  cmd->add_option("--train-places", a.cfg.train_places, "extra places tagged train")->capture_default_str();
  cmd->add_option("--view-radius", a.cfg.view_radius_m, "view jitter radius in meters")->capture_default_str();
  cmd->add_option("--negative-radius", a.cfg.negative_radius_m, "negative radius the spacing must clear")
      ->capture_default_str();
  cmd->add_option("--max-shift", a.cfg.max_shift, "max translation, fraction of the view")->capture_default_str();
  cmd->add_option("--max-rotation", a.cfg.max_rotation, "max rotation in radians")->capture_default_str();
  cmd->add_option("--scale-jitter", a.cfg.scale_jitter, "max relative zoom")->capture_default_str();
  cmd->add_option("--brightness", a.cfg.brightness, "max brightness offset")->capture_default_str();
  cmd->add_option("--contrast", a.cfg.contrast, "max relative contrast change")->capture_default_str();
  cmd->add_option("--noise", a.cfg.noise, "pixel noise sigma")->capture_default_str();
  cmd->add_option("--out", a.out, "output directory")->required();
}

int run_synth(const SynthArgs& a) {
  const SynthDataset data = synth_dataset(a.cfg);
  write_dataset(a.out, data);
  std::cout << "wrote " << data.records.size() << " images to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  bool eval_each_epoch = false;
};

void add_train(CLI::App& app, TrainArgs& a, std::map<std::string, std::string>& flags) {
  auto* cmd = app.add_subcommand("train", "triplet training; writes epoch checkpoints and model.gdnv");
  cmd->add_option("--config", a.config, "key = value config file (flags override it)");
  const std::vector<std::pair<std::string, std::string>> keys{
      {"--manifest", "manifest"},
      {"--out", "out_dir"},
      {"--input", "input"},
      {"--backbone", "backbone"},
      {"--dilation", "dilation"},
      {"--width-mult", "channel_multiplier"},
      {"--k", "clusters"},
      {"--reduction", "reduction"},
      {"--margin", "margin"},
      {"--negatives", "negatives_per_tuple"},
      {"--negative-pool", "negative_pool"},
      {"--positive-radius", "positive_radius_m"},
      {"--negative-radius", "negative_radius_m"},
      {"--lr", "learning_rate"},
      {"--momentum", "momentum"},
      {"--weight-decay", "weight_decay"},
      {"--batch", "batch_size"},
      {"--seed", "seed"},
      {"--epochs", "epochs"},
      {"--tolerance", "tolerance_m"},
      {"--at", "recall_ns"},
  };
  for (const auto& [flag, key] : keys) cmd->add_option(flag, flags[key], "config key '" + key + "'");
  cmd->add_flag("--eval-each-epoch", a.eval_each_epoch, "evaluate recall after every epoch");
}

int run_train(const TrainArgs& a, const std::map<std::string, std::string>& flags, std::size_t threads) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  for (const auto& [key, value] : flags) {
    if (!value.empty()) set_config_value(cfg, key, value);
  }
  if (threads) cfg.threads = threads;
  if (cfg.manifest.empty()) throw std::invalid_argument("train: no manifest (use --manifest or the config file)");
  if (cfg.out_dir.empty()) throw std::invalid_argument("train: no output directory (use --out)");

  std::filesystem::create_directories(cfg.out_dir);
  const std::string effective = format_run_config(cfg);
  std::ofstream(cfg.out_dir / "config.txt") << effective;
  std::cerr << "effective config:\n" << effective;

  const Dataset data = dataset_from_manifest(cfg.manifest);
  PlaceModel<float> model = make_model(cfg);
  TrainHooks hooks;
  hooks.eval_each_epoch = a.eval_each_epoch;
  hooks.on_batch = [](const BatchLog& b) {
    std::cerr << "epoch " << b.epoch << " batch " << b.batch << " loss " << std::setprecision(6) << b.loss
              << " tuples " << b.tuples << "\n";
  };
  hooks.on_epoch = [](const EpochStats& s, const std::optional<RecallTable>& r) {
    std::cerr << "epoch " << s.epoch << " done: mean loss " << s.mean_loss << ", tuples " << s.tuples
              << ", skipped " << s.skipped;
    if (r) std::cerr << ", recall@" << r->ns.front() << " " << r->recall.front();
    std::cerr << "\n";
  };
  const TrainReport report = run_training(cfg, data, model, hooks);
  print_recall("untrained baseline", report.baseline);
  print_recall("trained", report.final);
  std::cout << "model: " << (cfg.out_dir / "model.gdnv").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string model, image, out;
};

void add_extract(CLI::App& app, ExtractArgs& a) {
  auto* cmd = app.add_subcommand("extract", "global descriptor of one image");
  cmd->add_option("--model", a.model, "model checkpoint")->required();
  cmd->add_option("--image", a.image, "P6 image")->required();
  cmd->add_option("--out", a.out, "write the descriptor here (one value per line) instead of stdout");
}

int run_extract(const ExtractArgs& a) {
  RunConfig cfg;
  PlaceModel<float> model = model_from_checkpoint(Container::load(a.model), cfg);
  const Tensor<float> x = image_to_tensor(read_ppm(a.image), cfg.input_width, cfg.input_height);
  const std::vector<float> d = model.global_descriptor(x);
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw DataError("cannot write " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;
  out << std::setprecision(9);
  for (float v : d) out << v << "\n";
  std::cerr << "descriptor dim " << d.size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct IndexArgs {
  std::string model, manifest, out, split = "db";
};

void add_index(CLI::App& app, IndexArgs& a) {
  auto* cmd = app.add_subcommand("index", "describe every db image; the index file embeds the model");
  cmd->add_option("--model", a.model, "model checkpoint")->required();
  cmd->add_option("--manifest", a.manifest, "dataset manifest")->required();
  cmd->add_option("--split", a.split, "split to index")->capture_default_str();
  cmd->add_option("--out", a.out, "index file")->required();
}

int run_index(const IndexArgs& a) {
  RunConfig cfg;
  const Container ckpt = Container::load(a.model);
  PlaceModel<float> model = model_from_checkpoint(ckpt, cfg);
  const DescriptorIndex idx = index_split(model, dataset_from_manifest(a.manifest), cfg, a.split);
  Container c = ckpt;
  idx.save(c);
  c.save(a.out);
  std::cout << "indexed " << idx.size() << " images, dim " << idx.dim() << " -> " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct QueryArgs {
  std::string index, image;
  std::size_t top = 5;
};

void add_query(CLI::App& app, QueryArgs& a) {
  auto* cmd = app.add_subcommand("query", "rank the index against one image");
  cmd->add_option("--index", a.index, "index file")->required();
  cmd->add_option("--image", a.image, "P6 image")->required();
  cmd->add_option("--top", a.top, "results to print")->capture_default_str();
}

int run_query(const QueryArgs& a) {
  RunConfig cfg;
  const Container c = Container::load(a.index);
  PlaceModel<float> model = model_from_checkpoint(c, cfg);
  const DescriptorIndex idx = DescriptorIndex::load(c);
  const auto d = model.global_descriptor(image_to_tensor(read_ppm(a.image), cfg.input_width, cfg.input_height));
  std::cout << std::fixed << std::setprecision(6);
  std::size_t rank = 1;
  for (const auto& m : idx.query_topn(d, a.top)) std::cout << rank++ << "\t" << m.id << "\t" << m.distance << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string index, manifest;
  double tolerance = 25.0;
  std::string at = "1,5,10,20,25";
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* cmd = app.add_subcommand("eval", "recall@N of the manifest's query split against an index");
  cmd->add_option("--index", a.index, "index file")->required();
  cmd->add_option("--manifest", a.manifest, "dataset manifest")->required();
  cmd->add_option("--tolerance", a.tolerance, "ground-truth radius in meters")->capture_default_str();
  cmd->add_option("--at", a.at, "comma-separated N list")->capture_default_str();
}

int run_eval(const EvalArgs& a) {
  RunConfig cfg;
  const Container c = Container::load(a.index);
  PlaceModel<float> model = model_from_checkpoint(c, cfg);
  cfg.tolerance_m = a.tolerance;
  cfg.recall_ns = parse_list(a.at);
  const RecallTable t = evaluate(model, DescriptorIndex::load(c), dataset_from_manifest(a.manifest), cfg);
  print_recall("recall", t);
  return kOk;
}

// ---------------------------------------------------------------------------

struct CostArgs {
  std::string arch = "ghostcnn-netvlad", baseline = "vgg16-netvlad", input = "640x480", dilation = "1";
  std::size_t k = 64;
  double width_mult = 1.0;
  bool json = false;
  bool layers = false;
};

void add_cost(CLI::App& app, CostArgs& a) {
  auto* cmd = app.add_subcommand("cost", "analytic MACs/FLOPs/params and reduction against a baseline");
  cmd->add_option("--arch", a.arch, "ghostcnn-netvlad, vgg16-netvlad or alexnet-netvlad")->capture_default_str();
  cmd->add_option("--baseline", a.baseline, "architecture to compare against (empty: none)")->capture_default_str();
  cmd->add_option("--input", a.input, "WxH")->capture_default_str();
  cmd->add_option("--k", a.k, "VLAD clusters")->capture_default_str();
  cmd->add_option("--dilation", a.dilation, "GhostCNN dilation scheme")->capture_default_str();
  cmd->add_option("--width-mult", a.width_mult, "GhostCNN channel multiplier")->capture_default_str();
  cmd->add_flag("--json", a.json, "JSON output");
  cmd->add_flag("--layers", a.layers, "per-layer tables in the text output");
}

int run_cost(const CostArgs& a) {
  const auto [w, h] = parse_size(a.input);
  std::vector<CostReport> reports;
  if (!a.baseline.empty()) reports.push_back(model_cost(named_arch(a.baseline, h, w, a.k, a.dilation, a.width_mult)));
  reports.push_back(model_cost(named_arch(a.arch, h, w, a.k, a.dilation, a.width_mult)));
  std::optional<CostComparison> cmp;
  if (reports.size() == 2) cmp = compare_costs(reports[0], reports[1]);
  if (a.json) {
    std::cout << render_json(reports, cmp) << "\n";
    return kOk;
  }
  for (const auto& r : reports) {
    if (a.layers) {
      std::cout << render_text(r) << "\n";
    } else {
      std::cout << std::left << std::setw(20) << r.name << " MACs " << r.macs << "  FLOPs " << r.flops << "  params "
                << r.params << "\n";
    }
  }
  if (cmp) std::cout << render_comparison_text(*cmp);
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
};

void add_gradcheck(CLI::App& app, GradcheckArgs& a) {
  auto* cmd = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  cmd->add_option("--seed", a.seed, "probe seed")->capture_default_str();
  cmd->add_option("--tolerance", a.tolerance, "max relative error")->capture_default_str();
}

int run_gradcheck(const GradcheckArgs& a) {
  bool ok = true;
  std::cout << std::left << std::setw(18) << "op" << std::setw(16) << "max_rel_error" << std::setw(10) << "checked"
            << std::setw(10) << "skipped" << "\n";
  for (const auto& r : run_gradcheck_suite(a.seed)) {
    const bool pass = r.max_rel_error <= a.tolerance && r.checked > 0;
    ok = ok && pass;
    std::cout << std::left << std::setw(18) << r.name << std::setw(16) << std::scientific << std::setprecision(3)
              << r.max_rel_error << std::defaultfloat << std::setw(10) << r.checked << std::setw(10) << r.skipped
              << (pass ? "ok" : "FAIL") << "\n";
  }
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gdnv: Ghost-dil-NetVLAD place recognition"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = all cores)");

  SynthArgs synth;
  TrainArgs train;
  std::map<std::string, std::string> train_flags;
  ExtractArgs extract;
  IndexArgs index;
  QueryArgs query;
  EvalArgs eval;
  CostArgs cost;
  GradcheckArgs grad;
  add_synth(app, synth);
  add_train(app, train, train_flags);
  add_extract(app, extract);
  add_index(app, index);
  add_query(app, query);
  add_eval(app, eval);
  add_cost(app, cost);
  add_gradcheck(app, grad);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    set_num_threads(threads);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "synth") return run_synth(synth);
    if (cmd == "train") return run_train(train, train_flags, threads);
    if (cmd == "extract") return run_extract(extract);
    if (cmd == "index") return run_index(index);
    if (cmd == "query") return run_query(query);
    if (cmd == "eval") return run_eval(eval);
    if (cmd == "cost") return run_cost(cost);
    if (cmd == "gradcheck") return run_gradcheck(grad);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
