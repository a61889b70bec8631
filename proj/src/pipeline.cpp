#include "gdnv/pipeline.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace gdnv {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument("config: '" + key + "' expects an unsigned 64-bit integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "manifest") {
    cfg.manifest = v;
  } else if (key == "input") {
    const auto x = v.find('x');
    if (x == std::string::npos) throw std::invalid_argument("config: 'input' expects WxH, got '" + v + "'");
    cfg.input_width = to_size(key, v.substr(0, x));
    cfg.input_height = to_size(key, v.substr(x + 1));
  } else if (key == "input_width") {
    cfg.input_width = to_size(key, v);
  } else if (key == "input_height") {
    cfg.input_height = to_size(key, v);
  } else if (key == "backbone") {
    cfg.backbone = v;
  } else if (key == "dilation") {
    DilationScheme::parse(v);
    cfg.dilation = v;
  } else if (key == "channel_multiplier") {
    cfg.channel_multiplier = to_double(key, v);
  } else if (key == "clusters") {
    cfg.clusters = to_size(key, v);
  } else if (key == "reduction") {
    cfg.reduction = to_size(key, v);
  } else if (key == "margin") {
    cfg.loss.margin = to_double(key, v);
  } else if (key == "negatives_per_tuple") {
    cfg.loss.negatives_per_tuple = to_size(key, v);
  } else if (key == "negative_pool") {
    cfg.loss.negative_pool = to_size(key, v);
  } else if (key == "positive_radius_m") {
    cfg.loss.positive_radius_m = to_double(key, v);
  } else if (key == "negative_radius_m") {
    cfg.loss.negative_radius_m = to_double(key, v);
  } else if (key == "learning_rate") {
    cfg.sgd.learning_rate = to_double(key, v);
  } else if (key == "momentum") {
    cfg.sgd.momentum = to_double(key, v);
  } else if (key == "weight_decay") {
    cfg.sgd.weight_decay = to_double(key, v);
  } else if (key == "batch_size") {
    cfg.sgd.batch_size = to_size(key, v);
  } else if (key == "seed") {
    cfg.seed = to_u64(key, v);
  } else if (key == "epochs") {
    cfg.epochs = to_size(key, v);
  } else if (key == "out_dir") {
    cfg.out_dir = v;
  } else if (key == "tolerance_m") {
    cfg.tolerance_m = to_double(key, v);
  } else if (key == "recall_ns") {
    cfg.recall_ns.clear();
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) cfg.recall_ns.push_back(to_size(key, trim(item)));
    if (cfg.recall_ns.empty()) throw std::invalid_argument("config: 'recall_ns' is empty");
  } else if (key == "threads") {
    cfg.threads = to_size(key, v);
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  base.loss.validate();
  base.sgd.validate();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), std::move(base));
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream out;
  out << "manifest = " << c.manifest.string() << "\n";
  out << "input = " << c.input_width << "x" << c.input_height << "\n";
  out << "backbone = " << c.backbone << "\n";
  out << "dilation = " << c.dilation << "\n";
  out << "channel_multiplier = " << fmt_double(c.channel_multiplier) << "\n";
  out << "clusters = " << c.clusters << "\n";
  out << "reduction = " << c.reduction << "\n";
  out << "margin = " << fmt_double(c.loss.margin) << "\n";
  out << "negatives_per_tuple = " << c.loss.negatives_per_tuple << "\n";
  out << "negative_pool = " << c.loss.negative_pool << "\n";
  out << "positive_radius_m = " << fmt_double(c.loss.positive_radius_m) << "\n";
  out << "negative_radius_m = " << fmt_double(c.loss.negative_radius_m) << "\n";
  out << "learning_rate = " << fmt_double(c.sgd.learning_rate) << "\n";
  out << "momentum = " << fmt_double(c.sgd.momentum) << "\n";
  out << "weight_decay = " << fmt_double(c.sgd.weight_decay) << "\n";
  out << "batch_size = " << c.sgd.batch_size << "\n";
  out << "seed = " << c.seed << "\n";
  out << "epochs = " << c.epochs << "\n";
  out << "out_dir = " << c.out_dir.string() << "\n";
  out << "tolerance_m = " << fmt_double(c.tolerance_m) << "\n";
  out << "recall_ns = ";
  for (std::size_t i = 0; i < c.recall_ns.size(); ++i) out << (i ? "," : "") << c.recall_ns[i];
  out << "\n";
  out << "threads = " << c.threads << "\n";
  return out.str();
}

GhostCNNConfig backbone_config(const RunConfig& cfg) {
  if (cfg.backbone == "default") return default_ghostcnn_config(cfg.dilation, cfg.channel_multiplier);
  std::ifstream in(cfg.backbone);
  if (!in) throw DataError("cannot open backbone config " + cfg.backbone);
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

Dataset dataset_from_manifest(const std::filesystem::path& manifest) {
  Dataset d;
  d.records = read_manifest(manifest);
  const std::filesystem::path base = manifest.parent_path();
  d.image = [base](const ImageRecord& r) { return read_ppm(base / r.image); };
  return d;
}

Dataset dataset_from_synth(SynthDataset data) {
  Dataset d;
  auto shared = std::make_shared<SynthDataset>(std::move(data));
  auto index = std::make_shared<std::map<std::string, std::size_t>>();
  for (std::size_t i = 0; i < shared->records.size(); ++i) (*index)[shared->records[i].id] = i;
  d.records = shared->records;
  d.image = [shared, index](const ImageRecord& r) {
    auto it = index->find(r.id);
    if (it == index->end()) throw DataError("no synthetic image for '" + r.id + "'");
    return shared->images[it->second];
  };
  return d;
}

std::vector<ImageRecord> training_records(const std::vector<ImageRecord>& records) {
  auto train = filter_split(records, "train");
  if (!train.empty()) return train;
  return filter_split(records, "db");
}

PlaceModel<float> make_model(const RunConfig& cfg) {
  if (cfg.clusters == 0) throw std::invalid_argument("config: clusters must be > 0");
  PlaceModel<float> model(backbone_config(cfg), cfg.clusters);
  Rng rng(derive_seed(cfg.seed, "init"));
  model.init(rng);
  return model;
}

std::vector<std::vector<float>> describe(PlaceModel<float>& model, std::span<const Tensor<float>> images,
                                         std::size_t batch) {
  std::vector<std::vector<float>> out;
  const std::vector<float> flat = extract_descriptors(model, images, batch);
  const std::size_t dim = model.vlad.output_dim();
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<float> row(flat.begin() + static_cast<std::ptrdiff_t>(i * dim),
                           flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
    if (model.pca) row = model.pca->apply(std::span<const float>(row));
    out.push_back(std::move(row));
  }
  return out;
}

namespace {

std::vector<Tensor<float>> load_tensors(const Dataset& data, std::span<const ImageRecord> records,
                                        const RunConfig& cfg) {
  std::vector<Tensor<float>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(image_to_tensor(data.image(r), cfg.input_width, cfg.input_height));
  return out;
}

}  // namespace

DescriptorIndex index_split(PlaceModel<float>& model, const Dataset& data, const RunConfig& cfg,
                            const std::string& split) {
  const auto db = filter_split(data.records, split);
  if (db.empty()) throw DataError("index: no '" + split + "' records");
  const auto rows = describe(model, load_tensors(data, db, cfg));
  DescriptorIndex idx;
  for (std::size_t i = 0; i < db.size(); ++i) idx.add(db[i].id, rows[i]);
  return idx;
}

RecallTable evaluate(PlaceModel<float>& model, const DescriptorIndex& index, const Dataset& data,
                     const RunConfig& cfg) {
  const auto queries = filter_split(data.records, "query");
  if (queries.empty()) throw DataError("eval: no query records");
  std::map<std::string, Position> positions;
  for (const auto& r : data.records) positions[r.id] = r.position;
  const auto rows = describe(model, load_tensors(data, queries, cfg));
  std::vector<QueryDescriptor> qs;
  for (std::size_t i = 0; i < queries.size(); ++i) qs.push_back({rows[i], queries[i].position});
  return recall_at_n(qs, index, positions, cfg.tolerance_m, cfg.recall_ns);
}

RecallTable evaluate(PlaceModel<float>& model, const Dataset& data, const RunConfig& cfg) {
  return evaluate(model, index_split(model, data, cfg), data, cfg);
}

Container model_checkpoint(PlaceModel<float>& model, const RunConfig& cfg) {
  Container c = model.to_container();
  c.put_text("config.input", std::to_string(cfg.input_width) + "x" + std::to_string(cfg.input_height));
  return c;
}

PlaceModel<float> model_from_checkpoint(const Container& c, RunConfig& cfg) {
  if (c.contains("config.input")) set_config_value(cfg, "input", c.text("config.input"));
  return PlaceModel<float>::from_container(c);
}

TrainReport run_training(const RunConfig& cfg, const Dataset& data, PlaceModel<float>& model,
                         const TrainHooks& hooks) {
  if (cfg.threads) set_num_threads(cfg.threads);
  const auto train_recs = training_records(data.records);
  if (train_recs.empty()) throw DataError("train: no 'train' or 'db' records in the manifest");
  const TrainingSet train = load_training_set(train_recs, [&](const ImageRecord& r) {
    return image_to_tensor(data.image(r), cfg.input_width, cfg.input_height);
  });

  initialize_model(model, train.images, cfg.seed);

  TrainReport report;
  report.baseline = evaluate(model, data, cfg);

  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  Trainer trainer(model, train, cfg.loss, cfg.sgd, cfg.seed);
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    EpochStats stats = trainer.train_epoch(e, hooks.on_batch);
    report.epochs.push_back(stats);
    std::optional<RecallTable> recall;
    if (hooks.eval_each_epoch) {
      recall = evaluate(model, data, cfg);
      report.epoch_recall.push_back(*recall);
    }
    if (!cfg.out_dir.empty()) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << e << ".gdnv";
      model_checkpoint(model, cfg).save(cfg.out_dir / name.str());
    }
    if (hooks.on_epoch) hooks.on_epoch(stats, recall);
  }

  if (cfg.reduction > 0) {
    const std::vector<float> flat = extract_descriptors(model, train.images);
    const std::vector<double> rows(flat.begin(), flat.end());
    model.pca = fit_pca_whitening(rows, train.images.size(), model.vlad.output_dim(), cfg.reduction);
  }
  report.final = evaluate(model, data, cfg);
  if (!cfg.out_dir.empty()) model_checkpoint(model, cfg).save(cfg.out_dir / "model.gdnv");
  return report;
}

}  // namespace gdnv
