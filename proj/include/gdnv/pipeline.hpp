#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gdnv/model.hpp"
#include "gdnv/retrieval.hpp"
#include "gdnv/training.hpp"

namespace gdnv {

struct RunConfig {
  std::filesystem::path manifest;
  std::size_t input_width = 128;
  std::size_t input_height = 96;
  std::string backbone = "default";  // or a path to a backbone JSON document
  std::string dilation = "5-2";
  double channel_multiplier = 0.25;
  std::size_t clusters = 8;
  std::size_t reduction = 0;  // PCA-whitening output dim, 0 = off
  TripletLossConfig loss;
  SgdConfig sgd;
  std::uint64_t seed = 7;
  std::size_t epochs = 30;
  std::filesystem::path out_dir;
  double tolerance_m = 25.0;
  std::vector<std::size_t> recall_ns = default_recall_ns();
  std::size_t threads = 0;
};

/// Throws std::invalid_argument on an unknown key or a malformed value.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
/// "key = value" lines; '#' starts a comment.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
std::string format_run_config(const RunConfig& cfg);

GhostCNNConfig backbone_config(const RunConfig& cfg);

/// Records plus a way to get each record's pixels.
struct Dataset {
  std::vector<ImageRecord> records;
  std::function<RgbImage(const ImageRecord&)> image;
};

/// Image paths resolve against the manifest's directory.
Dataset dataset_from_manifest(const std::filesystem::path& manifest);
Dataset dataset_from_synth(SynthDataset data);

/// Records tagged "train" when any exist, otherwise the db records; queries are never trained on.
std::vector<ImageRecord> training_records(const std::vector<ImageRecord>& records);

/// He-initialized model for the config (sub-seed "init").
PlaceModel<float> make_model(const RunConfig& cfg);

/// Descriptors (whitened when the model carries PCA) for a batch of images, one row each.
std::vector<std::vector<float>> describe(PlaceModel<float>& model, std::span<const Tensor<float>> images,
                                         std::size_t batch = 16);

DescriptorIndex index_split(PlaceModel<float>& model, const Dataset& data, const RunConfig& cfg,
                            const std::string& split = "db");
RecallTable evaluate(PlaceModel<float>& model, const DescriptorIndex& index, const Dataset& data,
                     const RunConfig& cfg);
RecallTable evaluate(PlaceModel<float>& model, const Dataset& data, const RunConfig& cfg);

/// Model weights plus the run's input size.
Container model_checkpoint(PlaceModel<float>& model, const RunConfig& cfg);
/// Loads a model and returns the stored input size in cfg.
PlaceModel<float> model_from_checkpoint(const Container& c, RunConfig& cfg);

struct TrainHooks {
  std::function<void(const BatchLog&)> on_batch;
  std::function<void(const EpochStats&, const std::optional<RecallTable>&)> on_epoch;
  bool eval_each_epoch = false;
};

struct TrainReport {
  RecallTable baseline;  // after initialization, before any step
  RecallTable final;
  std::vector<EpochStats> epochs;
  std::vector<RecallTable> epoch_recall;  // filled when eval_each_epoch
};

/// Initializes the VLAD head, measures the untrained baseline, trains, optionally fits PCA-whitening,
/// and evaluates. Writes epoch checkpoints and model.gdnv when cfg.out_dir is set.
TrainReport run_training(const RunConfig& cfg, const Dataset& data, PlaceModel<float>& model,
                         const TrainHooks& hooks = {});

}  // namespace gdnv
