#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/dat.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/kmeans.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/oracle.hpp"
#include "sfuda/refine.hpp"
#include "sfuda/train.hpp"

namespace sfuda {

// fraction of argmax-correct predictions, in percent
inline double evaluate(const Model& model, const LabeledDataset& test) {
  test.validate();
  if (test.images.n == 0) throw InvalidInputError("evaluate: empty test set");
  const auto pred = model.predict(test.images);
  int correct = 0;
  for (int i = 0; i < test.images.n; ++i)
    if (pred[static_cast<size_t>(i)] == test.labels[static_cast<size_t>(i)]) ++correct;
  return 100.0 * correct / test.images.n;
}

struct StageToggles {
  bool init_another = true;
  bool dat_retrain = true;
  bool target_finetune = true;

  void validate() const {
    if ((dat_retrain || target_finetune) && !init_another)
      throw ConfigError("dat_retrain/target_finetune require init_another");
  }
};

// Stage learning schedules calibrated for the desk-scale CNN: momentum SGD,
// strong steps for the from-scratch stages, gentler ones for the stages that
// adjust an already-trained model.
struct PipelineConfig {
  StageToggles stages;
  TrainConfig source_train{0.05f, 64, 20, Seed{0}, 0.9f};
  TrainConfig init_train{0.05f, 64, 30, Seed{0}, 0.9f};
  TrainConfig finetune{0.02f, 64, 16, Seed{0}, 0.9f};
  TrainConfig retrain{0.02f, 64, 6, Seed{0}, 0.9f};
  DatConfig dat;
  int feature_dim = 128;
  int oracle_batch = 256;
  int refine_iterations = 1;

  void validate() const {
    stages.validate();
    source_train.validate();
    init_train.validate();
    finetune.validate();
    retrain.validate();
    dat.validate();
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (oracle_batch < 1) throw ConfigError("oracle_batch must be >= 1");
    if (refine_iterations < 1) throw ConfigError("refine_iterations must be >= 1");
  }
};

namespace detail {

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig base) {
  for (const auto& [key, _] : j.items())
    if (key != "learning_rate" && key != "batch_size" && key != "epochs" &&
        key != "momentum" && key != "weight_decay")
      throw ConfigError("unknown training config key: " + key);
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.epochs = j.value("epochs", base.epochs);
  base.momentum = j.value("momentum", base.momentum);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  return base;
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}};
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"stages",
        {{"init_another", c.stages.init_another},
         {"dat_retrain", c.stages.dat_retrain},
         {"target_finetune", c.stages.target_finetune}}},
       {"source_train", detail::train_to_json(c.source_train)},
       {"init_train", detail::train_to_json(c.init_train)},
       {"finetune", detail::train_to_json(c.finetune)},
       {"retrain", detail::train_to_json(c.retrain)},
       {"dat",
        {{"iterations", c.dat.iterations},
         {"step_size", c.dat.step_size},
         {"batch_size", c.dat.batch_size},
         {"backtrack_max", c.dat.backtrack_max}}},
       {"feature_dim", c.feature_dim},
       {"oracle_batch", c.oracle_batch},
       {"refine_iterations", c.refine_iterations}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  static const std::vector<std::string> known = {
      "stages",  "source_train", "init_train",   "finetune",
      "retrain", "dat",          "feature_dim",  "oracle_batch",
      "refine_iterations"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown pipeline config key: " + key);
  if (j.contains("stages")) {
    const auto& s = j.at("stages");
    c.stages.init_another = s.value("init_another", c.stages.init_another);
    c.stages.dat_retrain = s.value("dat_retrain", c.stages.dat_retrain);
    c.stages.target_finetune = s.value("target_finetune", c.stages.target_finetune);
  }
  if (j.contains("source_train"))
    c.source_train = detail::train_from_json(j.at("source_train"), c.source_train);
  if (j.contains("init_train"))
    c.init_train = detail::train_from_json(j.at("init_train"), c.init_train);
  if (j.contains("finetune"))
    c.finetune = detail::train_from_json(j.at("finetune"), c.finetune);
  if (j.contains("retrain"))
    c.retrain = detail::train_from_json(j.at("retrain"), c.retrain);
  if (j.contains("dat")) {
    const auto& d = j.at("dat");
    c.dat.iterations = d.value("iterations", c.dat.iterations);
    c.dat.step_size = d.value("step_size", c.dat.step_size);
    c.dat.batch_size = d.value("batch_size", c.dat.batch_size);
    c.dat.backtrack_max = d.value("backtrack_max", c.dat.backtrack_max);
  }
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.oracle_batch = j.value("oracle_batch", c.oracle_batch);
  c.refine_iterations = j.value("refine_iterations", c.refine_iterations);
}

struct StageRecord {
  std::string name;
  double accuracy = -1.0;  // target-test accuracy after the stage, if evaluated
  std::vector<double> loss_curve;
  double seconds = 0.0;
  int sessions = 0;
  long queries = 0;
};

struct RunReport {
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<StageRecord> stages;
  std::map<std::string, double> accuracies;
  int oracle_sessions = 0;
  long oracle_queries = 0;
  double wall_clock_s = 0.0;
  nlohmann::json mia;  // filled by the attack harness

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) {
      nlohmann::json j = {{"name", s.name},
                          {"seconds", s.seconds},
                          {"sessions", s.sessions},
                          {"queries", s.queries}};
      if (s.accuracy >= 0.0) j["accuracy"] = s.accuracy;
      st.push_back(std::move(j));
    }
    nlohmann::json out = {{"seed", seed},
                          {"config", config},
                          {"stages", st},
                          {"accuracies", accuracies},
                          {"oracle_sessions", oracle_sessions},
                          {"oracle_queries", oracle_queries},
                          {"wall_clock_s", wall_clock_s}};
    if (!mia.is_null()) out["mia"] = mia;
    return out;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const std::string text = to_json().dump(2);
    detail::write_file(dir / "report.json", text.data(), text.size());
    for (const auto& s : stages) {
      if (s.loss_curve.empty()) continue;
      std::ofstream csv(dir / ("loss_" + s.name + ".csv"));
      csv << "epoch,loss\n";
      for (size_t e = 0; e < s.loss_curve.size(); ++e)
        csv << e + 1 << "," << s.loss_curve[e] << "\n";
    }
  }
};

namespace detail {

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// Algorithm stage: query the full third-party set in one session, then train
// a fresh target model against the returned hard labels.
inline Model stage_init_another(OracleApi& oracle,
                                const UnlabeledDataset& third_party,
                                int num_classes, Shape3 input,
                                const TrainConfig& cfg, int feature_dim = 128,
                                int oracle_batch = 256,
                                StageRecord* record = nullptr) {
  const auto labels = oracle.query_dataset(third_party, oracle_batch);
  Model model = build_small_cnn(input, num_classes, cfg.seed, feature_dim);
  LabeledDataset train;
  train.images = third_party.images;
  train.labels.assign(labels.begin(), labels.end());
  train.num_classes = num_classes;
  const TrainStats stats = train_supervised(model, train, cfg);
  if (record) {
    record->loss_curve = stats.epoch_losses;
    record->sessions = 1;
    record->queries = third_party.images.n;
  }
  return model;
}

// Self-supervised fine-tuning: pseudo-labels are recomputed every epoch from
// the current model, then one epoch of cross-entropy runs against them.
inline TrainStats stage_target_finetune(Model& model,
                                        const UnlabeledDataset& target,
                                        const TrainConfig& cfg,
                                        int refine_iterations = 1) {
  TrainStats all;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto pseudo = pseudo_label_target(model, target, refine_iterations);
    bool degenerate = true;
    for (const int y : pseudo)
      if (y != pseudo[0]) {
        degenerate = false;
        break;
      }
    if (degenerate)
      std::cerr << "warning: pseudo-labels collapsed to a single class; "
                   "continuing\n";
    LabeledDataset d;
    d.images = target.images;
    d.labels.assign(pseudo.begin(), pseudo.end());
    d.num_classes = model.num_classes();
    TrainConfig one = cfg;
    one.epochs = 1;
    one.seed = cfg.seed.child(0xF1 + static_cast<std::uint64_t>(epoch));
    const TrainStats s = train_supervised(model, d, one);
    all.epoch_losses.insert(all.epoch_losses.end(), s.epoch_losses.begin(),
                            s.epoch_losses.end());
  }
  return all;
}

// DAT retrain: perturb the third-party set toward the target features, open
// a fresh session on the perturbed set, retrain on the returned labels, then
// fine-tune on target data once more.
inline void stage_dat_retrain(Model& model, OracleApi& oracle,
                              const UnlabeledDataset& target,
                              const UnlabeledDataset& third_party,
                              const DatConfig& dat_cfg,
                              const TrainConfig& retrain_cfg,
                              const TrainConfig& finetune_cfg,
                              int refine_iterations = 1,
                              int oracle_batch = 256,
                              StageRecord* record = nullptr,
                              DatResult* dat_out = nullptr) {
  DatResult dat = dat_generate(model, target, third_party, dat_cfg);
  const auto labels = oracle.query_dataset(dat.adversarial, oracle_batch);
  LabeledDataset train;
  train.images = dat.adversarial.images;
  train.labels.assign(labels.begin(), labels.end());
  train.num_classes = model.num_classes();
  const TrainStats stats = train_supervised(model, train, retrain_cfg);
  if (record) {
    record->loss_curve = stats.epoch_losses;
    record->sessions = 1;
    record->queries = dat.adversarial.images.n;
  }
  if (dat_out) *dat_out = std::move(dat);
  stage_target_finetune(model, target, finetune_cfg, refine_iterations);
}

struct PipelineData {
  UnlabeledDataset target;      // adaptation split, labels withheld
  LabeledDataset target_test;   // evaluation split
  UnlabeledDataset third_party;
  Shape3 input;
  int num_classes = 0;
};

struct PipelineOutcome {
  Model model;
  RunReport report;
};

// Full run: init from third-party queries, optional target fine-tune,
// optional DAT retrain (with its closing fine-tune). Stage toggles map to
// the supervision ablations: init only, init+DAT, or everything.
inline PipelineOutcome run_pipeline(OracleApi& oracle, const PipelineData& data,
                                    const PipelineConfig& cfg, Seed seed,
                                    const std::filesystem::path& out_dir = {},
                                    double source_only_accuracy = -1.0) {
  cfg.validate();
  if (!cfg.stages.init_another)
    throw ConfigError("pipeline requires the init_another stage");

  const detail::StageTimer total;
  RunReport report;
  report.seed = seed.value;
  report.config = cfg;
  if (source_only_accuracy >= 0.0)
    report.accuracies["source_only"] = source_only_accuracy;

  PipelineOutcome out;
  int stage_no = 0;
  const auto checkpoint = [&](const Model& m) {
    ++stage_no;
    if (!out_dir.empty())
      save_checkpoint(m, out_dir, "stage" + std::to_string(stage_no));
  };

  {
    detail::StageTimer t;
    StageRecord rec;
    rec.name = "init_another";
    TrainConfig init_cfg = cfg.init_train;
    init_cfg.seed = seed.child(1);
    out.model = stage_init_another(oracle, data.third_party, data.num_classes,
                                   data.input, init_cfg, cfg.feature_dim,
                                   cfg.oracle_batch, &rec);
    rec.accuracy = evaluate(out.model, data.target_test);
    rec.seconds = t.seconds();
    report.accuracies["init_another"] = rec.accuracy;
    report.stages.push_back(std::move(rec));
    checkpoint(out.model);
  }

  if (cfg.stages.target_finetune) {
    detail::StageTimer t;
    StageRecord rec;
    rec.name = "target_finetune";
    TrainConfig ft = cfg.finetune;
    ft.seed = seed.child(2);
    rec.loss_curve =
        stage_target_finetune(out.model, data.target, ft, cfg.refine_iterations)
            .epoch_losses;
    rec.accuracy = evaluate(out.model, data.target_test);
    rec.seconds = t.seconds();
    report.accuracies["target_finetune"] = rec.accuracy;
    report.stages.push_back(std::move(rec));
    checkpoint(out.model);
  }

  if (cfg.stages.dat_retrain) {
    detail::StageTimer t;
    StageRecord rec;
    rec.name = "dat_retrain";
    DatConfig dat_cfg = cfg.dat;
    dat_cfg.pairing_seed = seed.child(3);
    TrainConfig rt = cfg.retrain;
    rt.seed = seed.child(4);
    TrainConfig ft = cfg.finetune;
    ft.seed = seed.child(5);
    if (!cfg.stages.target_finetune) ft.epochs = 0;  // ablation: no L_target
    stage_dat_retrain(out.model, oracle, data.target, data.third_party, dat_cfg,
                      rt, ft, cfg.refine_iterations, cfg.oracle_batch, &rec);
    rec.accuracy = evaluate(out.model, data.target_test);
    rec.seconds = t.seconds();
    report.accuracies["dat_retrain"] = rec.accuracy;
    report.stages.push_back(std::move(rec));
    checkpoint(out.model);
  }

  report.accuracies["final"] = evaluate(out.model, data.target_test);
  report.oracle_sessions = oracle.sessions_used();
  report.oracle_queries = oracle.samples_queried();
  report.wall_clock_s = total.seconds();
  if (!out_dir.empty()) report.save(out_dir);
  out.report = std::move(report);
  return out;
}

// Centroid strategy: K-means on raw flattened target images, query the K
// centroid images (synthetic aggregates, so they pass the digest guard),
// and train on those K labeled points.
inline Model baseline_cp(OracleApi& oracle, const ImageTensor& target_images,
                         int num_classes, Shape3 input, const TrainConfig& cfg,
                         Seed seed, int feature_dim = 128,
                         StageRecord* record = nullptr) {
  if (num_classes < 2) throw ConfigError("baseline_cp: need K >= 2");
  Matrix flat(target_images.n, static_cast<int>(target_images.sample_size()));
  std::copy(target_images.data.begin(), target_images.data.end(),
            flat.data.begin());
  const KMeansResult km = kmeans(flat, num_classes, seed.child(0xC9));

  ImageTensor centroids(num_classes, input.w, input.h, input.c);
  std::copy(km.centroids.data.begin(), km.centroids.data.end(),
            centroids.data.begin());
  centroids.clip01();  // means of in-range data stay in range; belt for fp
  const UnlabeledDataset query = UnlabeledDataset::from_images(centroids);
  const auto labels = oracle.query_dataset(query, num_classes);

  Model model = build_small_cnn(input, num_classes, seed, feature_dim);
  LabeledDataset train;
  train.images = query.images;
  train.labels.assign(labels.begin(), labels.end());
  train.num_classes = num_classes;
  const TrainStats stats = train_supervised(model, train, cfg);
  if (record) {
    record->name = "baseline_cp";
    record->loss_curve = stats.epoch_losses;
    record->sessions = 1;
    record->queries = num_classes;
  }
  return model;
}

// Gaussian-noise strategy: n standard-normal images, clipped into the legal
// pixel range, queried and trained on.
inline Model baseline_gnp(OracleApi& oracle, int num_classes, int n,
                          Shape3 input, Seed seed, const TrainConfig& cfg,
                          int feature_dim = 128, int oracle_batch = 256,
                          StageRecord* record = nullptr) {
  if (n < 1) throw ConfigError("baseline_gnp: need at least 1 noise sample");
  ImageTensor noise(n, input.w, input.h, input.c);
  Rng rng(seed.child(0x6A));
  for (float& v : noise.data) v = static_cast<float>(rng.normal());
  noise.clip01();
  const UnlabeledDataset query = UnlabeledDataset::from_images(noise);
  const auto labels = oracle.query_dataset(query, oracle_batch);

  Model model = build_small_cnn(input, num_classes, seed, feature_dim);
  LabeledDataset train;
  train.images = query.images;
  train.labels.assign(labels.begin(), labels.end());
  train.num_classes = num_classes;
  const TrainStats stats = train_supervised(model, train, cfg);
  if (record) {
    record->name = "baseline_gnp";
    record->loss_curve = stats.epoch_losses;
    record->sessions = 1;
    record->queries = n;
  }
  return model;
}

// Train one source model per source domain.
inline std::vector<Model> train_source_models(
    const std::vector<LabeledDataset>& sources, Shape3 input,
    const TrainConfig& cfg, Seed seed, int feature_dim = 128,
    std::vector<TrainStats>* stats_out = nullptr) {
  std::vector<Model> models;
  for (size_t i = 0; i < sources.size(); ++i) {
    Model m = build_small_cnn(input, sources[i].num_classes,
                              seed.child(0x50 + static_cast<std::uint64_t>(i)),
                              feature_dim);
    TrainConfig c = cfg;
    c.seed = seed.child(0x60 + static_cast<std::uint64_t>(i));
    const TrainStats st = train_supervised(m, sources[i], c);
    if (stats_out) stats_out->push_back(st);
    models.push_back(std::move(m));
  }
  return models;
}

}  // namespace sfuda
