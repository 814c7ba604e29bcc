// Command-line front end: data generation, source training, the oracle
// service, the adaptation pipeline, baselines, and the membership-inference
// harness. Every run writes its resolved configuration next to its outputs.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sfuda/sfuda.hpp"

namespace fs = std::filesystem;
using namespace sfuda;

namespace {

struct FileConfig {
  SyntheticConfig synthetic;
  PipelineConfig pipeline;
  int gnp_samples = 1000;
  nlohmann::json raw;
};

FileConfig load_config(const std::string& path) {
  FileConfig cfg;
  if (path.empty()) {
    cfg.raw = nlohmann::json::object();
    return cfg;
  }
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config json: " + std::string(e.what()));
  }
  for (const auto& [key, _] : j.items())
    if (key != "synthetic" && key != "pipeline" && key != "gnp_samples")
      throw ConfigError("unknown config key: " + key);
  if (j.contains("synthetic")) cfg.synthetic = j.at("synthetic").get<SyntheticConfig>();
  if (j.contains("pipeline")) cfg.pipeline = j.at("pipeline").get<PipelineConfig>();
  cfg.gnp_samples = j.value("gnp_samples", cfg.gnp_samples);
  cfg.raw = j;
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

void record_resolved_config(const fs::path& out, const std::string& command,
                            std::uint64_t seed, const FileConfig& cfg,
                            const nlohmann::json& extra = {}) {
  nlohmann::json j = {{"command", command},
                      {"seed", seed},
                      {"synthetic", cfg.synthetic},
                      {"pipeline", cfg.pipeline}};
  if (!extra.is_null()) j["flags"] = extra;
  write_json(out / "config_resolved.json", j);
}

struct SuiteOnDisk {
  std::vector<LabeledDataset> sources;
  LabeledDataset target;
  UnlabeledDataset third_party;
  Shape3 input;
  int num_classes = 0;
};

SuiteOnDisk load_suite(const fs::path& dir) {
  SuiteOnDisk s;
  for (int i = 0;; ++i) {
    const fs::path p = dir / ("source" + std::to_string(i));
    if (!fs::exists(p / "meta.json")) break;
    s.sources.push_back(load_labeled(p));
  }
  if (s.sources.empty())
    throw ConfigError("no source datasets under " + dir.string());
  s.target = load_labeled(dir / "target");
  s.third_party = load_unlabeled(dir / "third_party");
  s.input = {s.target.images.w, s.target.images.h, s.target.images.c};
  s.num_classes = s.target.num_classes;
  return s;
}

std::vector<Model> load_or_train_sources(const SuiteOnDisk& suite,
                                         const std::string& models_dir,
                                         const PipelineConfig& pc, Seed seed) {
  if (!models_dir.empty()) {
    std::vector<Model> models;
    for (size_t i = 0; i < suite.sources.size(); ++i)
      models.push_back(load_checkpoint(models_dir, "source" + std::to_string(i)));
    return models;
  }
  TrainConfig tc = pc.source_train;
  return train_source_models(suite.sources, suite.input, tc, seed.child(0x5EED),
                             pc.feature_dim);
}

SourceEnsemble build_ensemble(const SuiteOnDisk& suite,
                              std::vector<Model> models) {
  SourceEnsemble ens(std::move(models), suite.num_classes);
  for (const auto& s : suite.sources) ens.register_forbidden(s);
  ens.register_forbidden(suite.target.images);
  return ens;
}

int cmd_gen_data(std::uint64_t seed, const std::string& out,
                 const std::string& config_path) {
  const FileConfig cfg = load_config(config_path);
  const auto suite = make_synthetic_shift_suite(Seed{seed}, cfg.synthetic);
  const fs::path dir(out);
  for (size_t i = 0; i < suite.sources.size(); ++i)
    save_dataset(dir / ("source" + std::to_string(i)), suite.sources[i]);
  save_dataset(dir / "target", suite.target);
  save_dataset(dir / "third_party", suite.third_party);
  write_json(dir / "suite.json",
             {{"seed", seed}, {"synthetic", cfg.synthetic}});
  std::cout << "wrote " << suite.sources.size() << " sources, target, third_party to "
            << dir << "\n";
  return 0;
}

int cmd_train_source(const std::string& data, const std::string& out,
                     std::uint64_t seed, const std::string& config_path) {
  const FileConfig cfg = load_config(config_path);
  const SuiteOnDisk suite = load_suite(data);
  std::vector<TrainStats> stats;
  const auto models = train_source_models(suite.sources, suite.input,
                                          cfg.pipeline.source_train,
                                          Seed{seed}.child(0x5EED),
                                          cfg.pipeline.feature_dim, &stats);
  const fs::path dir(out);
  for (size_t i = 0; i < models.size(); ++i) {
    save_checkpoint(models[i], dir, "source" + std::to_string(i));
    std::cout << "source" << i << ": final training loss "
              << stats[i].final_loss() << "\n";
  }
  record_resolved_config(dir, "train-source", seed, cfg);
  return 0;
}

int cmd_serve_oracle(const std::string& data, const std::string& models_dir,
                     int port, std::uint64_t seed,
                     const std::string& config_path) {
  const FileConfig cfg = load_config(config_path);
  const SuiteOnDisk suite = load_suite(data);
  OracleService svc(build_ensemble(
      suite, load_or_train_sources(suite, models_dir, cfg.pipeline, Seed{seed})));
  OracleServer server(svc, port);
  std::cout << "oracle listening on port " << server.port() << std::endl;
  server.run();  // blocks until the process is stopped
  return 0;
}

int cmd_run_pipeline(const std::string& data, const std::string& out,
                     std::uint64_t seed, const std::string& config_path,
                     const std::string& oracle_ep, const std::string& ablation,
                     const std::string& models_dir) {
  FileConfig cfg = load_config(config_path);
  if (ablation == "another") {
    cfg.pipeline.stages.target_finetune = false;
    cfg.pipeline.stages.dat_retrain = false;
  } else if (ablation == "another+dat") {
    cfg.pipeline.stages.target_finetune = false;
    cfg.pipeline.stages.dat_retrain = true;
  } else if (ablation != "full") {
    throw ConfigError("unknown ablation: " + ablation);
  }

  const SuiteOnDisk suite = load_suite(data);
  auto [adapt, test] = split_labeled(suite.target, 0.5);
  PipelineData pd{strip_labels(adapt), std::move(test), suite.third_party,
                  suite.input, suite.num_classes};

  const OracleEndpoint ep = OracleEndpoint::parse(oracle_ep);
  std::unique_ptr<OracleService> local_svc;
  std::unique_ptr<OracleApi> oracle;
  double source_only = -1.0;
  if (ep.inproc) {
    local_svc = std::make_unique<OracleService>(build_ensemble(
        suite, load_or_train_sources(suite, models_dir, cfg.pipeline, Seed{seed})));
    source_only = local_svc->ensemble().source_only_accuracy(pd.target_test);
    oracle = std::make_unique<InProcOracle>(*local_svc);
  } else {
    oracle = std::make_unique<TcpOracle>(ep.host, ep.port);
    if (oracle->num_classes() != suite.num_classes)
      throw ConfigError("remote oracle num_classes mismatch");
  }

  const auto outcome =
      run_pipeline(*oracle, pd, cfg.pipeline, Seed{seed}, out, source_only);
  record_resolved_config(out, "run-pipeline", seed, cfg,
                         {{"oracle", oracle_ep}, {"ablation", ablation}});
  if (local_svc && !local_svc->log().clean())
    throw Error("audit failure: oracle answered a forbidden sample");

  std::cout << "accuracies:";
  for (const auto& [name, acc] : outcome.report.accuracies)
    std::cout << " " << name << "=" << acc;
  std::cout << "\nreport written to " << (fs::path(out) / "report.json") << "\n";
  return 0;
}

int cmd_run_baseline(const std::string& strategy, const std::string& data,
                     const std::string& out, std::uint64_t seed,
                     const std::string& config_path,
                     const std::string& models_dir) {
  const FileConfig cfg = load_config(config_path);
  const SuiteOnDisk suite = load_suite(data);
  auto [adapt, test] = split_labeled(suite.target, 0.5);

  OracleService svc(build_ensemble(
      suite, load_or_train_sources(suite, models_dir, cfg.pipeline, Seed{seed})));
  InProcOracle oracle(svc);

  RunReport report;
  report.seed = seed;
  report.config = cfg.pipeline;
  StageRecord rec;
  Model model = [&] {
    if (strategy == "cp") {
      TrainConfig tc = cfg.pipeline.init_train;
      tc.batch_size = std::min(tc.batch_size, suite.num_classes);
      tc.epochs = std::max(tc.epochs, 60);  // K points need many passes
      tc.seed = Seed{seed}.child(2);
      return baseline_cp(oracle, strip_labels(adapt).images, suite.num_classes,
                         suite.input, tc, Seed{seed}, cfg.pipeline.feature_dim,
                         &rec);
    }
    if (strategy == "gnp") {
      TrainConfig tc = cfg.pipeline.init_train;
      tc.seed = Seed{seed}.child(2);
      return baseline_gnp(oracle, suite.num_classes, cfg.gnp_samples,
                          suite.input, Seed{seed}, tc,
                          cfg.pipeline.feature_dim, cfg.pipeline.oracle_batch,
                          &rec);
    }
    throw ConfigError("unknown strategy: " + strategy);
  }();

  rec.accuracy = evaluate(model, test);
  report.accuracies["source_only"] = svc.ensemble().source_only_accuracy(test);
  report.accuracies[rec.name] = rec.accuracy;
  report.accuracies["final"] = rec.accuracy;
  report.oracle_sessions = oracle.sessions_used();
  report.oracle_queries = oracle.samples_queried();
  report.stages.push_back(rec);
  report.save(out);
  save_checkpoint(model, out, "baseline_" + strategy);
  record_resolved_config(out, "run-baseline", seed, cfg,
                         {{"strategy", strategy}});
  std::cout << strategy << " accuracy=" << rec.accuracy
            << " (source_only=" << report.accuracies["source_only"] << ")\n";
  return 0;
}

int cmd_attack(const std::string& data, const std::string& out,
               std::uint64_t seed, const std::string& config_path) {
  const FileConfig cfg = load_config(config_path);
  const SuiteOnDisk suite = load_suite(data);
  if (suite.sources.size() < 2)
    throw ConfigError("attack harness needs at least 2 source domains");
  const Seed s{seed};

  // small training pools + long schedules overfit the shadow and victim
  auto [a_train_full, a_held] = split_labeled(suite.sources[0], 0.5);
  auto [b_train_full, b_held] = split_labeled(suite.sources[1], 0.5);
  auto [a_train, a_rest] = split_labeled(a_train_full, 0.5);
  auto [b_train, b_rest] = split_labeled(b_train_full, 0.5);

  TrainConfig overfit{0.05f, 32, 100, s.child(1), 0.9f};
  Model shadow = build_small_cnn(suite.input, suite.num_classes, s.child(2),
                                 cfg.pipeline.feature_dim);
  train_supervised(shadow, a_train, overfit);
  Model victim_source = build_small_cnn(suite.input, suite.num_classes,
                                        s.child(3), cfg.pipeline.feature_dim);
  TrainConfig overfit_b = overfit;
  overfit_b.seed = s.child(4);
  train_supervised(victim_source, b_train, overfit_b);

  const AttackDataset atk_data = build_attack_dataset(shadow, a_train, a_held);
  TrainConfig atk_cfg{0.05f, 32, 60, s.child(5), 0.9f};
  const AttackTrainResult atk = train_attack_model(atk_data, atk_cfg);

  // the SFUDA-initialized model never saw any source sample; "members" for
  // judging are the source-domain training data whose privacy is at stake
  std::vector<Model> ens_models;
  ens_models.push_back(shadow);
  ens_models.push_back(victim_source);
  OracleService svc(build_ensemble(suite, std::move(ens_models)));
  InProcOracle oracle(svc);
  TrainConfig init_cfg = cfg.pipeline.init_train;
  init_cfg.seed = s.child(6);
  const Model init_model =
      stage_init_another(oracle, suite.third_party, suite.num_classes,
                         suite.input, init_cfg, cfg.pipeline.feature_dim,
                         cfg.pipeline.oracle_batch);

  const double acc_source = judge(atk.model, victim_source, b_train, b_held);
  const double acc_init = judge(atk.model, init_model, b_train, b_held);

  nlohmann::json mia = {{"attack_held_out_accuracy", atk.held_out_accuracy},
                        {"acc_judge", {{"source_model", acc_source},
                                       {"init_target_model", acc_init}}},
                        {"drop", acc_source - acc_init}};

  // append under the `mia` key of an existing report when present
  const fs::path report_path = fs::path(out) / "report.json";
  nlohmann::json report = nlohmann::json::object();
  if (fs::exists(report_path)) {
    std::ifstream f(report_path);
    report = nlohmann::json::parse(f);
  }
  report["mia"] = mia;
  write_json(report_path, report);
  record_resolved_config(out, "attack", seed, cfg);
  std::cout << "Acc_judge(source model)=" << acc_source
            << " Acc_judge(init target model)=" << acc_init
            << " drop=" << acc_source - acc_init << "\n";
  return 0;
}

int cmd_report(const std::string& out) {
  const fs::path path = fs::path(out) / "report.json";
  std::ifstream f(path);
  if (!f) throw IoError("no report at " + path.string());
  const nlohmann::json j = nlohmann::json::parse(f);
  std::cout << "run seed: " << j.value("seed", 0ull) << "\n";
  if (j.contains("accuracies")) {
    std::cout << "accuracies (%):\n";
    for (const auto& [name, acc] : j.at("accuracies").items())
      std::cout << "  " << name << ": " << acc.get<double>() << "\n";
  }
  if (j.contains("oracle_sessions"))
    std::cout << "oracle sessions: " << j.at("oracle_sessions")
              << ", samples queried: " << j.value("oracle_queries", 0L) << "\n";
  if (j.contains("wall_clock_s"))
    std::cout << "wall clock: " << j.at("wall_clock_s").get<double>() << " s\n";
  if (j.contains("mia")) {
    const auto& mia = j.at("mia");
    std::cout << "membership inference:\n"
              << "  Acc_judge source model: "
              << mia.at("acc_judge").at("source_model").get<double>() << "\n"
              << "  Acc_judge init target model: "
              << mia.at("acc_judge").at("init_target_model").get<double>() << "\n"
              << "  drop: " << mia.at("drop").get<double>() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-only source-free domain adaptation testbed"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out, data, config_path, models_dir;
  std::string oracle_ep = "inproc", ablation = "full", strategy;
  int port = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shift suite");
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--config", config_path, "config json");

  auto* train = app.add_subcommand("train-source", "train the source models");
  train->add_option("--data", data, "suite directory")->required();
  train->add_option("--out", out, "checkpoint directory")->required();
  train->add_option("--seed", seed, "training seed");
  train->add_option("--config", config_path, "config json");

  auto* serve = app.add_subcommand("serve-oracle", "serve the label oracle over tcp");
  serve->add_option("--data", data, "suite directory")->required();
  serve->add_option("--port", port, "listen port (0 = ephemeral)");
  serve->add_option("--models", models_dir, "pretrained source checkpoints");
  serve->add_option("--seed", seed, "training seed when models are not given");
  serve->add_option("--config", config_path, "config json");

  auto* run = app.add_subcommand("run-pipeline", "run the adaptation pipeline");
  run->add_option("--data", data, "suite directory")->required();
  run->add_option("--out", out, "output directory")->required();
  run->add_option("--seed", seed, "run seed");
  run->add_option("--config", config_path, "config json");
  run->add_option("--oracle", oracle_ep, "inproc or tcp://host:port");
  run->add_option("--ablation", ablation, "another | another+dat | full");
  run->add_option("--models", models_dir, "pretrained source checkpoints");

  auto* base = app.add_subcommand("run-baseline", "run the cp or gnp strategy");
  base->add_option("--strategy", strategy, "cp | gnp")->required();
  base->add_option("--data", data, "suite directory")->required();
  base->add_option("--out", out, "output directory")->required();
  base->add_option("--seed", seed, "run seed");
  base->add_option("--config", config_path, "config json");
  base->add_option("--models", models_dir, "pretrained source checkpoints");

  auto* attack = app.add_subcommand("attack", "membership-inference harness");
  attack->add_option("--data", data, "suite directory")->required();
  attack->add_option("--out", out, "output directory")->required();
  attack->add_option("--seed", seed, "run seed");
  attack->add_option("--config", config_path, "config json");

  auto* rep = app.add_subcommand("report", "pretty-print a run report");
  rep->add_option("--out", out, "run output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // config/usage errors exit 2
  }

  try {
    if (gen->parsed()) return cmd_gen_data(seed, out, config_path);
    if (train->parsed()) return cmd_train_source(data, out, seed, config_path);
    if (serve->parsed())
      return cmd_serve_oracle(data, models_dir, port, seed, config_path);
    if (run->parsed())
      return cmd_run_pipeline(data, out, seed, config_path, oracle_ep, ablation,
                              models_dir);
    if (base->parsed())
      return cmd_run_baseline(strategy, data, out, seed, config_path, models_dir);
    if (attack->parsed()) return cmd_attack(data, out, seed, config_path);
    if (rep->parsed()) return cmd_report(out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
