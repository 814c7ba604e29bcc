// Acceptance suite: eight gate criteria, each printed as one PASS/FAIL line
// with its measured margin and runtime. Run with no arguments for all
// criteria or with a list of criterion numbers.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "../reference_oracles.hpp"
#include "sfuda/sfuda.hpp"

using namespace sfuda;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " FAILED{" << what << "}";
    }
  }
};

double now_s() {
  using clk = std::chrono::steady_clock;
  static const clk::time_point t0 = clk::now();
  return std::chrono::duration<double>(clk::now() - t0).count();
}

// ---------------------------------------------------------------------------
// C1: DEPICT refinement equals scalar brute force on 100 random matrices

Check criterion_1() {
  Check c;
  Rng shapes(0xC1);
  double max_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = shapes.uniform_int(1, 50);
    const int k = shapes.uniform_int(2, 10);
    Rng entries(0xC100 + static_cast<std::uint64_t>(trial));
    Matrix p(n, k);
    refimpl::Rows rows(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(k)));
    for (int j = 0; j < n; ++j) {
      double sum = 0.0;
      std::vector<double> raw(static_cast<size_t>(k));
      for (int d = 0; d < k; ++d) {
        raw[static_cast<size_t>(d)] = -std::log(1.0 - entries.uniform());
        sum += raw[static_cast<size_t>(d)];
      }
      for (int d = 0; d < k; ++d) {
        p.at(j, d) = static_cast<float>(raw[static_cast<size_t>(d)] / sum);
        rows[static_cast<size_t>(j)][static_cast<size_t>(d)] = p.at(j, d);
      }
    }
    const Matrix got = depict_refine(p);
    const refimpl::Rows want = refimpl::depict(rows);
    for (int j = 0; j < n; ++j)
      for (int d = 0; d < k; ++d)
        max_err = std::max(max_err,
                           std::abs(static_cast<double>(got.at(j, d)) -
                                    want[static_cast<size_t>(j)][static_cast<size_t>(d)]));
  }
  c.require(max_err < 1e-6, "max abs err >= 1e-6");
  c.detail << " max_abs_err=" << max_err;
  return c;
}

// ---------------------------------------------------------------------------
// C2: gradients match central finite differences (h = 1e-3)

Check criterion_2() {
  Check c;
  const Model m = build_small_cnn({12, 12, 1}, 6, Seed{0xC2});

  // feature-KL gradient w.r.t. inputs
  {
    Rng rng(0xC21);
    ImageTensor x_ref(4, 12, 12, 1), x(4, 12, 12, 1);
    for (float& v : x_ref.data) v = static_cast<float>(rng.uniform());
    for (float& v : x.data) v = static_cast<float>(rng.uniform());
    Matrix ref(4, m.feature_dim());
    const Matrix feats = m.features(x_ref);
    for (int j = 0; j < 4; ++j) softmax_row<float>(feats.row(j), ref.row(j));
    const FeatureKlObjective obj(ref);
    const ImageTensor g = grad_wrt_input(m, obj, x);

    const auto fd_at = [&](size_t coord, double h) {
      std::vector<double> flat(x.data.begin(), x.data.end());
      flat[coord] += h;
      const double up = objective_value_t<double>(m, obj, flat, 4);
      flat[coord] -= 2 * h;
      const double dn = objective_value_t<double>(m, obj, flat, 4);
      return (up - dn) / (2 * h);
    };
    double worst = 0.0;
    int checked = 0;
    for (int attempt = 0; attempt < 5000 && checked < 20; ++attempt) {
      const size_t coord = static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(x.data.size()) - 1));
      const double fd = fd_at(coord, 1e-3);
      const double an = g.data[coord];
      if (std::abs(fd) < 1e-6 && std::abs(an) < 1e-6) continue;  // dead relu
      // relu/maxpool kinks inside the FD window invalidate the estimate;
      // step-halving disagreement detects them
      if (refimpl::rel_err(fd, fd_at(coord, 1e-3 / 8.0)) > 3e-4) continue;
      worst = std::max(worst, refimpl::rel_err(fd, an));
      ++checked;
    }
    c.require(checked == 20, "not enough live KL coordinates");
    c.require(worst < 1e-3, "KL input grad rel err >= 1e-3");
    c.detail << " kl_worst_rel_err=" << worst;
  }

  // training-loss gradient w.r.t. parameters
  {
    Rng rng(0xC22);
    ImageTensor x(6, 12, 12, 1);
    for (float& v : x.data) v = static_cast<float>(rng.uniform());
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) labels.push_back(rng.uniform_int(0, 5));
    const CrossEntropyObjective obj(labels);
    const auto g = grad_wrt_params(m, obj, x);
    const std::vector<double> flat(x.data.begin(), x.data.end());

    const auto fd_at = [&](size_t coord, double h) {
      std::vector<double> params(m.params().begin(), m.params().end());
      params[coord] += h;
      const double up = objective_value_t<double>(m, obj, flat, 6, params);
      params[coord] -= 2 * h;
      const double dn = objective_value_t<double>(m, obj, flat, 6, params);
      return (up - dn) / (2 * h);
    };
    double worst = 0.0;
    int checked = 0;
    for (int attempt = 0; attempt < 5000 && checked < 20; ++attempt) {
      const size_t coord = static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(g.size()) - 1));
      const double fd = fd_at(coord, 1e-3);
      const double an = g[coord];
      if (std::abs(fd) < 1e-6 && std::abs(an) < 1e-6) continue;
      if (refimpl::rel_err(fd, fd_at(coord, 1e-3 / 8.0)) > 3e-4) continue;
      worst = std::max(worst, refimpl::rel_err(fd, an));
      ++checked;
    }
    c.require(checked == 20, "not enough live loss coordinates");
    c.require(worst < 1e-3, "loss param grad rel err >= 1e-3");
    c.detail << " loss_worst_rel_err=" << worst;
  }
  return c;
}

// ---------------------------------------------------------------------------
// C3: session purity across partitions + isolation of forbidden samples

Check criterion_3() {
  Check c;
  SyntheticConfig cfg;
  cfg.width = cfg.height = 12;
  cfg.samples_per_domain = 60;
  cfg.third_party_samples = 40;
  const auto suite = make_synthetic_shift_suite(Seed{0xC3}, cfg);

  std::vector<Model> models;
  models.push_back(build_small_cnn({12, 12, 1}, 10, Seed{0xC31}, 64));
  models.push_back(build_small_cnn({12, 12, 1}, 10, Seed{0xC32}, 64));
  SourceEnsemble ens(std::move(models), 10);
  for (const auto& s : suite.sources) ens.register_forbidden(s);
  ens.register_forbidden(suite.target.images);
  OracleService svc(std::move(ens));

  const ImageTensor& q = suite.third_party.images;
  const std::vector<std::vector<int>> partitions = {
      {}, {20}, {7, 14, 21, 28, 35}, {1, 2, 3, 4}, {39}};
  std::vector<int> base;
  for (size_t pi = 0; pi < partitions.size(); ++pi) {
    const auto id = svc.open();
    int lo = 0;
    for (const int cut : partitions[pi]) {
      svc.submit(id, q.slice(lo, cut));
      lo = cut;
    }
    if (lo < q.n) svc.submit(id, q.slice(lo, q.n));
    const auto labels = svc.finalize(id);
    if (pi == 0)
      base = labels;
    else
      c.require(labels == base, "partition " + std::to_string(pi) + " differs");
  }
  c.detail << " partitions_checked=" << partitions.size();

  Rng rng(0xC33);
  int rejected = 0;
  for (int trial = 0; trial < 50; ++trial) {
    ImageTensor batch(2, 12, 12, 1);
    const int tp = rng.uniform_int(0, q.n - 1);
    std::copy(q.sample(tp).begin(), q.sample(tp).end(), batch.sample(0).begin());
    const ImageTensor& pool = (trial % 2 == 0)
                                  ? suite.target.images
                                  : suite.sources[static_cast<size_t>(trial % 2)].images;
    const int idx = rng.uniform_int(0, pool.n - 1);
    std::copy(pool.sample(idx).begin(), pool.sample(idx).end(),
              batch.sample(1).begin());
    const auto id = svc.open();
    const auto r = svc.submit(id, batch);
    if (r.accepted == 0 && !r.rejected_ids.empty()) ++rejected;
  }
  c.require(rejected == 50, "an injected forbidden sample was answered");
  c.detail << " injections_rejected=" << rejected << "/50";
  return c;
}

// ---------------------------------------------------------------------------
// C4: DAT monotonicity under backtracking

Check criterion_4() {
  Check c;
  SyntheticConfig cfg;
  cfg.samples_per_domain = 640;
  cfg.third_party_samples = 1280;
  const auto suite = make_synthetic_shift_suite(Seed{0xC4}, cfg);

  Model m = build_small_cnn({16, 16, 1}, 10, Seed{0xC41});
  TrainConfig tc{0.05f, 64, 10, Seed{0xC42}, 0.9f};
  train_supervised(m, suite.sources[0], tc);

  DatConfig dat;
  dat.iterations = 5;
  dat.batch_size = 64;
  dat.pairing_seed = Seed{0xC43};
  const auto target = strip_labels(suite.target);
  const DatResult r = dat_generate(m, target, suite.third_party, dat);

  int non_increase = 0, strict = 0;
  for (const auto& b : r.batches) {
    if (b.kl_after <= b.kl_before) ++non_increase;
    if (b.kl_after < b.kl_before) ++strict;
  }
  const int total = static_cast<int>(r.batches.size());
  c.require(non_increase == total, "a batch increased its KL");
  c.require(strict * 10 >= total * 9, "strict decrease below 90% of batches");
  c.detail << " batches=" << total << " strict_decrease=" << strict
           << " mean_kl " << r.mean_kl_before() << "->" << r.mean_kl_after();
  return c;
}

// ---------------------------------------------------------------------------
// C5: end-to-end directional result on the 2-source suite, 3 seeds

Check criterion_5() {
  Check c;
  double sum_final = 0.0, sum_init = 0.0, sum_so = 0.0, cp_acc = -1.0,
         cp_ref_final = 0.0;
  int wins = 0;
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  for (const std::uint64_t sv : seeds) {
    const Seed seed{sv};
    SyntheticConfig cfg;  // defaults: K=10, 2000/domain, 16x16
    const auto suite = make_synthetic_shift_suite(seed, cfg);
    auto [adapt, test] = split_labeled(suite.target, 0.5);

    PipelineConfig pc;  // calibrated defaults
    TrainConfig src = pc.source_train;
    auto models = train_source_models(suite.sources, {16, 16, 1}, src,
                                      seed.child(99), pc.feature_dim);
    SourceEnsemble ens(std::move(models), 10);
    for (const auto& s : suite.sources) ens.register_forbidden(s);
    ens.register_forbidden(suite.target.images);
    const double source_only = ens.source_only_accuracy(test);
    OracleService svc(std::move(ens));
    InProcOracle oracle(svc);

    PipelineData data{strip_labels(adapt), test, suite.third_party,
                      {16, 16, 1}, 10};
    const auto outcome = run_pipeline(oracle, data, pc, seed);
    const double fin = outcome.report.accuracies.at("final");
    const double init = outcome.report.accuracies.at("init_another");
    sum_final += fin;
    sum_init += init;
    sum_so += source_only;
    if (fin > source_only) ++wins;
    std::cout << "  [c5] seed=" << sv << " source_only=" << source_only
              << " init=" << init << " final=" << fin << "\n";
    c.require(svc.log().clean(), "audit: forbidden sample answered");
    c.require(outcome.report.oracle_sessions == 2, "session accounting != 2");

    if (sv == seeds.front()) {
      // centroid strategy stays below the full pipeline (Tables 1-5 ordering)
      InProcOracle cp_oracle(svc);
      TrainConfig cp_cfg{0.05f, 10, 80, seed.child(7), 0.9f};
      const Model cp = baseline_cp(cp_oracle, data.target.images, 10,
                                   {16, 16, 1}, cp_cfg, seed, pc.feature_dim);
      cp_acc = evaluate(cp, test);
      cp_ref_final = fin;
    }
  }
  const double mean_final = sum_final / 3.0, mean_init = sum_init / 3.0,
               mean_so = sum_so / 3.0;
  c.require(mean_final >= mean_init, "mean final < mean init-only");
  c.require(mean_final >= mean_so - 2.0, "mean final < source-only - 2");
  c.require(wins >= 2, "full pipeline beat source-only in < 2 of 3 seeds");
  c.require(cp_acc < cp_ref_final, "CP baseline not below full pipeline");
  c.detail << " mean_source_only=" << mean_so << " mean_init=" << mean_init
           << " mean_final=" << mean_final << " wins=" << wins << "/3"
           << " cp=" << cp_acc;
  return c;
}

// ---------------------------------------------------------------------------
// C6: GNP lands at chance level

Check criterion_6() {
  Check c;
  const Seed seed{0xC6};
  SyntheticConfig cfg;
  cfg.samples_per_domain = 1000;
  const auto suite = make_synthetic_shift_suite(seed, cfg);
  auto [adapt, test] = split_labeled(suite.target, 0.5);

  PipelineConfig pc;
  auto models = train_source_models(suite.sources, {16, 16, 1}, pc.source_train,
                                    seed.child(99), pc.feature_dim);
  SourceEnsemble ens(std::move(models), 10);
  for (const auto& s : suite.sources) ens.register_forbidden(s);
  ens.register_forbidden(suite.target.images);
  OracleService svc(std::move(ens));
  InProcOracle oracle(svc);

  TrainConfig tc = pc.init_train;
  tc.seed = seed.child(5);
  const Model gnp = baseline_gnp(oracle, 10, 1000, {16, 16, 1}, seed, tc,
                                 pc.feature_dim);
  const double acc = evaluate(gnp, test);
  c.require(std::abs(acc - 10.0) <= 5.0, "GNP accuracy outside 10 +- 5");
  c.detail << " gnp_accuracy=" << acc << " (chance=10)";
  return c;
}

// ---------------------------------------------------------------------------
// C7: membership-inference judgement drops for the query-initialized model

Check criterion_7() {
  Check c;
  const Seed seed{0xC7};
  SyntheticConfig cfg;
  cfg.samples_per_domain = 800;
  cfg.third_party_samples = 1500;
  const auto suite = make_synthetic_shift_suite(seed, cfg);

  auto [a_train_full, a_held] = split_labeled(suite.sources[0], 0.5);
  auto [b_train_full, b_held] = split_labeled(suite.sources[1], 0.5);
  auto [a_train, a_rest] = split_labeled(a_train_full, 0.5);  // 200 samples
  auto [b_train, b_rest] = split_labeled(b_train_full, 0.5);

  const TrainConfig overfit{0.05f, 32, 100, seed.child(1), 0.9f};
  Model shadow = build_small_cnn({16, 16, 1}, 10, seed.child(2));
  train_supervised(shadow, a_train, overfit);
  Model victim_source = build_small_cnn({16, 16, 1}, 10, seed.child(3));
  TrainConfig overfit_b = overfit;
  overfit_b.seed = seed.child(4);
  train_supervised(victim_source, b_train, overfit_b);

  const AttackDataset atk_data = build_attack_dataset(shadow, a_train, a_held);
  const TrainConfig atk_cfg{0.05f, 32, 60, seed.child(5), 0.9f};
  const AttackTrainResult atk = train_attack_model(atk_data, atk_cfg);

  std::vector<Model> ens_models;
  ens_models.push_back(shadow);
  ens_models.push_back(victim_source);
  SourceEnsemble ens(std::move(ens_models), 10);
  for (const auto& s : suite.sources) ens.register_forbidden(s);
  ens.register_forbidden(suite.target.images);
  OracleService svc(std::move(ens));
  InProcOracle oracle(svc);
  PipelineConfig pc;
  TrainConfig init_cfg = pc.init_train;
  init_cfg.seed = seed.child(6);
  const Model init_model = stage_init_another(oracle, suite.third_party, 10,
                                              {16, 16, 1}, init_cfg,
                                              pc.feature_dim);

  const double acc_source = judge(atk.model, victim_source, b_train, b_held);
  const double acc_init = judge(atk.model, init_model, b_train, b_held);
  const double drop = acc_source - acc_init;
  c.require(drop >= 10.0, "Acc_judge drop < 10 points");
  c.detail << " attack_held_out=" << atk.held_out_accuracy
           << " acc_judge_source=" << acc_source
           << " acc_judge_init=" << acc_init << " drop=" << drop;
  return c;
}

// ---------------------------------------------------------------------------
// C8: transport equivalence

Check criterion_8() {
  Check c;
  SyntheticConfig cfg;
  cfg.width = cfg.height = 12;
  cfg.samples_per_domain = 50;
  cfg.third_party_samples = 64;
  const auto suite = make_synthetic_shift_suite(Seed{0xC8}, cfg);

  const auto build = [&] {
    std::vector<Model> models;
    models.push_back(build_small_cnn({12, 12, 1}, 10, Seed{0xC81}, 64));
    models.push_back(build_small_cnn({12, 12, 1}, 10, Seed{0xC82}, 64));
    SourceEnsemble ens(std::move(models), 10);
    ens.register_forbidden(suite.target.images);
    return OracleService(std::move(ens));
  };

  OracleService local_svc = build();
  InProcOracle local(local_svc);
  const auto want = local.query_dataset(suite.third_party, 17);

  OracleService remote_svc = build();
  OracleServer server(remote_svc, 0);
  server.start();
  {
    TcpOracle remote("127.0.0.1", server.port());
    const auto got = remote.query_dataset(suite.third_party, 17);
    c.require(got == want, "tcp labels differ from in-process labels");
    c.detail << " labels_compared=" << want.size();
  }
  server.stop();
  return c;
}

struct Criterion {
  int number;
  const char* name;
  double budget_s;
  std::function<Check()> fn;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "DEPICT refinement equals scalar brute force", 10.0, criterion_1},
      {2, "gradient fidelity vs central finite differences", 60.0, criterion_2},
      {3, "session purity and boundary isolation", 30.0, criterion_3},
      {4, "DAT monotonicity with backtracking", 120.0, criterion_4},
      {5, "end-to-end directional result (3 seeds)", 1200.0, criterion_5},
      {6, "GNP chance-level check", 300.0, criterion_6},
      {7, "membership-inference judgement drop", 600.0, criterion_7},
      {8, "tcp/in-process transport equivalence", 60.0, criterion_8},
  };

  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  bool all_ok = true;
  for (const auto& crit : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), crit.number) == selected.end())
      continue;
    const double t0 = now_s();
    Check c;
    try {
      c = crit.fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail << " exception{" << e.what() << "}";
    }
    const double elapsed = now_s() - t0;
    const bool in_budget = elapsed < crit.budget_s;
    const bool ok = c.ok && in_budget;
    all_ok = all_ok && ok;
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << "C" << crit.number << " "
              << crit.name << " (" << elapsed << "s < " << crit.budget_s
              << "s)" << c.detail.str();
    if (!in_budget) std::cout << " FAILED{over runtime budget}";
    std::cout << "\n" << std::flush;
  }
  return all_ok ? 0 : 1;
}
