#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "reference_oracles.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/train.hpp"
#include "test_util.hpp"

using namespace sfuda;

TEST_CASE("same seed gives identical initial parameters", "[nn_core]") {
  const Model a = build_small_cnn({16, 16, 1}, 10, Seed{7});
  const Model b = build_small_cnn({16, 16, 1}, 10, Seed{7});
  const Model c = build_small_cnn({16, 16, 1}, 10, Seed{8});
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());
}

TEST_CASE("forward shapes match the contract", "[nn_core]") {
  const Model m = build_small_cnn({16, 16, 1}, 10, Seed{7});
  const auto x = testutil::random_images(5, 16, 16, 1, 3);
  const Matrix z = m.logits(x);
  CHECK(z.rows == 5);
  CHECK(z.cols == 10);
  const Matrix f = m.features(x);
  CHECK(f.cols == m.feature_dim());
  CHECK(m.feature_dim() == 128);
}

TEST_CASE("untrained model sits at chance on balanced data", "[nn_core]") {
  const Model m = build_small_cnn({12, 12, 1}, 10, Seed{42});
  const auto d = testutil::noise_dataset(1000, 10, 11);
  double acc = 0.0;
  const auto pred = m.predict(d.images);
  for (int i = 0; i < 1000; ++i)
    if (pred[static_cast<size_t>(i)] == d.labels[static_cast<size_t>(i)]) acc += 1.0;
  acc /= 10.0;
  CHECK(acc >= 5.0);
  CHECK(acc <= 15.0);
}

TEST_CASE("lr = 0 leaves parameters bit-unchanged", "[nn_core]") {
  Model m = build_small_cnn({8, 8, 1}, 2, Seed{7});
  const auto before = m.params();
  TrainConfig cfg;
  cfg.learning_rate = 0.0f;
  cfg.epochs = 2;
  cfg.seed = Seed{1};
  train_supervised(m, testutil::two_class_toy(32, 5), cfg);
  CHECK(m.params() == before);
}

TEST_CASE("separable two-class toy trains to >= 95%", "[nn_core]") {
  const auto d = testutil::two_class_toy(128, 21);
  // independent oracle: a logistic fit confirms the data is separable
  CHECK(testutil::logistic_fit_accuracy(d) >= 99.0);

  Model m = build_small_cnn({8, 8, 1}, 2, Seed{3});
  TrainConfig cfg;
  cfg.learning_rate = 0.05f;
  cfg.momentum = 0.9f;
  cfg.epochs = 20;
  cfg.seed = Seed{4};
  const TrainStats st = train_supervised(m, d, cfg);
  CHECK(st.final_loss() <= st.epoch_losses.front());
  double correct = 0;
  const auto pred = m.predict(d.images);
  for (int i = 0; i < d.images.n; ++i)
    if (pred[static_cast<size_t>(i)] == d.labels[static_cast<size_t>(i)]) correct += 1;
  CHECK(100.0 * correct / d.images.n >= 95.0);
}

TEST_CASE("cross-entropy of a one-hot-correct prediction is ~0", "[nn_core]") {
  const std::vector<float> confident = {25.0f, 0.0f, -3.0f};
  CHECK(cross_entropy_row(confident, 0) < 1e-6);
  const std::vector<float> uniform = {0.0f, 0.0f, 0.0f};
  CHECK(cross_entropy_row(uniform, 1) == Catch::Approx(std::log(3.0)));
}

TEST_CASE("training diverges loudly instead of silently", "[nn_core]") {
  Model m = build_small_cnn({8, 8, 1}, 2, Seed{3});
  // poison one weight; the first batch's loss turns NaN and training must
  // abort with the offending step instead of marching on
  m.params()[10] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.learning_rate = 0.05f;
  cfg.epochs = 2;
  cfg.seed = Seed{4};
  try {
    train_supervised(m, testutil::two_class_toy(64, 9), cfg);
    FAIL("expected TrainingDivergedError");
  } catch (const TrainingDivergedError& e) {
    CHECK(e.step == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("grad of sum-of-inputs is all ones; grad of 0.5|x|^2 is x",
          "[nn_core]") {
  const Model m = build_small_cnn({8, 8, 1}, 2, Seed{3});
  const auto x = testutil::random_images(3, 8, 8, 1, 17);

  const ImageTensor g1 = grad_wrt_input(m, SumOfInputsObjective{}, x);
  for (const float v : g1.data) CHECK(v == 1.0f);

  const ImageTensor g2 = grad_wrt_input(m, HalfSquaredNormObjective{}, x);
  for (size_t i = 0; i < x.data.size(); ++i)
    CHECK(g2.data[i] == Catch::Approx(x.data[i]));
}

TEST_CASE("non-differentiable objective is refused", "[nn_core]") {
  const Model m = build_small_cnn({8, 8, 1}, 2, Seed{3});
  const auto x = testutil::random_images(3, 8, 8, 1, 17);
  const AccuracyObjective obj({0, 1, 0});
  CHECK_THROWS_AS(grad_wrt_input(m, obj, x), UnsupportedObjectiveError);
}

namespace {

// central finite differences over the flattened inputs, double precision
double input_fd(const Model& m, const InputObjective& obj,
                const ImageTensor& x, size_t coord, double h) {
  std::vector<double> flat(x.data.begin(), x.data.end());
  flat[coord] += h;
  const double up = objective_value_t<double>(m, obj, flat, x.n);
  flat[coord] -= 2 * h;
  const double dn = objective_value_t<double>(m, obj, flat, x.n);
  return (up - dn) / (2 * h);
}

double param_fd(const Model& m, const InputObjective& obj, const ImageTensor& x,
                size_t coord, double h) {
  std::vector<double> flat(x.data.begin(), x.data.end());
  std::vector<double> params(m.params().begin(), m.params().end());
  params[coord] += h;
  const double up = objective_value_t<double>(m, obj, flat, x.n, params);
  params[coord] -= 2 * h;
  const double dn = objective_value_t<double>(m, obj, flat, x.n, params);
  return (up - dn) / (2 * h);
}

}  // namespace

TEST_CASE("KL objective input gradient matches finite differences",
          "[nn_core][gradcheck]") {
  const Model m = build_small_cnn({12, 12, 1}, 4, Seed{31});
  const auto x_ref = testutil::random_images(3, 12, 12, 1, 41);
  const auto x = testutil::random_images(3, 12, 12, 1, 42);
  Matrix ref(3, m.feature_dim());
  const Matrix feats = m.features(x_ref);
  for (int j = 0; j < 3; ++j) softmax_row<float>(feats.row(j), ref.row(j));
  const FeatureKlObjective obj(ref);

  const ImageTensor g = grad_wrt_input(m, obj, x);
  Rng rng(77);
  int checked = 0;
  for (int attempt = 0; attempt < 5000 && checked < 20; ++attempt) {
    const size_t coord = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(x.data.size()) - 1));
    const double fd = input_fd(m, obj, x, coord, 1e-3);
    const double an = g.data[coord];
    if (std::abs(fd) < 1e-6 && std::abs(an) < 1e-6) continue;  // dead relu path
    // a relu/maxpool kink inside [x-h, x+h] invalidates the FD estimate;
    // step-halving disagreement detects that and the coordinate is skipped
    const double fd8 = input_fd(m, obj, x, coord, 1e-3 / 8.0);
    if (refimpl::rel_err(fd, fd8) > 3e-4) continue;
    CHECK(refimpl::rel_err(fd, an) < 1e-3);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("training-loss parameter gradient matches finite differences",
          "[nn_core][gradcheck]") {
  const Model m = build_small_cnn({12, 12, 1}, 4, Seed{33});
  const auto d = testutil::noise_dataset(6, 4, 55);
  const CrossEntropyObjective obj(
      std::vector<int>(d.labels.begin(), d.labels.end()));
  const auto g = grad_wrt_params(m, obj, d.images);
  Rng rng(78);
  int checked = 0;
  for (int attempt = 0; attempt < 5000 && checked < 20; ++attempt) {
    const size_t coord = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(g.size()) - 1));
    const double fd = param_fd(m, obj, d.images, coord, 1e-3);
    const double an = g[coord];
    if (std::abs(fd) < 1e-6 && std::abs(an) < 1e-6) continue;
    const double fd8 = param_fd(m, obj, d.images, coord, 1e-3 / 8.0);
    if (refimpl::rel_err(fd, fd8) > 3e-4) continue;  // kink inside the window
    CHECK(refimpl::rel_err(fd, an) < 1e-3);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("softmax rows sum to 1 and are shift-invariant", "[nn_core]") {
  Rng rng(12);
  Matrix z(8, 6);
  for (float& v : z.data) v = static_cast<float>(rng.normal() * 3);
  const Matrix p = softmax_rows(z);
  for (int j = 0; j < 8; ++j) {
    double sum = 0.0;
    for (int k = 0; k < 6; ++k) sum += p.at(j, k);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  Matrix shifted = z;
  for (int j = 0; j < 8; ++j)
    for (int k = 0; k < 6; ++k) shifted.at(j, k) += 17.5f;
  const Matrix p2 = softmax_rows(shifted);
  for (size_t i = 0; i < p.data.size(); ++i)
    CHECK(std::abs(p.data[i] - p2.data[i]) < 1e-6);
}

TEST_CASE("predict is invariant under increasing logit transforms",
          "[nn_core]") {
  const Model m = build_small_cnn({12, 12, 1}, 5, Seed{9});
  const auto x = testutil::random_images(20, 12, 12, 1, 60);
  const Matrix z = m.logits(x);
  const auto base = m.predict(x);
  for (int j = 0; j < z.rows; ++j) {
    // affine with positive scale, and a monotone cubic
    std::vector<float> affine(5), cubic(5);
    for (int k = 0; k < 5; ++k) {
      affine[static_cast<size_t>(k)] = 2.5f * z.at(j, k) + 3.0f;
      cubic[static_cast<size_t>(k)] = z.at(j, k) * z.at(j, k) * z.at(j, k);
    }
    CHECK(argmax_row(affine) == base[static_cast<size_t>(j)]);
    CHECK(argmax_row(cubic) == base[static_cast<size_t>(j)]);
  }
}

TEST_CASE("checkpoint save/load is bit-exact", "[nn_core]") {
  namespace fs = std::filesystem;
  Model m = build_small_cnn({12, 12, 1}, 10, Seed{71});
  TrainConfig cfg;
  cfg.learning_rate = 0.05f;
  cfg.epochs = 1;
  cfg.seed = Seed{5};
  train_supervised(m, testutil::noise_dataset(64, 10, 13), cfg);

  const fs::path dir = fs::temp_directory_path() / "sfuda_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(m, dir, "model");
  const Model back = load_checkpoint(dir, "model");
  CHECK(back.params() == m.params());
  CHECK(back.digest() == m.digest());
  const auto x = testutil::random_images(4, 12, 12, 1, 2);
  CHECK(back.logits(x).data == m.logits(x).data);

  SECTION("payload size mismatch is corruption") {
    // truncate the bin file
    const fs::path bin = dir / "model.bin";
    const auto size = fs::file_size(bin);
    fs::resize_file(bin, size - 8);
    CHECK_THROWS_AS(load_checkpoint(dir, "model"), CorruptionError);
  }
}

TEST_CASE("mlp builder produces the declared stack", "[nn_core]") {
  const Model m = build_mlp(10, {128, 64, 32, 16}, 2, Seed{1});
  // flatten + 4x(dense,relu) + head dense
  CHECK(m.layer_count() == 10);
  CHECK(m.num_classes() == 2);
  ImageTensor x(3, 1, 1, 10);
  for (float& v : x.data) v = 0.1f;
  CHECK(m.logits(x).cols == 2);

  // no hidden layers: features are the raw inputs
  const Model id = build_mlp(4, {}, 2, Seed{1});
  ImageTensor y(2, 1, 1, 4);
  y.data = {0.1f, 0.2f, 0.3f, 0.4f, 0.9f, 0.1f, 0.5f, 0.2f};
  const Matrix f = id.features(y);
  for (size_t i = 0; i < y.data.size(); ++i) CHECK(f.data[i] == y.data[i]);
}
