#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>

#include "aidnet/net/train.hpp"
#include "support/fd.hpp"
#include "support/model_check.hpp"

using namespace aidnet;
using namespace aidnet::net;
using aidnet::testing::random_tensor;
using aidnet::testing::rel_err;

namespace {

Tensor random_input(std::size_t n, std::uint64_t seed, vg::Shape spatial = {12, 8, 8}) {
  std::mt19937_64 rng(seed);
  return random_tensor({n, 2, spatial[0], spatial[1], spatial[2]}, rng, 0.0, 1.0, false);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Dataset tiny_dataset(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.shape = {12, 8, 8};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "T" + std::to_string(i);
    s.label = i % 3;
    s.scan.resize(d.sample_size());
    s.rescan.resize(d.sample_size());
    for (auto& v : s.scan) v = u(rng);
    for (auto& v : s.rescan) v = u(rng);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

// -- forward ----------------------------------------------------------------

TEST(Forward, ShapeContract) {
  const auto p = init_params({}, 1);
  const auto f = forward_single(p, random_input(3, 2));
  EXPECT_EQ(f.logits.shape(), (vg::Shape{3, 3}));
  EXPECT_EQ(f.embedding.shape(), (vg::Shape{3, 128}));
  EXPECT_EQ(f.gap_feats.shape(), (vg::Shape{3, 64}));
  EXPECT_EQ(f.sag_feats.shape(), (vg::Shape{3, 64}));
  EXPECT_EQ(f.pre_gap_maps.shape(), (vg::Shape{3, 64, 3, 2, 2}));
  EXPECT_EQ(f.x_l.shape(), (vg::Shape{3, 32, 3, 2, 2}));
  EXPECT_EQ(f.alpha.shape(), (vg::Shape{3, 1, 3, 2, 2}));
}

TEST(Forward, DeskScaleMapShapes) {
  const auto p = init_params({}, 1);
  const auto f = forward_single(p, random_input(1, 2, {48, 32, 16}));
  EXPECT_EQ(f.pre_gap_maps.shape(), (vg::Shape{1, 64, 12, 8, 4}));
}

TEST(Forward, IdModeHasNarrowHead) {
  ArchConfig a;
  a.use_sag = false;
  const auto p = init_params(a, 1);
  const auto f = forward_single(p, random_input(2, 2));
  EXPECT_EQ(f.embedding.shape(), (vg::Shape{2, 64}));
  EXPECT_FALSE(f.sag_feats.defined());
  EXPECT_EQ(p.head_w.shape(), (vg::Shape{64, 3}));
}

TEST(Forward, WrongChannelCountIsAnError) {
  const auto p = init_params({}, 1);
  EXPECT_THROW(forward_single(p, Tensor::zeros({1, 3, 12, 8, 8})), ShapeError);
  EXPECT_THROW(forward_single(p, Tensor::zeros({2, 12, 8, 8})), ShapeError);
}

TEST(Forward, AllZeroInputGivesHeadBias) {
  auto p = init_params({}, 3);
  const std::vector<double> bias{0.3, -0.2, 0.125};
  std::copy(bias.begin(), bias.end(), p.head_b.mutable_data().begin());
  const auto f = forward_single(p, Tensor::zeros({2, 2, 12, 8, 8}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(f.logits[n * 3 + k], bias[k]);
  }
}

TEST(Forward, BatchPermutationPermutesLogits) {
  const auto p = init_params({}, 4);
  const Tensor x = random_input(3, 5);
  const std::size_t per = x.numel() / 3;
  std::vector<double> perm;
  for (std::size_t n : {2, 0, 1}) {
    perm.insert(perm.end(), x.data().begin() + static_cast<long>(n * per),
                x.data().begin() + static_cast<long>((n + 1) * per));
  }
  const auto a = forward_single(p, x).logits;
  const auto b = forward_single(p, Tensor(x.shape(), perm)).logits;
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(b[n * 3 + k], a[order[n] * 3 + k]);
  }
}

// -- attention gate ---------------------------------------------------------

TEST(Sag, ZeroPsiGivesHalf) {
  auto p = init_params({}, 6);
  std::fill(p.sag->psi.mutable_data().begin(), p.sag->psi.mutable_data().end(), 0.0);
  const auto f = forward_single(p, random_input(2, 7));
  const auto att = sag_gate(*p.sag, f.x_l, f.pre_gap_maps);
  for (double a : att.alpha.data()) EXPECT_EQ(a, 0.5);
  for (std::size_t i = 0; i < f.x_l.numel(); ++i) EXPECT_EQ(att.attended[i], 0.5 * f.x_l[i]);
}

TEST(Sag, SaturatedGateReproducesUngatedFeatures) {
  auto p = init_params({}, 6);
  p.sag->b_psi.mutable_data()[0] = 50.0;
  const auto f = forward_single(p, random_input(2, 8));
  const auto att = sag_gate(*p.sag, f.x_l, f.pre_gap_maps);
  for (std::size_t i = 0; i < f.x_l.numel(); ++i) {
    EXPECT_NEAR(att.attended[i], f.x_l[i], 1e-12);
  }
}

TEST(Sag, CoefficientsStrictlyInsideUnitInterval) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = init_params({}, seed);
    const auto f = forward_single(p, random_input(2, seed + 100));
    for (double a : f.alpha.data()) {
      EXPECT_GT(a, 0.0);
      EXPECT_LT(a, 1.0);
    }
  }
}

TEST(Sag, ChannelMismatchIsAnError) {
  const auto p = init_params({}, 6);
  const auto f = forward_single(p, random_input(1, 7));
  EXPECT_THROW(sag_gate(*p.sag, f.pre_gap_maps, f.pre_gap_maps), ShapeError);
}

TEST(Sag, CoarseGateIsUpsampled) {
  const auto p = init_params({}, 6);
  std::mt19937_64 rng(3);
  const Tensor x_l = random_tensor({1, 32, 4, 4, 4}, rng);
  const Tensor g = random_tensor({1, 64, 2, 2, 2}, rng);
  const auto att = sag_gate(*p.sag, x_l, g);
  EXPECT_EQ(att.alpha.shape(), (vg::Shape{1, 1, 4, 4, 4}));
  EXPECT_THROW(sag_gate(*p.sag, g.detach().clone(), x_l), ShapeError);
}

// -- siamese pair -----------------------------------------------------------

TEST(Pair, IdenticalInputsGiveZeroDistance) {
  const auto p = init_params({}, 9);
  const Tensor x = random_input(2, 10);
  const auto f = forward_pair(p, x, x);
  for (double d : f.d_w.data()) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(values(f.first.logits), values(f.second.logits));
}

TEST(Pair, SwapExchangesLogitsBitIdentically) {
  const auto p = init_params({}, 9);
  const Tensor a = random_input(2, 11), b = random_input(2, 12);
  const auto f = forward_pair(p, a, b);
  const auto g = forward_pair(p, b, a);
  EXPECT_EQ(values(f.first.logits), values(g.second.logits));
  EXPECT_EQ(values(f.second.logits), values(g.first.logits));
  EXPECT_EQ(values(f.d_w), values(g.d_w));
}

TEST(Pair, SharedParametersMoveBothPaths) {
  auto p = init_params({}, 9);
  const Tensor a = random_input(1, 11), b = random_input(1, 12);
  const auto before = forward_pair(p, a, b);
  p.head_b.mutable_data()[1] += 1.0;
  const auto after = forward_pair(p, a, b);
  EXPECT_DOUBLE_EQ(after.first.logits[1] - before.first.logits[1], 1.0);
  EXPECT_DOUBLE_EQ(after.second.logits[1] - before.second.logits[1], 1.0);
}

TEST(Pair, EuclideanDistanceExample) {
  std::vector<double> e(128, 0.0);
  e[0] = 3.0;
  e[1] = 4.0;
  const auto d = vg::pair_distance(Tensor({1, 128}, e), Tensor::zeros({1, 128}));
  EXPECT_EQ(d.item(), 5.0);
}

TEST(Pair, ShapeMismatchIsAnError) {
  const auto p = init_params({}, 9);
  EXPECT_THROW(forward_pair(p, random_input(1, 1), random_input(2, 1)), ShapeError);
}

// -- losses -----------------------------------------------------------------

TEST(Contrastive, ClosedFormExamples) {
  const std::vector<int> same{0}, diff{1};
  EXPECT_NEAR(contrastive_loss(Tensor({1}, {2.0}), same, 1.0).item(), 2.0, 1e-12);
  EXPECT_NEAR(contrastive_loss(Tensor({1}, {2.0}), diff, 1.0).item(), 0.0, 1e-12);
  EXPECT_NEAR(contrastive_loss(Tensor({1}, {0.5}), diff, 2.0).item(), 1.125, 1e-12);
}

TEST(Contrastive, BatchMean) {
  const std::vector<int> y{0, 1};
  EXPECT_NEAR(contrastive_loss(Tensor({2}, {2.0, 0.5}), y, 2.0).item(), (2.0 + 1.125) / 2, 1e-12);
}

TEST(Contrastive, Monotonicity) {
  const std::vector<int> same{0}, diff{1};
  double prev_same = -1.0, prev_diff = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 40; ++i) {
    const double d = 0.05 * i;
    const double s = contrastive_loss(Tensor({1}, {d}), same, 1.0).item();
    const double f = contrastive_loss(Tensor({1}, {d}), diff, 1.0).item();
    EXPECT_GT(s, prev_same);
    EXPECT_LE(f, prev_diff);
    if (d >= 1.0) {
      EXPECT_EQ(f, 0.0);
    }
    prev_same = s;
    prev_diff = f;
  }
}

TEST(Contrastive, GradientMatchesDifferences) {
  Tensor d({3}, {0.4, 1.7, 0.9}, true);
  const std::vector<int> y{0, 1, 1};
  contrastive_loss(d, y, 1.2).backward();
  auto f = [&] {
    vg::NoGradGuard ng;
    return contrastive_loss(d, y, 1.2).item();
  };
  EXPECT_LT(aidnet::testing::max_grad_error(d, f), 1e-6);
}

TEST(Contrastive, RejectsBadInputs) {
  EXPECT_THROW(contrastive_loss(Tensor({1}, {1.0}), std::vector<int>{0}, 0.0), ShapeError);
  EXPECT_THROW(contrastive_loss(Tensor({1}, {1.0}), std::vector<int>{2}, 1.0), ShapeError);
  EXPECT_THROW(contrastive_loss(Tensor({2}, {1.0, 1.0}), std::vector<int>{0}, 1.0), ShapeError);
}

TEST(CrossEntropy, UniformLogitsGiveLogThree) {
  const std::vector<std::size_t> lab{0, 2};
  EXPECT_NEAR(cross_entropy(Tensor::full({2, 3}, 0.7), lab).item(), std::log(3.0), 1e-15);
  EXPECT_NEAR(std::log(3.0), 1.0986123, 1e-7);
}

TEST(CrossEntropy, ConfidentTrueClassVanishes) {
  const std::vector<std::size_t> lab{1};
  EXPECT_LT(cross_entropy(Tensor({1, 3}, {0.0, 50.0, 0.0}), lab).item(), 1e-12);
}

TEST(CrossEntropy, GradientMatchesDifferences) {
  std::mt19937_64 rng(5);
  Tensor logits = random_tensor({4, 3}, rng, -2.0, 2.0);
  const std::vector<std::size_t> lab{0, 1, 2, 1};
  cross_entropy(logits, lab).backward();
  auto f = [&] {
    vg::NoGradGuard ng;
    return cross_entropy(logits, lab).item();
  };
  EXPECT_LT(aidnet::testing::max_grad_error(logits, f), 1e-6);
}

TEST(CrossEntropy, ClassWeightsFormWeightedMean) {
  const Tensor logits({2, 3}, {1.0, 0.0, 0.0, 0.0, 2.0, 0.0});
  const std::vector<std::size_t> lab{0, 1};
  const double a = cross_entropy(Tensor({1, 3}, {1.0, 0.0, 0.0}), std::vector<std::size_t>{0}).item();
  const double b = cross_entropy(Tensor({1, 3}, {0.0, 2.0, 0.0}), std::vector<std::size_t>{1}).item();
  const std::array<double, 3> w{1.0, 3.0, 1.0};
  EXPECT_NEAR(cross_entropy(logits, lab, w).item(), (a + 3.0 * b) / 4.0, 1e-15);
}

TEST(TotalLoss, LambdaZeroIsExactlyTheCrossEntropySum) {
  const auto p = init_params({}, 2);
  const auto c = aidnet::testing::random_pair_case({2, 2, 12, 8, 8}, 3);
  LossConfig cfg;
  cfg.lambda = 0.0;
  const auto f = forward_pair(p, c.scan, c.rescan);
  const auto parts = total_loss(f, c.label_scan, c.label_rescan, c.y, cfg);
  EXPECT_EQ(parts.total.item(), parts.ce1.item() + parts.ce2.item());
  EXPECT_GT(parts.contrastive.item(), 0.0);
}

TEST(TotalLoss, IdenticalSimilarInputsHaveNoContrastiveTerm) {
  const auto p = init_params({}, 2);
  const Tensor x = random_input(2, 4);
  const std::vector<std::size_t> lab{1, 2};
  const std::vector<int> y{0, 0};
  const auto parts = total_loss(forward_pair(p, x, x), lab, lab, y, {});
  EXPECT_EQ(parts.contrastive.item(), 0.0);
  EXPECT_EQ(parts.total.item(), parts.ce1.item() + parts.ce2.item());
}

TEST(TotalLoss, HandAssembledCombination) {
  const double t =
      combine_losses(Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), 0.001).item();
  EXPECT_NEAR(t, 3.003, 1e-15);
}

TEST(TotalLoss, NegativeLambdaRejected) {
  LossConfig cfg;
  cfg.lambda = -0.1;
  EXPECT_THROW(cfg.validate(), ShapeError);
}

// -- full-model gradient ----------------------------------------------------

TEST(ModelGradient, AidNetMatchesFiniteDifferences) {
  auto p = init_params({}, 21);
  const auto c = aidnet::testing::random_pair_case({2, 2, 12, 8, 8}, 22);
  LossConfig cfg;
  cfg.margin = 50.0;
  const auto a = aidnet::testing::audit_model_gradients(p, c, cfg, 23);
  EXPECT_LT(a.worst, 1e-4) << a.worst_entry;
}

TEST(ModelGradient, ContrastiveDominatedLossMatchesFiniteDifferences) {
  auto p = init_params({}, 31);
  const auto c = aidnet::testing::random_pair_case({2, 2, 12, 8, 8}, 32);
  LossConfig cfg;
  cfg.lambda = 1.0;
  cfg.margin = 50.0;
  const auto a = aidnet::testing::audit_model_gradients(p, c, cfg, 33, 512, 8, 1);
  EXPECT_LT(a.worst, 1e-4) << a.worst_entry;
}

TEST(ModelGradient, IdNetMatchesFiniteDifferences) {
  auto p = init_params(arch_for(Mode::Id), 41);
  const auto c = aidnet::testing::random_pair_case({2, 2, 12, 8, 8}, 42);
  const auto a = aidnet::testing::audit_model_gradients(p, c, {}, 43, 512, 8, 1);
  EXPECT_LT(a.worst, 1e-4) << a.worst_entry;
}

// -- prediction -------------------------------------------------------------

TEST(Predict, ArgmaxAndBinaryScore) {
  const auto a = prediction_from_probabilities({0.9, 0.06, 0.04});
  EXPECT_EQ(a.label, 0);
  EXPECT_NEAR(a.binary_score, 0.10, 1e-15);
  const auto b = prediction_from_probabilities({0.2, 0.5, 0.3});
  EXPECT_EQ(b.label, 1);
  EXPECT_NEAR(b.binary_score, 0.8, 1e-15);
}

TEST(Predict, ProbabilitiesSumToOne) {
  const auto p = init_params({}, 12);
  for (const auto& pr : predict(p, random_input(4, 13))) {
    const auto& q = pr.probabilities;
    EXPECT_NEAR(q[0] + q[1] + q[2], 1.0, 1e-12);
  }
}

// -- training ---------------------------------------------------------------

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto d = tiny_dataset(4, 1);
  const auto p = init_params({}, 5);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.max_epochs = 1;
  const std::vector<std::size_t> tr{0, 1, 2}, va{3};
  const auto r = train(p, d, tr, va, cfg);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_GT(r.log[0].total_loss, 0.0);
  const auto a = p.named(), b = r.params.named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(values(a[i].second), values(b[i].second));
}

TEST(Train, SameSeedSameTrajectory) {
  const auto d = tiny_dataset(5, 2);
  const auto p = init_params({}, 6);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.lr = 1e-3;
  cfg.seed = 77;
  const std::vector<std::size_t> tr{0, 1, 2, 3}, va{4};
  const auto r1 = train(p, d, tr, va, cfg);
  const auto r2 = train(p, d, tr, va, cfg);
  ASSERT_EQ(r1.log.size(), r2.log.size());
  for (std::size_t e = 0; e < r1.log.size(); ++e) {
    EXPECT_EQ(r1.log[e].total_loss, r2.log[e].total_loss);
    EXPECT_EQ(r1.log[e].contrastive, r2.log[e].contrastive);
  }
  EXPECT_EQ(values(r1.params.head_w), values(r2.params.head_w));
  // The caller's parameters are not modified.
  EXPECT_EQ(values(p.head_w), values(init_params({}, 6).head_w));
}

TEST(Train, LambdaZeroLogsUnweightedContrastive) {
  const auto d = tiny_dataset(4, 3);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  cfg.loss.lambda = 0.0;
  const std::vector<std::size_t> tr{0, 1, 2, 3}, va{};
  const auto r = train(init_params({}, 7), d, tr, va, cfg);
  EXPECT_NEAR(r.log[0].total_loss, r.log[0].ce1 + r.log[0].ce2, 1e-12);
}

TEST(Train, IdAndSingleModesRun) {
  const auto d = tiny_dataset(4, 4);
  const std::vector<std::size_t> tr{0, 1, 2}, va{3};
  TrainConfig cfg;
  cfg.max_epochs = 1;
  cfg.mode = Mode::Id;
  EXPECT_NO_THROW(train(init_params(arch_for(Mode::Id), 1), d, tr, va, cfg));
  EXPECT_THROW(train(init_params({}, 1), d, tr, va, cfg), ShapeError);
  cfg.mode = Mode::Single;
  const auto r = train(init_params(arch_for(Mode::Single), 1), d, tr, va, cfg);
  EXPECT_EQ(r.log[0].ce2, 0.0);
  EXPECT_EQ(r.log[0].total_loss, r.log[0].ce1);
}

TEST(Train, NonFiniteLossNamesTheBatch) {
  auto d = tiny_dataset(4, 5);
  for (auto& smp : d.samples) {
    for (double& v : smp.scan) v *= 1e300;
  }
  const auto p = init_params({}, 8);
  const std::vector<std::size_t> tr{0, 1, 2, 3}, va{};
  TrainConfig cfg;
  cfg.max_epochs = 1;
  try {
    train(p, d, tr, va, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, EmptyTrainingSetIsAnError) {
  const auto d = tiny_dataset(2, 5);
  const std::vector<std::size_t> none{}, va{0};
  EXPECT_THROW(train(init_params({}, 1), d, none, va, {}), DataError);
}

// -- checkpoints and splits -------------------------------------------------

TEST(Checkpoint, ModelRoundTrip) {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "aidnet_test_model.ckpt";
  const auto p = init_params({}, 15);
  save_model(path, p);
  const auto q = load_model(path);
  const auto a = p.named(), b = q.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(values(a[i].second), values(b[i].second));
  }
  const Tensor x = random_input(1, 3);
  EXPECT_EQ(values(forward_single(p, x).logits), values(forward_single(q, x).logits));
  fs::remove(path);
}

TEST(Checkpoint, IdModeHasNoSagEntries) {
  for (const auto& [name, t] : init_params(arch_for(Mode::Id), 1).named()) {
    EXPECT_NE(name.rfind("sag.", 0), 0u) << name;
  }
}

TEST(Split, StratifiedExactAndDisjoint) {
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 211; ++i) labels.push_back(i < 100 ? 0 : (i < 177 ? 1 : 2));
  const auto s = stratified_split(labels, 40, 40, 9);
  EXPECT_EQ(s.val.size(), 40u);
  EXPECT_EQ(s.test.size(), 40u);
  EXPECT_EQ(s.train.size(), 131u);
  std::vector<int> seen(211, 0);
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (std::size_t i : *part) ++seen[i];
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  std::array<std::size_t, 3> test_counts{};
  for (std::size_t i : s.test) ++test_counts[labels[i]];
  EXPECT_NEAR(static_cast<double>(test_counts[0]), 40.0 * 100 / 211, 1.0);
  EXPECT_NEAR(static_cast<double>(test_counts[1]), 40.0 * 77 / 211, 1.0);
  EXPECT_NEAR(static_cast<double>(test_counts[2]), 40.0 * 34 / 211, 1.0);
  const auto again = stratified_split(labels, 40, 40, 9);
  EXPECT_EQ(s.test, again.test);
  EXPECT_THROW(stratified_split(labels, 200, 40, 9), DataError);
}
