#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "ssfa/synth.hpp"
#include "ssfa/trainer.hpp"

using namespace ssfa;
using ssfa::testing::random_matrix;
using ssfa::testing::TempDir;

namespace {

using VecTerm = GradientTerm<Vector>;

std::vector<VecTerm> quadratic_grad(const Vector& x, const Vector& diag) {
  return {{"f", 0.0, 1.0, Vector(2.0 * diag.cwiseProduct(x))}};
}

struct Fixture {
  SynthConfig synth;
  UnlabeledSet clips;
  LabeledSet labeled;
  PreparedData data;
  LayerSpec spec;

  Fixture() {
    synth.grid = 8;
    synth.clip_len = 10;
    synth.num_clips = 6;
    synth.seed = 3;
    clips = gen_unlabeled(synth);
    labeled = gen_labeled(synth, 5);
    MiningConfig mc{2.0, 3.0, 1.0, 200, 200, 1};
    data = prepare(labeled, &clips, mine_pairs(clips, mc).samples, mine_triplets(clips, mc).samples);
    spec = LayerSpec{{64, 6, 5}};
  }
};

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.lambda = 0.5;
  cfg.lambda2 = 0.3;
  cfg.batch_labeled = 4;
  cfg.batch_pairs = 8;
  cfg.batch_triplets = 8;
  cfg.max_epochs = 15;
  cfg.patience = 15;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST(Nesterov, HandStepOnSquare) {
  Vector theta = Vector::Constant(1, 1.0), v = Vector::Zero(1);
  nesterov_step(theta, v, [](const Vector& x) { return quadratic_grad(x, Vector::Ones(1)); }, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(v(0), -0.2);
  EXPECT_DOUBLE_EQ(theta(0), 0.8);
}

TEST(Nesterov, GradientIsTakenAtLookahead) {
  Vector theta = Vector::Constant(1, 1.0), v = Vector::Constant(1, 0.5);
  Vector seen;
  nesterov_step(
      theta, v,
      [&](const Vector& x) {
        seen = x;
        return quadratic_grad(x, Vector::Ones(1));
      },
      0.1, 0.9);
  EXPECT_DOUBLE_EQ(seen(0), 1.45);
  EXPECT_DOUBLE_EQ(v(0), 0.9 * 0.5 - 0.1 * 2.9);
  EXPECT_DOUBLE_EQ(theta(0), 1.0 + v(0));
}

TEST(Nesterov, ZeroMomentumIsSgd) {
  Rng rng(1);
  const Vector diag = random_matrix(rng, 5, 1).cwiseAbs();
  Vector theta = random_matrix(rng, 5, 1), v = Vector::Zero(5);
  for (int i = 0; i < 20; ++i) {
    const Vector expect = theta - 0.05 * 2.0 * diag.cwiseProduct(theta);
    nesterov_step(theta, v, [&](const Vector& x) { return quadratic_grad(x, diag); }, 0.05, 0.0);
    EXPECT_EQ(theta, expect);
  }
}

TEST(Nesterov, MatchesRewrittenForm) {
  // Rewritten form tracks phi = theta + mu v:
  //   v' = mu v - lr grad(phi);  phi' = phi - mu v + (1 + mu) v'.
  Rng rng(2);
  const Vector diag = random_matrix(rng, 4, 1).cwiseAbs() + Vector::Constant(4, 0.1);
  const double lr = 0.05, mu = 0.9;
  Vector theta = random_matrix(rng, 4, 1), v = Vector::Zero(4);
  Vector phi = theta, w = Vector::Zero(4);
  for (int i = 0; i < 100; ++i) {
    nesterov_step(theta, v, [&](const Vector& x) { return quadratic_grad(x, diag); }, lr, mu);
    const Vector w_next = mu * w - lr * 2.0 * diag.cwiseProduct(phi);
    phi = phi - mu * w + (1.0 + mu) * w_next;
    w = w_next;
    EXPECT_LT((theta - (phi - mu * w)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((v - w).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Nesterov, NonFiniteTermIsNamed) {
  Vector theta = Vector::Ones(2), v = Vector::Zero(2);
  auto grad = [](const Vector&) {
    return std::vector<VecTerm>{{"L_s", 0.0, 1.0, Vector::Ones(2)},
                                {"R3", 0.0, 1.0, Vector::Constant(2, std::numeric_limits<double>::quiet_NaN())}};
  };
  try {
    nesterov_step(theta, v, grad, 0.1, 0.9);
    FAIL() << "expected OptimizerError";
  } catch (const OptimizerError& e) {
    EXPECT_EQ(e.term(), "R3");
  }
  EXPECT_EQ(theta, Vector::Ones(2));
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lambda = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_labeled = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(StratifiedSplit, PerClassRounding) {
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 40; ++i) labels.push_back(i % 4);
  const auto [train, val] = stratified_split(labels, 4, 0.2, 5);
  EXPECT_EQ(val.size(), 8u);
  EXPECT_EQ(train.size(), 32u);
  std::vector<std::size_t> per_class(4, 0);
  for (auto i : val) ++per_class[labels[i]];
  EXPECT_EQ(per_class, (std::vector<std::size_t>{2, 2, 2, 2}));
  std::vector<std::size_t> all = train;
  all.insert(all.end(), val.begin(), val.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
}

TEST(StratifiedSplit, KeepsOneTrainingItem) {
  const auto [train, val] = stratified_split({0, 1}, 2, 0.9, 1);
  EXPECT_EQ(train.size(), 2u);
  EXPECT_TRUE(val.empty());
}

TEST(Train, EmptyValidationSplitIsConfigError) {
  Fixture f;
  LabeledSet one = f.labeled;
  one.images.resize(4);
  one.labels.resize(4);
  TrainConfig cfg = small_config();
  cfg.lambda = 0.0;
  EXPECT_THROW(train(prepare(one, nullptr, {}, {}), f.spec, cfg), ConfigError);
}

TEST(Train, LambdaWithoutTuplesIsConfigError) {
  Fixture f;
  EXPECT_THROW(train(prepare(f.labeled, nullptr, {}, {}), f.spec, small_config()), ConfigError);
}

TEST(Train, InputSizeMismatchIsShapeError) {
  Fixture f;
  EXPECT_THROW(train(f.data, LayerSpec{{65, 6, 5}}, small_config()), ShapeError);
}

TEST(Train, DeterministicHistory) {
  Fixture f;
  const auto a = train(f.data, f.spec, small_config());
  const auto b = train(f.data, f.spec, small_config());
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(flatten(a.model), flatten(b.model));
  EXPECT_EQ(a.history.size(), 15u);
  for (const auto& r : a.history) {
    EXPECT_TRUE(std::isfinite(r.ls) && std::isfinite(r.r2) && std::isfinite(r.r3) && std::isfinite(r.val_loss));
  }
  TrainConfig other = small_config();
  other.seed = 12;
  EXPECT_NE(train(f.data, f.spec, other).history, a.history);
}

TEST(Train, ReturnsBestValidationEpoch) {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.lr = 0.02;
  cfg.max_epochs = 60;
  cfg.patience = 60;
  const auto r = train(f.data, f.spec, cfg);
  ASSERT_EQ(r.history.size(), 60u);
  EXPECT_LT(r.best_epoch, 60u);
  std::size_t argmin = 0;
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    if (r.history[i].val_loss < r.history[argmin].val_loss) argmin = i;
  }
  EXPECT_EQ(r.best_epoch, argmin + 1);
  EXPECT_EQ(r.best_val_loss, r.history[argmin].val_loss);
  const auto [train_idx, val_idx] = stratified_split(f.data.labels, f.data.num_classes, cfg.val_fraction, cfg.seed);
  std::vector<std::size_t> val_y;
  for (auto i : val_idx) val_y.push_back(f.data.labels[i]);
  EXPECT_EQ(classification_loss(r.model, gather_columns(f.data.labeled_x, val_idx), val_y).first, r.best_val_loss);
}

TEST(Train, PatienceStopsEarly) {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.lr = 0.02;
  cfg.max_epochs = 200;
  cfg.patience = 3;
  const auto r = train(f.data, f.spec, cfg);
  ASSERT_LT(r.history.size(), 200u);
  EXPECT_EQ(r.history.size(), r.best_epoch + 3);
}

TEST(Train, UnregIgnoresTuples) {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.lambda = 0.0;
  cfg.lambda2 = 0.0;
  const auto with = train(f.data, f.spec, cfg);
  const auto without = train(prepare(f.labeled, nullptr, {}, {}), f.spec, cfg);
  EXPECT_EQ(with.history, without.history);
  for (const auto& r : with.history) {
    EXPECT_EQ(r.r2, 0.0);
    EXPECT_EQ(r.r3, 0.0);
  }
}

TEST(Train, Sfa2LogsNoTripletTerm) {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.lambda2 = 0.0;
  const auto r = train(f.data, f.spec, cfg);
  for (const auto& e : r.history) {
    EXPECT_GT(e.r2, 0.0);
    EXPECT_EQ(e.r3, 0.0);
  }
}

TEST(Trainer, StepIsMonolithicGradientStep) {
  Fixture f;
  Rng rng(4);
  const Model init = initial_model(f.spec, 4, 9);
  ObjectiveBatch b;
  b.x_labeled = f.data.labeled_x.leftCols(6);
  b.labels.assign(f.data.labels.begin(), f.data.labels.begin() + 6);
  b.xj = random_matrix(rng, 64, 5);
  b.xk = random_matrix(rng, 64, 5);
  b.pair_p = {1, 0, 1, 0, 0};
  b.xl = random_matrix(rng, 64, 5);
  b.xm = random_matrix(rng, 64, 5);
  b.xn = random_matrix(rng, 64, 5);
  b.triplet_p = {0, 1, 1, 0, 1};
  const double lambda = 3.0, lambda2 = 0.1, lr = 0.05;

  ObjectiveBatch only_labeled, only_pairs, only_triplets;
  only_labeled.x_labeled = b.x_labeled;
  only_labeled.labels = b.labels;
  only_pairs.xj = b.xj;
  only_pairs.xk = b.xk;
  only_pairs.pair_p = b.pair_p;
  only_triplets.xl = b.xl;
  only_triplets.xm = b.xm;
  only_triplets.xn = b.xn;
  only_triplets.triplet_p = b.triplet_p;
  const Margins m;
  const Model g_ls = total_objective(only_labeled, init, {1.0, 0.0, 0.0}, m).grad;
  const Model g_r2 = total_objective(only_pairs, init, {0.0, 1.0, 0.0}, m).grad;
  const Model g_r3 = total_objective(only_triplets, init, {0.0, 1.0, 1.0}, m).grad;
  Model expect = init;
  axpy(-lr, g_ls, expect);
  axpy(-lr * lambda, g_r2, expect);
  axpy(-lr * lambda * lambda2, g_r3, expect);

  TrainConfig cfg = small_config();
  cfg.lr = lr;
  cfg.lambda = lambda;
  cfg.lambda2 = lambda2;
  Trainer trainer(f.data, init, cfg, {});
  trainer.step(b, {1.0, lambda, lambda2});
  const auto got = flatten(trainer.model()), want = flatten(expect);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Trainer, UnsupervisedStepsLeaveClassifierAlone) {
  Fixture f;
  const Model init = initial_model(f.spec, 4, 9);
  Trainer trainer(f.data, init, small_config(), {});
  trainer.run_unsupervised_steps(10);
  EXPECT_EQ(trainer.model().classifier.W, init.classifier.W);
  EXPECT_NE(flatten(trainer.model()), flatten(init));
}

TEST(ShuffledStream, CyclesThroughEveryIndex) {
  ShuffledStream s(7, 3);
  for (int pass = 0; pass < 3; ++pass) {
    auto idx = s.next(7);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(idx[i], i);
  }
  EXPECT_TRUE(ShuffledStream(0, 1).next(4).empty());
}

TEST(History, CsvIsStable) {
  Fixture f;
  TempDir dir;
  TrainConfig cfg = small_config();
  cfg.max_epochs = 3;
  const auto r = train(f.data, f.spec, cfg);
  save_history_csv(r.history, dir / "a.csv");
  save_history_csv(train(f.data, f.spec, cfg).history, dir / "b.csv");
  const std::string a = ssfa::testing::read_bytes(dir / "a.csv");
  EXPECT_EQ(a, ssfa::testing::read_bytes(dir / "b.csv"));
  EXPECT_EQ(a.substr(0, a.find('\n')), "epoch,L_s,R2,R3,val_loss,val_acc");
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 4);
}

TEST(Grids, DefaultCandidates) {
  const CvGrids g;
  EXPECT_EQ(g.lr, (std::vector<double>{0.1, 0.01, 0.001, 0.0001}));
  EXPECT_EQ(g.delta_triplet, (std::vector<double>{0.0, 0.1, 1.0}));
  ASSERT_EQ(g.lambda.size(), 8u);
  EXPECT_DOUBLE_EQ(g.lambda.front(), 0.01);
  EXPECT_NEAR(g.lambda.back(), std::pow(10.0, 1.5), 1e-9);
  for (std::size_t i = 1; i < g.lambda.size(); ++i) EXPECT_NEAR(g.lambda[i] / g.lambda[i - 1], std::sqrt(10.0), 1e-12);
  EXPECT_EQ(g.lambda2, g.lambda);
}

TEST(Grids, ZeroTripletMarginKeepsOnlyPositiveDistance) {
  Rng rng(5);
  const Matrix zl = random_matrix(rng, 3, 6), zm = random_matrix(rng, 3, 6), zn = random_matrix(rng, 3, 6);
  const std::vector<int> neg(6, 0);
  EXPECT_EQ(triplet_loss(zl, zm, zn, neg, 0.0, Metric::L2).value, 0.0);
  const std::vector<int> mixed{1, 0, 1, 0, 1, 0};
  const std::vector<int> pos_only{1, 1, 1};
  const auto l = triplet_loss(zl, zm, zn, mixed, 0.0, Metric::L2);
  Matrix pl(3, 3), pm(3, 3), pn(3, 3);
  for (int i = 0; i < 3; ++i) {
    pl.col(i) = zl.col(2 * i);
    pm.col(i) = zm.col(2 * i);
    pn.col(i) = zn.col(2 * i);
  }
  EXPECT_NEAR(l.value, triplet_loss(pl, pm, pn, pos_only, 0.0, Metric::L2).value / 2.0, 1e-15);
}

TEST(GreedyCv, StagesRunInOrderAndPickArgmin) {
  Fixture f;
  TrainConfig base = small_config();
  base.max_epochs = 4;
  base.patience = 4;
  CvGrids grids;
  grids.lr = {0.1, 0.01};
  grids.lambda = {0.1, 1.0};
  grids.lambda2 = {0.1, 1.0};
  grids.delta_triplet = {0.0, 1.0};
  const auto r = greedy_cv(f.data, f.spec, base, grids);
  ASSERT_EQ(r.log.size(), 8u);
  const std::vector<std::string> stages{"lr", "lr", "lambda", "lambda", "lambda2", "lambda2", "delta_triplet",
                                        "delta_triplet"};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.log[i].stage, stages[i]);
  auto pick = [&](std::size_t i) { return r.log[i].val_loss <= r.log[i + 1].val_loss ? i : i + 1; };
  EXPECT_EQ(r.best.lr, r.log[pick(0)].candidate);
  EXPECT_EQ(r.best.lambda, r.log[pick(2)].candidate);
  EXPECT_EQ(r.best.lambda2, r.log[pick(4)].candidate);
  EXPECT_EQ(r.best.margins.delta_triplet, r.log[pick(6)].candidate);
}

TEST(GreedyCv, TiesGoToSmallerValue) {
  // Every frame of every clip is identical, so all tuple distances are 0 and
  // the unsupervised terms contribute exactly zero gradient: every lambda ties.
  Fixture f;
  UnlabeledSet flat;
  for (std::size_t c = 0; c < 3; ++c) {
    Clip clip{"flat" + std::to_string(c), {}, 1.0};
    for (std::size_t t = 0; t < 10; ++t) clip.frames.push_back(f.labeled.images[c]);
    flat.clips.push_back(clip);
  }
  MiningConfig mc{2.0, 3.0, 1.0, 100, 100, 1};
  const PreparedData data =
      prepare(f.labeled, &flat, mine_pairs(flat, mc).samples, mine_triplets(flat, mc).samples);
  TrainConfig base = small_config();
  base.max_epochs = 3;
  CvGrids grids;
  grids.lr = {0.01};
  grids.lambda = {3.0, 0.3, 1.0};
  grids.lambda2 = {1.0, 0.1};
  grids.delta_triplet = {1.0, 0.1, 0.0};
  const auto r = greedy_cv(data, f.spec, base, grids);
  EXPECT_EQ(r.log[1].val_loss, r.log[2].val_loss);
  EXPECT_EQ(r.best.lambda, 0.3);
  EXPECT_EQ(r.best.lambda2, 0.1);
  EXPECT_EQ(r.best.margins.delta_triplet, 0.0);
}

TEST(GreedyCv, DivergentStageIsSearchError) {
  Fixture f;
  TrainConfig base = small_config();
  base.max_epochs = 3;
  CvGrids grids;
  grids.lr = {1e300};
  try {
    greedy_cv(f.data, f.spec, base, grids);
    FAIL() << "expected SearchError";
  } catch (const SearchError& e) {
    EXPECT_EQ(e.stage(), "lr");
  }
}

TEST(GreedyCv, EmptyGridsAreConfigError) {
  Fixture f;
  CvGrids none{{}, {}, {}, {}};
  EXPECT_THROW(greedy_cv(f.data, f.spec, small_config(), none), ConfigError);
}

TEST(GreedyCv, LogCsv) {
  TempDir dir;
  save_cv_log({{"lr", 0.1, 0.5}, {"lr", 0.01, 0.25}}, dir / "cv.csv");
  EXPECT_EQ(ssfa::testing::read_bytes(dir / "cv.csv"), "stage,candidate,val_loss\nlr,0.10000000000000001,0.5\nlr,0.01,0.25\n");
}
