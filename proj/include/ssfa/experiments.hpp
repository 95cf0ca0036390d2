#pragma once

// Canonical desk-scale fixtures and the per-seed experiment runners built on
// them: method comparison (eta + linear accuracy for random init, unreg,
// sfa2, ssfa) and the unsupervised kNN trend.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ssfa/eval.hpp"
#include "ssfa/mining.hpp"
#include "ssfa/synth.hpp"
#include "ssfa/trainer.hpp"

namespace ssfa {

struct SteadyExperimentConfig {
  SynthConfig synth{};  // training clips; seed is overwritten per fixture
  std::size_t query_clips = 20;
  std::size_t labeled_per_class = 5;
  std::size_t test_per_class = 50;
  std::size_t queries = 200;
  std::size_t pool_n = 5;
  MiningConfig mining{2.0, 3.0, 1.0, 4000, 4000, 0};
  std::vector<std::size_t> hidden{25};
  std::size_t features = 25;
  double lr = 0.01;
  double lambda = 3.0;
  double lambda2 = 0.3;
  std::size_t max_epochs = 1000;
};

struct SteadyFixture {
  UnlabeledSet clips;
  UnlabeledSet query_clips;
  LabeledSet labeled;
  LabeledSet test;
};

inline LayerSpec experiment_spec(std::size_t input, const std::vector<std::size_t>& hidden, std::size_t features) {
  LayerSpec spec;
  spec.sizes.push_back(input);
  spec.sizes.insert(spec.sizes.end(), hidden.begin(), hidden.end());
  spec.sizes.push_back(features);
  return spec;
}

inline SteadyFixture make_steady_fixture(const SteadyExperimentConfig& cfg, std::uint64_t seed) {
  SteadyFixture f;
  SynthConfig sc = cfg.synth;
  sc.seed = derive_seed(seed, 0x636c);
  f.clips = gen_unlabeled(sc);
  sc.seed = derive_seed(seed, 0x7172);
  sc.num_clips = cfg.query_clips;
  f.query_clips = gen_unlabeled(sc);
  sc.seed = derive_seed(seed, 0x6c62);
  f.labeled = gen_labeled(sc, cfg.labeled_per_class);
  sc.seed = derive_seed(seed, 0x7465);
  f.test = gen_labeled(sc, cfg.test_per_class);
  return f;
}

struct MethodRun {
  double eta = 0.0;
  double accuracy = 0.0;
};

struct SteadySeedResult {
  MethodRun random_init;
  MethodRun unreg;
  MethodRun sfa2;
  MethodRun ssfa;
};

inline SteadySeedResult run_steady_seed(const SteadyExperimentConfig& cfg, std::uint64_t seed) {
  const SteadyFixture f = make_steady_fixture(cfg, seed);
  MiningConfig mc = cfg.mining;
  mc.seed = derive_seed(seed, 0x6d69);
  const auto pairs = mine_pairs(f.clips, mc).samples;
  const auto triplets = mine_triplets(f.clips, mc).samples;
  const PreparedData data = prepare(f.labeled, &f.clips, pairs, triplets);

  const auto queries = make_queries(f.query_clips, cfg.mining.T_seconds, cfg.queries, derive_seed(seed, 0x7179));
  const auto pool = build_pool(queries, f.query_clips, cfg.pool_n, derive_seed(seed, 0x706f));
  const LayerSpec spec =
      experiment_spec(f.labeled.images.front().pixels.size(), cfg.hidden, cfg.features);

  SteadySeedResult out;
  const std::uint64_t train_seed = derive_seed(seed, 0x7472);
  const Model init = initial_model(spec, f.labeled.num_classes, train_seed);
  out.random_init = {evaluate_seqcomp(queries, pool, init.net, f.query_clips).eta, linear_accuracy(init, f.test)};

  auto run = [&](double lambda, double lambda2) {
    TrainConfig tc;
    tc.lr = cfg.lr;
    tc.lambda = lambda;
    tc.lambda2 = lambda2;
    tc.max_epochs = cfg.max_epochs;
    tc.patience = cfg.max_epochs;
    tc.seed = train_seed;
    const TrainResult r = train(data, spec, tc);
    return MethodRun{evaluate_seqcomp(queries, pool, r.model.net, f.query_clips).eta,
                     linear_accuracy(r.model, f.test)};
  };
  out.unreg = run(0.0, 0.0);
  out.sfa2 = run(cfg.lambda, 0.0);
  out.ssfa = run(cfg.lambda, cfg.lambda2);
  return out;
}

/// Unsupervised trend: L_u-only training on panning scene clips, kNN
/// accuracy recorded before training and after every `stage_steps` steps.
struct TrendExperimentConfig {
  SynthConfig synth = [] {
    SynthConfig s;
    s.scene_tiles = 4;
    s.velocity_set = {{3, 0}, {-3, 0}};
    s.label_jitter = 8;
    return s;
  }();
  std::size_t train_per_class = 25;
  std::size_t test_per_class = 200;
  std::size_t k = 5;
  MiningConfig mining{2.0, 3.0, 1.0, 4000, 4000, 0};
  std::vector<std::size_t> hidden{25};
  std::size_t features = 25;
  double lr = 0.01;
  double lambda2 = 0.3;
  std::size_t stages = 3;
  std::size_t stage_steps = 225;
};

struct TrendFixture {
  UnlabeledSet clips;
  LabeledSet train;
  LabeledSet test;
};

inline TrendFixture make_trend_fixture(const TrendExperimentConfig& cfg, std::uint64_t seed) {
  TrendFixture f;
  SynthConfig sc = cfg.synth;
  sc.seed = derive_seed(seed, 0x7363);
  f.clips = gen_unlabeled(sc);
  sc.seed = derive_seed(seed, 0x6b74);
  f.train = gen_labeled(sc, cfg.train_per_class);
  sc.seed = derive_seed(seed, 0x6b65);
  f.test = gen_labeled(sc, cfg.test_per_class);
  return f;
}

inline std::vector<double> run_trend_seed(const TrendExperimentConfig& cfg, std::uint64_t seed) {
  const TrendFixture f = make_trend_fixture(cfg, seed);
  MiningConfig mc = cfg.mining;
  mc.seed = derive_seed(seed, 0x6d69);
  const auto pairs = mine_pairs(f.clips, mc).samples;
  const auto triplets = mine_triplets(f.clips, mc).samples;
  const PreparedData data = prepare(f.train, &f.clips, pairs, triplets);
  const LayerSpec spec = experiment_spec(f.train.images.front().pixels.size(), cfg.hidden, cfg.features);

  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.lambda = 1.0;
  tc.lambda2 = cfg.lambda2;
  tc.seed = derive_seed(seed, 0x7472);
  Trainer trainer(data, initial_model(spec, f.train.num_classes, tc.seed), tc, {});
  std::vector<double> acc;
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    if (s > 0) trainer.run_unsupervised_steps(cfg.stage_steps);
    acc.push_back(knn_accuracy(trainer.model().net, f.train, f.test, cfg.k));
  }
  return acc;
}

}  // namespace ssfa
