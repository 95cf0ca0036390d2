// ssfa command-line driver.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime/computation error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssfa/datamodel.hpp"
#include "ssfa/error.hpp"
#include "ssfa/eval.hpp"
#include "ssfa/experiments.hpp"
#include "ssfa/gradcheck.hpp"
#include "ssfa/mining.hpp"
#include "ssfa/network.hpp"
#include "ssfa/synth.hpp"
#include "ssfa/trainer.hpp"

namespace fs = std::filesystem;
using namespace ssfa;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kRuntime = 3;

/// Flat `key = value` config files: keys without a section belong to the
/// subcommand being run.
class SubcommandConfig : public CLI::ConfigBase {
 public:
  explicit SubcommandConfig(std::string sub) : sub_(std::move(sub)) {}
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigBase::from_config(input);
    for (auto& item : items) {
      if (item.parents.empty() && !sub_.empty()) item.parents.push_back(sub_);
    }
    return items;
  }

 private:
  std::string sub_;
};

void prepare_out(const fs::path& out, const CLI::App& sub) {
  fs::create_directories(out);
  std::ofstream cfg(out / "effective_config.txt", std::ios::trunc);
  if (!cfg) throw IoError("cannot write '" + (out / "effective_config.txt").string() + "'");
  cfg << sub.config_to_str(true, false);
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::vector<Velocity> parse_velocities(const std::string& s) {
  std::vector<Velocity> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.empty()) continue;
    Velocity v;
    char comma = 0;
    std::istringstream is(item);
    if (!(is >> v.dx >> comma >> v.dy) || comma != ',') throw ConfigError("bad velocity '" + item + "' (want dx,dy)");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("velocity list is empty");
  return out;
}

// --- synth -----------------------------------------------------------------

struct SynthOpts {
  std::string mode = "steady";
  std::size_t clips = 40;
  std::size_t clip_len = 20;
  std::size_t grid = 16;
  std::size_t shapes = 4;
  double noise = 0.05;
  std::string velocities = "1,0;-1,0;0,1;0,-1;1,1;-1,-1;1,-1;-1,1";
  std::size_t per_class = 0;
  std::size_t label_jitter = 2;
  std::size_t scene_tiles = 1;
  std::uint64_t seed = 0;
  std::string out;
};

void add_synth(CLI::App& app, SynthOpts& o) {
  auto* sub = app.add_subcommand("synth", "Generate synthetic clips (and optionally labeled stills)");
  sub->add_option("--mode", o.mode, "steady | jerky")->capture_default_str();
  sub->add_option("--clips", o.clips, "Number of clips")->capture_default_str();
  sub->add_option("--clip-len", o.clip_len, "Frames per clip")->capture_default_str();
  sub->add_option("--grid", o.grid, "Frame side length G")->capture_default_str();
  sub->add_option("--shapes", o.shapes, "Shape classes K (2..4)")->capture_default_str();
  sub->add_option("--noise", o.noise, "Pixel noise sigma")->capture_default_str();
  sub->add_option("--velocities", o.velocities, "Velocity set 'dx,dy;dx,dy;...'")->capture_default_str();
  sub->add_option("--per-class", o.per_class, "Labeled stills per class (0 = none)")->capture_default_str();
  sub->add_option("--label-jitter", o.label_jitter, "Labeled still offset range")->capture_default_str();
  sub->add_option("--scene-tiles", o.scene_tiles, "1 = one shape per clip; >1 = panning scene")->capture_default_str();
  sub->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
  sub->add_option("--out", o.out, "Output directory")->required();
}

int run_synth(const CLI::App& sub, const SynthOpts& o) {
  SynthConfig cfg;
  cfg.grid = o.grid;
  cfg.clip_len = o.clip_len;
  cfg.num_clips = o.clips;
  cfg.num_shapes = o.shapes;
  cfg.velocity_set = parse_velocities(o.velocities);
  cfg.motion_mode = parse_motion_mode(o.mode);
  cfg.noise_sigma = o.noise;
  cfg.label_jitter = o.label_jitter;
  cfg.scene_tiles = o.scene_tiles;
  cfg.seed = o.seed;
  cfg.validate();
  prepare_out(o.out, sub);
  save_unlabeled(gen_unlabeled(cfg), o.out, "clips.txt");
  if (o.per_class > 0) save_labeled(gen_labeled(cfg, o.per_class), o.out, "labeled.txt");
  std::cout << "wrote " << cfg.num_clips << " clips to " << (fs::path(o.out) / "clips.txt").string() << '\n';
  return kOk;
}

// --- fixtures --------------------------------------------------------------

struct FixtureOpts {
  std::uint64_t seed = 1;
  std::string out;
};

void add_fixtures(CLI::App& app, FixtureOpts& o) {
  auto* sub = app.add_subcommand("fixtures", "Write the canonical desk-scale experiment datasets");
  sub->add_option("--seed", o.seed, "Fixture seed")->capture_default_str();
  sub->add_option("--out", o.out, "Output directory")->required();
}

int run_fixtures(const CLI::App& sub, const FixtureOpts& o) {
  prepare_out(o.out, sub);
  const fs::path out = o.out;
  const auto steady = make_steady_fixture(SteadyExperimentConfig{}, o.seed);
  save_unlabeled(steady.clips, out / "steady", "clips.txt");
  save_unlabeled(steady.query_clips, out / "steady", "queries.txt");
  save_labeled(steady.labeled, out / "steady", "labeled.txt");
  save_labeled(steady.test, out / "steady", "test.txt");
  const auto scene = make_trend_fixture(TrendExperimentConfig{}, o.seed);
  save_unlabeled(scene.clips, out / "scene", "clips.txt");
  save_labeled(scene.train, out / "scene", "train.txt");
  save_labeled(scene.test, out / "scene", "test.txt");
  std::cout << "wrote fixtures for seed " << o.seed << " to " << out.string() << '\n';
  return kOk;
}

// --- mine ------------------------------------------------------------------

struct MineOpts {
  std::string clips;
  MiningConfig cfg;
  std::string out;
};

void add_mine(CLI::App& app, MineOpts& o) {
  auto* sub = app.add_subcommand("mine", "Mine pair and triplet tuples from an unlabeled manifest");
  sub->add_option("--clips", o.clips, "Unlabeled manifest")->required();
  sub->add_option("--T", o.cfg.T_seconds, "Temporal window in seconds")->capture_default_str();
  sub->add_option("--pair-neg-ratio", o.cfg.pair_neg_ratio, "Negatives per positive pair")->capture_default_str();
  sub->add_option("--triplet-neg-ratio", o.cfg.triplet_neg_ratio, "Negatives per positive triplet")
      ->capture_default_str();
  sub->add_option("--max-pairs", o.cfg.max_pairs, "Pair cap")->capture_default_str();
  sub->add_option("--max-triplets", o.cfg.max_triplets, "Triplet cap")->capture_default_str();
  sub->add_option("--seed", o.cfg.seed, "RNG seed")->capture_default_str();
  sub->add_option("--out", o.out, "Output directory")->required();
}

int run_mine(const CLI::App& sub, const MineOpts& o) {
  o.cfg.validate();
  const UnlabeledSet u = load_unlabeled_manifest(o.clips);
  const auto pairs = mine_pairs(u, o.cfg);
  const auto triplets = mine_triplets(u, o.cfg);
  prepare_out(o.out, sub);
  save_tuples(fs::path(o.out) / "tuples.txt", o.cfg, {pairs.samples, triplets.samples});
  nlohmann::json j;
  j["pairs"] = {{"positives", pairs.positives},
                {"negatives", pairs.negatives},
                {"achieved_ratio", pairs.achieved_ratio()},
                {"skipped_clips", pairs.skipped_clips}};
  j["triplets"] = {{"positives", triplets.positives},
                   {"negatives", triplets.negatives},
                   {"achieved_ratio", triplets.achieved_ratio()},
                   {"skipped_clips", triplets.skipped_clips}};
  write_json(j, fs::path(o.out) / "mining.json");
  std::cout << "pairs " << pairs.positives << "+/" << pairs.negatives << "- (ratio " << pairs.achieved_ratio()
            << "), triplets " << triplets.positives << "+/" << triplets.negatives << "- (ratio "
            << triplets.achieved_ratio() << ")\n";
  return kOk;
}

// --- train -----------------------------------------------------------------

struct TrainOpts {
  std::string labeled;
  std::string clips;
  std::string tuples;
  std::string method = "ssfa";
  double lambda = 0.1;
  double lambda2 = 0.3;
  std::string metric;
  TrainConfig cfg;
  std::vector<std::size_t> hidden{25};
  std::size_t features = 25;
  bool cv = false;
  std::string out;
};

void add_train(CLI::App& app, TrainOpts& o) {
  auto* sub = app.add_subcommand("train", "Train a feature network with a method preset");
  sub->add_option("--labeled", o.labeled, "Labeled manifest")->required();
  sub->add_option("--clips", o.clips, "Unlabeled manifest the tuples refer to");
  sub->add_option("--tuples", o.tuples, "Tuple file from 'mine'");
  sub->add_option("--method", o.method, "unreg | sfa1 | sfa2 | ssfa")
      ->check(CLI::IsMember({"unreg", "sfa1", "sfa2", "ssfa"}))
      ->capture_default_str();
  sub->add_option("--lambda", o.lambda, "Weight of L_u")->capture_default_str();
  sub->add_option("--lambda2", o.lambda2, "Weight of R3 inside L_u")->capture_default_str();
  sub->add_option("--metric", o.metric, "l2 | l1 (default per method)");
  sub->add_option("--delta-pair", o.cfg.margins.delta_pair, "Margin of R2")->capture_default_str();
  sub->add_option("--delta-triplet", o.cfg.margins.delta_triplet, "Margin of R3")->capture_default_str();
  sub->add_option("--lr", o.cfg.lr, "Base learning rate")->capture_default_str();
  sub->add_option("--momentum", o.cfg.momentum, "Nesterov momentum")->capture_default_str();
  sub->add_option("--batch-labeled", o.cfg.batch_labeled, "Labeled items per step")->capture_default_str();
  sub->add_option("--batch-pairs", o.cfg.batch_pairs, "Pairs per step")->capture_default_str();
  sub->add_option("--batch-triplets", o.cfg.batch_triplets, "Triplets per step")->capture_default_str();
  sub->add_option("--epochs", o.cfg.max_epochs, "Maximum epochs")->capture_default_str();
  sub->add_option("--patience", o.cfg.patience, "Early-stopping patience in epochs")->capture_default_str();
  sub->add_option("--val-fraction", o.cfg.val_fraction, "Validation share of the labeled set")
      ->capture_default_str();
  sub->add_option("--hidden", o.hidden, "Hidden layer widths")->capture_default_str();
  sub->add_option("--features", o.features, "Feature dimension D")->capture_default_str();
  sub->add_option("--seed", o.cfg.seed, "RNG seed")->capture_default_str();
  sub->add_flag("--cv", o.cv, "Select hyperparameters with greedy cross-validation first");
  sub->add_option("--out", o.out, "Output directory")->required();
}

int run_train(const CLI::App& sub, TrainOpts o) {
  TrainConfig cfg = o.cfg;
  cfg.margins.metric = Metric::L2;
  if (o.method == "unreg") {
    cfg.lambda = 0.0;
    cfg.lambda2 = 0.0;
  } else {
    if (!(o.lambda > 0.0)) throw ConfigError("--method " + o.method + " needs --lambda > 0");
    cfg.lambda = o.lambda;
    cfg.lambda2 = o.method == "ssfa" ? o.lambda2 : 0.0;
    if (o.method == "ssfa" && !(o.lambda2 > 0.0)) throw ConfigError("--method ssfa needs --lambda2 > 0");
    if (o.method == "sfa1") cfg.margins.metric = Metric::L1;
  }
  if (!o.metric.empty()) cfg.margins.metric = parse_metric(o.metric);
  cfg.validate();

  const LabeledSet s = load_labeled_manifest(o.labeled);
  UnlabeledSet u;
  TupleFile tuples;
  if (o.method != "unreg") {
    if (o.clips.empty() || o.tuples.empty()) throw ConfigError("--method " + o.method + " needs --clips and --tuples");
    u = load_unlabeled_manifest(o.clips);
    tuples = load_tuples(o.tuples);
    if (o.method != "ssfa") tuples.triplets.clear();
  }
  if (s.size() == 0) throw ConfigError("labeled set is empty");
  const PreparedData data = prepare(s, o.method == "unreg" ? nullptr : &u, tuples.pairs, tuples.triplets);
  const LayerSpec spec = experiment_spec(s.images.front().pixels.size(), o.hidden, o.features);
  spec.validate();

  prepare_out(o.out, sub);
  const fs::path out = o.out;
  if (o.cv) {
    CvGrids grids;
    if (o.method == "unreg") grids.lambda.clear();
    if (o.method != "ssfa") {
      grids.lambda2.clear();
      grids.delta_triplet.clear();
    }
    const CvResult cv = greedy_cv(data, spec, cfg, grids);
    save_cv_log(cv.log, out / "cv_log.csv");
    cfg = cv.best;
  }
  const TrainResult r = train(data, spec, cfg);
  save_checkpoint(r.model, out / "checkpoint.bin");
  save_history_csv(r.history, out / "history.csv");
  nlohmann::json j;
  j["method"] = o.method;
  j["lr"] = cfg.lr;
  j["lambda"] = cfg.lambda;
  j["lambda2"] = cfg.lambda2;
  j["delta_pair"] = cfg.margins.delta_pair;
  j["delta_triplet"] = cfg.margins.delta_triplet;
  j["metric"] = to_string(cfg.margins.metric);
  j["best_epoch"] = r.best_epoch;
  j["best_val_loss"] = r.best_val_loss;
  j["epochs_run"] = r.history.size();
  write_json(j, out / "summary.json");
  std::cout << "best epoch " << r.best_epoch << " val_loss " << r.best_val_loss << '\n';
  return kOk;
}

// --- eval ------------------------------------------------------------------

struct EvalOpts {
  std::string checkpoint;
  std::string clips;
  std::string train;
  std::string test;
  double T = 2.0;
  std::size_t queries = 200;
  std::size_t pool_n = 5;
  std::size_t k = 5;
  bool exclude_self = false;
  std::uint64_t seed = 0;
  std::string out;
};

void add_eval_common(CLI::App* sub, EvalOpts& o) {
  sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  sub->add_option("--out", o.out, "Output directory")->required();
}

void add_evals(CLI::App& app, EvalOpts& seq, EvalOpts& cls, EvalOpts& knn) {
  auto* s = app.add_subcommand("eval-seqcomp", "Sequence-completion mean percentile rank");
  add_eval_common(s, seq);
  s->add_option("--clips", seq.clips, "Unlabeled manifest of held-out clips")->required();
  s->add_option("--T", seq.T, "Temporal window in seconds")->capture_default_str();
  s->add_option("--queries", seq.queries, "Number of queries")->capture_default_str();
  s->add_option("--pool-n", seq.pool_n, "Random frames per represented clip")->capture_default_str();
  s->add_option("--seed", seq.seed, "RNG seed")->capture_default_str();

  auto* c = app.add_subcommand("eval-cls", "Linear-classifier test accuracy");
  add_eval_common(c, cls);
  c->add_option("--test", cls.test, "Labeled test manifest")->required();

  auto* k = app.add_subcommand("eval-knn", "kNN test accuracy in feature space");
  add_eval_common(k, knn);
  k->add_option("--train", knn.train, "Labeled reference manifest")->required();
  k->add_option("--test", knn.test, "Labeled test manifest")->required();
  k->add_option("--k", knn.k, "Neighbours")->capture_default_str();
  k->add_flag("--exclude-self", knn.exclude_self, "Skip train items identical in index to the query");
}

int run_eval_seqcomp(const CLI::App& sub, const EvalOpts& o, std::size_t threads) {
  const Model m = load_checkpoint(o.checkpoint);
  const UnlabeledSet u = load_unlabeled_manifest(o.clips);
  const auto queries = make_queries(u, o.T, o.queries, o.seed);
  const auto pool = build_pool(queries, u, o.pool_n, o.seed);
  EvalReport r = evaluate_seqcomp(queries, pool, m.net, u, threads);
  r.config = {{"T", o.T}, {"queries", queries.size()}, {"pool_n", o.pool_n}, {"seed", o.seed}};
  prepare_out(o.out, sub);
  save_report(r, fs::path(o.out) / "report.json");
  save_ranks_csv(queries, r, fs::path(o.out) / "ranks.csv");
  std::cout << "eta " << r.eta << " over " << queries.size() << " queries, pool " << r.pool_size << '\n';
  return kOk;
}

int run_eval_cls(const CLI::App& sub, const EvalOpts& o) {
  const Model m = load_checkpoint(o.checkpoint);
  const LabeledSet test = load_labeled_manifest(o.test);
  if (test.num_classes != static_cast<std::size_t>(m.classifier.W.rows())) {
    throw ShapeError("checkpoint has " + std::to_string(m.classifier.W.rows()) + " classes, test set has " +
                     std::to_string(test.num_classes));
  }
  EvalReport r;
  r.accuracy = linear_accuracy(m, test);
  r.config = {{"test_size", test.size()}};
  prepare_out(o.out, sub);
  save_report(r, fs::path(o.out) / "report.json");
  std::cout << "accuracy " << *r.accuracy << '\n';
  return kOk;
}

int run_eval_knn(const CLI::App& sub, const EvalOpts& o) {
  const Model m = load_checkpoint(o.checkpoint);
  const LabeledSet train = load_labeled_manifest(o.train);
  const LabeledSet test = load_labeled_manifest(o.test);
  EvalReport r;
  r.accuracy = knn_accuracy(m.net, train, test, o.k, o.exclude_self);
  r.config = {{"k", o.k}, {"exclude_self", o.exclude_self}, {"train_size", train.size()}, {"test_size", test.size()}};
  prepare_out(o.out, sub);
  save_report(r, fs::path(o.out) / "report.json");
  std::cout << "accuracy " << *r.accuracy << '\n';
  return kOk;
}

// --- gradcheck -------------------------------------------------------------

struct GradOpts {
  GradcheckConfig cfg;
  std::string metric = "l2";
  std::string out;
};

void add_gradcheck(CLI::App& app, GradOpts& o) {
  auto* sub = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  sub->add_option("--points", o.cfg.points, "Random points per term")->capture_default_str();
  sub->add_option("--step", o.cfg.h, "Central-difference step h")->capture_default_str();
  sub->add_option("--tolerance", o.cfg.tolerance, "Max relative error")->capture_default_str();
  sub->add_option("--metric", o.metric, "l2 | l1")->capture_default_str();
  sub->add_option("--seed", o.cfg.seed, "RNG seed")->capture_default_str();
  sub->add_flag("--flip-sign", o.cfg.flip_sign, "Test hook: negate analytic gradients")->group("Test hooks");
  sub->add_option("--out", o.out, "Optional output directory for report.json");
}

int run_gradcheck_cmd(const CLI::App& sub, GradOpts o) {
  o.cfg.metric = parse_metric(o.metric);
  if (o.cfg.points < 1 || !(o.cfg.h > 0.0)) throw ConfigError("--points must be >= 1 and --step > 0");
  const GradcheckReport report = run_gradcheck(o.cfg);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& t : report.terms) {
    std::cout << (t.passed ? "PASS " : "FAIL ") << t.name << " points=" << t.points
              << " max_rel_error=" << format_double(t.max_rel_error) << '\n';
    j.push_back({{"term", t.name}, {"points", t.points}, {"max_rel_error", t.max_rel_error}, {"passed", t.passed}});
  }
  if (!o.out.empty()) {
    prepare_out(o.out, sub);
    write_json({{"tolerance", o.cfg.tolerance}, {"h", o.cfg.h}, {"terms", j}}, fs::path(o.out) / "report.json");
  }
  return report.passed() ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssfa: steady feature analysis toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key = value config file; flags override it");
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  SynthOpts synth;
  FixtureOpts fixtures;
  MineOpts mine;
  TrainOpts train_opts;
  EvalOpts seq, cls, knn;
  GradOpts grad;
  add_synth(app, synth);
  add_fixtures(app, fixtures);
  add_mine(app, mine);
  add_train(app, train_opts);
  add_evals(app, seq, cls, knn);
  add_gradcheck(app, grad);

  std::string chosen;
  for (int i = 1; i < argc && chosen.empty(); ++i) {
    for (const auto* sub : app.get_subcommands({})) {
      if (sub->get_name() == argv[i]) chosen = argv[i];
    }
  }
  app.config_formatter(std::make_shared<SubcommandConfig>(chosen));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "synth") return run_synth(*sub, synth);
    if (name == "fixtures") return run_fixtures(*sub, fixtures);
    if (name == "mine") return run_mine(*sub, mine);
    if (name == "train") return run_train(*sub, train_opts);
    if (name == "eval-seqcomp") return run_eval_seqcomp(*sub, seq, threads);
    if (name == "eval-cls") return run_eval_cls(*sub, cls);
    if (name == "eval-knn") return run_eval_knn(*sub, knn);
    if (name == "gradcheck") return run_gradcheck_cmd(*sub, grad);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
