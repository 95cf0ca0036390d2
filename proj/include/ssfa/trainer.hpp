#pragma once

// Joint minimization of  L_s + lambda * (R2 + lambda2 * R3)  with minibatch
// Nesterov SGD over mixed batches, early stopping on validation
// classification loss, and the staged greedy hyperparameter search.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssfa/datamodel.hpp"
#include "ssfa/error.hpp"
#include "ssfa/losses.hpp"
#include "ssfa/mining.hpp"
#include "ssfa/network.hpp"
#include "ssfa/rng.hpp"

namespace ssfa {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double lambda = 0.0;
  double lambda2 = 0.0;
  Margins margins;
  std::size_t batch_labeled = 16;
  std::size_t batch_pairs = 32;
  std::size_t batch_triplets = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(lambda >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("lambda and lambda2 must be >= 0");
    if (batch_labeled < 1) throw ConfigError("batch_labeled must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
    margins.validate();
  }
};

// ---------------------------------------------------------------------------
// Vector-space helpers for plain Eigen vectors, so the optimizer can be
// exercised on toy problems as well as on Model.

inline void axpy(double a, const Vector& x, Vector& y) { y += a * x; }
inline void scale(double a, Vector& y) { y *= a; }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// One Nesterov step in lookahead form:
///   g = grad f(theta + mu * v);  v <- mu * v - lr * g;  theta <- theta + v.
/// `grad_fn(lookahead)` returns the gradient as a list of named terms that
/// are summed in order. A non-finite term raises OptimizerError naming it.
template <class P, class GradFn>
auto nesterov_step(P& theta, P& velocity, GradFn&& grad_fn, double lr, double mu) {
  P lookahead = theta;
  axpy(mu, velocity, lookahead);
  auto terms = grad_fn(static_cast<const P&>(lookahead));
  if (terms.empty()) throw ContractViolation("nesterov_step: gradient has no terms");
  for (const auto& t : terms) {
    if (!all_finite(t.grad)) throw OptimizerError(t.name);
  }
  P grad = terms.front().grad;
  for (std::size_t i = 1; i < terms.size(); ++i) axpy(1.0, terms[i].grad, grad);
  scale(mu, velocity);
  axpy(-lr, grad, velocity);
  axpy(1.0, velocity, theta);
  return terms;
}

// ---------------------------------------------------------------------------
// Training data with every frame preprocessed once and flattened into columns.

struct TupleRef2 {
  std::size_t clip, j, k;
  int p;
};
struct TupleRef3 {
  std::size_t clip, l, m, n;
  int p;
};

struct PreparedData {
  Matrix labeled_x;  // pixels x N_s
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::vector<Matrix> clip_frames;  // per clip: pixels x frames
  std::vector<TupleRef2> pairs;
  std::vector<TupleRef3> triplets;

  std::size_t input_dim() const { return static_cast<std::size_t>(labeled_x.rows()); }
};

inline Vector flatten_preprocessed(const Frame& f) {
  const Frame p = preprocess(f);
  return Eigen::Map<const Vector>(p.pixels.data(), static_cast<Eigen::Index>(p.pixels.size()));
}

inline Matrix frames_to_matrix(const std::vector<Frame>& frames) {
  if (frames.empty()) return {};
  Matrix x(static_cast<Eigen::Index>(frames.front().size()), static_cast<Eigen::Index>(frames.size()));
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].size() != frames.front().size()) throw ShapeError("frames differ in size");
    x.col(static_cast<Eigen::Index>(i)) = flatten_preprocessed(frames[i]);
  }
  return x;
}

inline PreparedData prepare(const LabeledSet& s, const UnlabeledSet* u, const std::vector<PairSample>& pairs,
                            const std::vector<TripletSample>& triplets) {
  s.validate();
  PreparedData d;
  d.labeled_x = frames_to_matrix(s.images);
  d.labels = s.labels;
  d.num_classes = s.num_classes;
  if (!pairs.empty() || !triplets.empty()) {
    if (!u) throw ContractViolation("prepare: tuples given without their unlabeled set");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < u->clips.size(); ++c) {
      index.emplace(u->clips[c].clip_id, c);
      d.clip_frames.push_back(frames_to_matrix(u->clips[c].frames));
      if (!s.images.empty() && d.clip_frames.back().rows() != d.labeled_x.rows()) {
        throw ShapeError("clip '" + u->clips[c].clip_id + "' frame size differs from labeled images");
      }
    }
    auto lookup = [&](const std::string& id, std::initializer_list<std::size_t> frames) {
      auto it = index.find(id);
      if (it == index.end()) throw ValidationError("tuple references unknown clip '" + id + "'");
      for (auto f : frames) {
        if (f >= static_cast<std::size_t>(d.clip_frames[it->second].cols())) {
          throw ValidationError("tuple frame index out of range in clip '" + id + "'");
        }
      }
      return it->second;
    };
    for (const auto& t : pairs) d.pairs.push_back({lookup(t.clip_id, {t.j, t.k}), t.j, t.k, t.p});
    for (const auto& t : triplets) d.triplets.push_back({lookup(t.clip_id, {t.l, t.m, t.n}), t.l, t.m, t.n, t.p});
  }
  return d;
}

/// Stratified split of labeled indices: round(val_fraction * n_c) items per
/// class go to validation, always leaving at least one for training.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const std::vector<std::size_t>& labels, std::size_t num_classes, double val_fraction, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x73706c));
  std::vector<std::size_t> train, val;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    rng.shuffle(members);
    std::size_t nval = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(members.size()) + 0.5));
    if (members.size() > 0) nval = std::min(nval, members.size() - 1);
    for (std::size_t i = 0; i < members.size(); ++i) (i < nval ? val : train).push_back(members[i]);
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double ls = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

using TrainHistory = std::vector<EpochRecord>;

struct TrainResult {
  Model model;  // parameters from the best-validation epoch
  TrainHistory history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

inline Matrix gather_columns(const Matrix& src, const std::vector<std::size_t>& idx) {
  Matrix out(src.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = src.col(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// Mean softmax loss and accuracy of (theta, W) on the given columns.
inline std::pair<double, double> classification_loss(const Model& model, const Matrix& x,
                                                     const std::vector<std::size_t>& labels) {
  const Matrix z = embed(model.net, x);
  const double loss = softmax_loss(model.classifier, z, labels).value;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < z.cols(); ++i) {
    if (classify(model.classifier, z.col(i)).prediction == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return {loss, static_cast<double>(correct) / static_cast<double>(z.cols())};
}

/// An index stream that cycles through [0, n) in a fresh seeded permutation per pass.
class ShuffledStream {
 public:
  ShuffledStream(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    if (order_.empty()) return out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Stateful optimizer loop over one PreparedData. One parameter set and one
/// velocity buffer; every replica of the feature stack reads the same Model.
class Trainer {
 public:
  Trainer(const PreparedData& data, Model init, const TrainConfig& cfg, std::vector<std::size_t> train_idx)
      : data_(data),
        cfg_(cfg),
        model_(std::move(init)),
        velocity_(Model::zeros_like(model_)),
        train_idx_(std::move(train_idx)),
        labeled_rng_(derive_seed(cfg.seed, 0x6c6162)),
        pair_stream_(data.pairs.size(), derive_seed(cfg.seed, 0x706169)),
        triplet_stream_(data.triplets.size(), derive_seed(cfg.seed, 0x747269)) {
    cfg_.validate();
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }

  /// Assemble the tuple part of a step's batch.
  void fill_tuples(ObjectiveBatch& b, bool want_pairs, bool want_triplets) {
    if (want_pairs && !data_.pairs.empty() && cfg_.batch_pairs > 0) {
      const auto idx = pair_stream_.next(cfg_.batch_pairs);
      const auto dim = static_cast<Eigen::Index>(data_.clip_frames.front().rows());
      b.xj.resize(dim, static_cast<Eigen::Index>(idx.size()));
      b.xk.resize(dim, static_cast<Eigen::Index>(idx.size()));
      b.pair_p.clear();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& t = data_.pairs[idx[i]];
        b.xj.col(static_cast<Eigen::Index>(i)) = data_.clip_frames[t.clip].col(static_cast<Eigen::Index>(t.j));
        b.xk.col(static_cast<Eigen::Index>(i)) = data_.clip_frames[t.clip].col(static_cast<Eigen::Index>(t.k));
        b.pair_p.push_back(t.p);
      }
    }
    if (want_triplets && !data_.triplets.empty() && cfg_.batch_triplets > 0) {
      const auto idx = triplet_stream_.next(cfg_.batch_triplets);
      const auto dim = static_cast<Eigen::Index>(data_.clip_frames.front().rows());
      const auto n = static_cast<Eigen::Index>(idx.size());
      b.xl.resize(dim, n);
      b.xm.resize(dim, n);
      b.xn.resize(dim, n);
      b.triplet_p.clear();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& t = data_.triplets[idx[i]];
        const auto c = static_cast<Eigen::Index>(i);
        b.xl.col(c) = data_.clip_frames[t.clip].col(static_cast<Eigen::Index>(t.l));
        b.xm.col(c) = data_.clip_frames[t.clip].col(static_cast<Eigen::Index>(t.m));
        b.xn.col(c) = data_.clip_frames[t.clip].col(static_cast<Eigen::Index>(t.n));
        b.triplet_p.push_back(t.p);
      }
    }
  }

  /// Take one optimizer step on `batch` with the given weights; returns the
  /// objective evaluated at the lookahead point.
  Objective step(const ObjectiveBatch& batch, const ObjectiveWeights& w) {
    Objective last;
    nesterov_step(
        model_, velocity_,
        [&](const Model& lookahead) {
          last = total_objective(batch, lookahead, w, cfg_.margins);
          return last.terms;
        },
        cfg_.lr, cfg_.momentum);
    return last;
  }

  /// One pass over the training part of the labeled set. Returns mean term values.
  EpochRecord run_epoch() {
    std::vector<std::size_t> order = train_idx_;
    labeled_rng_.shuffle(order);
    const ObjectiveWeights w{1.0, cfg_.lambda, cfg_.lambda2};
    const bool tuples = cfg_.lambda != 0.0;
    EpochRecord rec;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_labeled) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_labeled);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      ObjectiveBatch b;
      b.x_labeled = gather_columns(data_.labeled_x, idx);
      for (auto i : idx) b.labels.push_back(data_.labels[i]);
      fill_tuples(b, tuples, tuples && cfg_.lambda2 != 0.0);
      const Objective obj = step(b, w);
      rec.ls += obj.ls;
      rec.r2 += obj.r2;
      rec.r3 += obj.r3;
      ++steps;
    }
    rec.ls /= static_cast<double>(steps);
    rec.r2 /= static_cast<double>(steps);
    rec.r3 /= static_cast<double>(steps);
    return rec;
  }

  /// Steps on L_u = R2 + lambda2 * R3 alone (no supervised term).
  void run_unsupervised_steps(std::size_t steps) {
    const ObjectiveWeights w{0.0, 1.0, cfg_.lambda2};
    for (std::size_t s = 0; s < steps; ++s) {
      ObjectiveBatch b;
      fill_tuples(b, true, cfg_.lambda2 != 0.0);
      step(b, w);
    }
  }

 private:
  const PreparedData& data_;
  TrainConfig cfg_;
  Model model_;
  Model velocity_;
  std::vector<std::size_t> train_idx_;
  Rng labeled_rng_;
  ShuffledStream pair_stream_;
  ShuffledStream triplet_stream_;
};

/// Initial (theta, W) for a run: Glorot for both, seeded from cfg.seed.
inline Model initial_model(const LayerSpec& spec, std::size_t num_classes, std::uint64_t seed) {
  return {init_glorot(spec, seed), init_classifier(num_classes, spec.output_dim(), seed)};
}

/// Train until max_epochs or until the validation classification loss has
/// not improved for `patience` epochs; returns the best-validation parameters.
inline TrainResult train(const PreparedData& data, const LayerSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (data.labeled_x.cols() == 0) throw ContractViolation("train: labeled set is empty");
  if (spec.input_dim() != data.input_dim()) throw ShapeError("train: layer spec input does not match image size");
  if (cfg.lambda != 0.0 && data.pairs.empty() && (data.triplets.empty() || cfg.lambda2 == 0.0)) {
    throw ConfigError("train: lambda > 0 requires pairs or triplets");
  }
  auto [train_idx, val_idx] = stratified_split(data.labels, data.num_classes, cfg.val_fraction, cfg.seed);
  if (val_idx.empty()) throw ConfigError("train: validation split is empty");
  if (train_idx.empty()) throw ConfigError("train: training split is empty");
  const Matrix val_x = gather_columns(data.labeled_x, val_idx);
  std::vector<std::size_t> val_y;
  for (auto i : val_idx) val_y.push_back(data.labels[i]);

  Trainer trainer(data, initial_model(spec, data.num_classes, cfg.seed), cfg, train_idx);
  TrainResult result;
  result.model = trainer.model();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec = trainer.run_epoch();
    rec.epoch = epoch;
    std::tie(rec.val_loss, rec.val_acc) = classification_loss(trainer.model(), val_x, val_y);
    result.history.push_back(rec);
    if (!std::isfinite(rec.val_loss)) throw OptimizerError("val_loss");
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.model = trainer.model();
      since_best = 0;
    } else if (++since_best >= cfg.patience && cfg.patience > 0) {
      break;
    }
  }
  return result;
}

inline TrainResult train(const LabeledSet& s, const UnlabeledSet* u, const std::vector<PairSample>& pairs,
                         const std::vector<TripletSample>& triplets, const LayerSpec& spec, const TrainConfig& cfg) {
  const PreparedData data = prepare(s, u, cfg.lambda != 0.0 ? pairs : std::vector<PairSample>{},
                                    cfg.lambda != 0.0 ? triplets : std::vector<TripletSample>{});
  return train(data, spec, cfg);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void save_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "epoch,L_s,R2,R3,val_loss,val_acc\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.ls) << ',' << format_double(r.r2) << ',' << format_double(r.r3) << ','
        << format_double(r.val_loss) << ',' << format_double(r.val_acc) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Greedy cross-validation

/// {lo, lo*step, lo*step^2, ...} up to hi (inclusive within rounding).
inline std::vector<double> log_grid(double lo, double hi, double step) {
  std::vector<double> grid;
  for (int i = 0;; ++i) {
    const double v = lo * std::pow(step, i);
    if (v > hi * (1.0 + 1e-9)) break;
    grid.push_back(v);
  }
  return grid;
}

struct CvGrids {
  std::vector<double> lr{0.1, 0.01, 0.001, 0.0001};
  std::vector<double> lambda = log_grid(1e-2, std::pow(10.0, 1.5), std::sqrt(10.0));
  std::vector<double> lambda2 = log_grid(1e-2, std::pow(10.0, 1.5), std::sqrt(10.0));
  std::vector<double> delta_triplet{0.0, 0.1, 1.0};
};

struct CvLogRow {
  std::string stage;
  double candidate = 0.0;
  double val_loss = 0.0;
};

struct CvResult {
  TrainConfig best;
  std::vector<CvLogRow> log;
};

/// Staged search, each stage keeping the argmin of validation classification
/// loss (ties go to the smaller candidate):
///   lr (lambda = lambda2 = 0), lambda (lambda2 = 0), lambda2, delta_triplet.
/// Stages with an empty grid are skipped.
inline CvResult greedy_cv(const PreparedData& data, const LayerSpec& spec, const TrainConfig& base,
                          const CvGrids& grids) {
  if (grids.lr.empty() && grids.lambda.empty() && grids.lambda2.empty() && grids.delta_triplet.empty()) {
    throw ConfigError("greedy_cv: all grids are empty");
  }
  CvResult result{base, {}};
  result.best.lambda = 0.0;
  result.best.lambda2 = 0.0;

  auto run_stage = [&](const std::string& stage, std::vector<double> grid, auto apply) {
    if (grid.empty()) return;
    std::sort(grid.begin(), grid.end());
    double best_loss = std::numeric_limits<double>::infinity();
    std::optional<double> best_value;
    for (double v : grid) {
      TrainConfig cfg = result.best;
      apply(cfg, v);
      double loss = std::numeric_limits<double>::infinity();
      try {
        loss = train(data, spec, cfg).best_val_loss;
      } catch (const OptimizerError&) {
      }
      result.log.push_back({stage, v, loss});
      if (std::isfinite(loss) && loss < best_loss) {
        best_loss = loss;
        best_value = v;
      }
    }
    if (!best_value) throw SearchError(stage);
    apply(result.best, *best_value);
  };

  run_stage("lr", grids.lr, [](TrainConfig& c, double v) { c.lr = v; });
  if (!data.pairs.empty() || !data.triplets.empty()) {
    run_stage("lambda", grids.lambda, [](TrainConfig& c, double v) { c.lambda = v; });
    if (!data.triplets.empty() && result.best.lambda > 0.0) {
      run_stage("lambda2", grids.lambda2, [](TrainConfig& c, double v) { c.lambda2 = v; });
      if (result.best.lambda2 > 0.0) {
        run_stage("delta_triplet", grids.delta_triplet, [](TrainConfig& c, double v) { c.margins.delta_triplet = v; });
      }
    }
  }
  return result;
}

inline void save_cv_log(const std::vector<CvLogRow>& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "stage,candidate,val_loss\n";
  for (const auto& r : log) out << r.stage << ',' << format_double(r.candidate) << ',' << format_double(r.val_loss) << '\n';
}

}  // namespace ssfa
