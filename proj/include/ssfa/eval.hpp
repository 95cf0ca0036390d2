#pragma once

// Measurement protocols: sequence completion by linear extrapolation in
// feature space (mean percentile rank), linear-classifier accuracy and kNN
// accuracy.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ssfa/datamodel.hpp"
#include "ssfa/error.hpp"
#include "ssfa/mining.hpp"
#include "ssfa/network.hpp"
#include "ssfa/rng.hpp"
#include "ssfa/trainer.hpp"

namespace ssfa {

/// Observed frames t1 < t2 of a clip and the held-out completion t3, evenly spaced.
struct QueryPair {
  std::string clip_id;
  std::size_t t1 = 0;
  std::size_t t2 = 0;
  std::size_t t3 = 0;

  void validate() const {
    if (!(t1 < t2 && t2 < t3 && t2 - t1 == t3 - t2)) throw ContractViolation("query is not an evenly spaced triplet");
  }
};

struct PoolEntry {
  std::string clip_id;
  std::size_t index = 0;

  friend bool operator==(const PoolEntry&, const PoolEntry&) = default;
};

struct CandidatePool {
  std::vector<PoolEntry> entries;
  std::vector<Frame> images;

  std::size_t size() const { return entries.size(); }

  std::optional<std::size_t> find(const std::string& clip_id, std::size_t index) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].clip_id == clip_id && entries[i].index == index) return i;
    }
    return std::nullopt;
  }
};

/// 2 z2 - z1.
inline Vector extrapolate(const Vector& z1, const Vector& z2) {
  if (z1.size() != z2.size()) throw ShapeError("extrapolate: dimension mismatch");
  return 2.0 * z2 - z1;
}

/// Sample query pairs with the positive-triplet rule (spacing 1..T frames).
inline std::vector<QueryPair> make_queries(const UnlabeledSet& u, double t_seconds, std::size_t count,
                                           std::uint64_t seed) {
  std::vector<QueryPair> out;
  // Held-out clips may be too short for buffered negatives; enumerate positives directly.
  std::vector<std::pair<std::size_t, Triple>> candidates;
  for (std::size_t c = 0; c < u.clips.size(); ++c) {
    const auto w = u.clips[c].window_frames(t_seconds);
    for (const auto& t : triplet_candidates(u.clips[c].frames.size(), w).first) candidates.push_back({c, t});
  }
  Rng rng(derive_seed(seed, 0x717279));
  for (auto r : mining_detail::floyd_sample(rng, candidates.size(), std::min(count, candidates.size()))) {
    const auto& [c, t] = candidates[r];
    out.push_back({u.clips[c].clip_id, std::get<0>(t), std::get<1>(t), std::get<2>(t)});
  }
  return out;
}

/// Query images, then ground truths, then `n_per_video` random frames of
/// every clip represented so far; duplicates (same clip and index) dropped.
inline CandidatePool build_pool(const std::vector<QueryPair>& queries, const UnlabeledSet& u, std::size_t n_per_video,
                                std::uint64_t seed) {
  CandidatePool pool;
  std::map<std::pair<std::string, std::size_t>, std::size_t> seen;
  std::vector<std::string> clip_order;
  auto add = [&](const std::string& clip_id, std::size_t index) {
    if (!seen.emplace(std::pair{clip_id, index}, pool.size()).second) return;
    const Clip& clip = u.clip(clip_id);
    if (index >= clip.frames.size()) throw ContractViolation("pool frame index out of range");
    if (std::find(clip_order.begin(), clip_order.end(), clip_id) == clip_order.end()) clip_order.push_back(clip_id);
    pool.entries.push_back({clip_id, index});
    pool.images.push_back(clip.frames[index]);
  };
  for (const auto& q : queries) {
    q.validate();
    add(q.clip_id, q.t1);
    add(q.clip_id, q.t2);
  }
  for (const auto& q : queries) add(q.clip_id, q.t3);

  Rng rng(derive_seed(seed, 0x706f6f));
  const std::vector<std::string> represented = clip_order;
  for (const auto& id : represented) {
    const Clip& clip = u.clip(id);
    for (auto idx : sample_without_replacement(rng, clip.frames.size(), n_per_video)) add(id, idx);
  }
  return pool;
}

/// Features of every pool image (columns in pool order).
inline Matrix embed_pool(const CandidatePool& pool, const NetworkParams& net) {
  return embed(net, frames_to_matrix(pool.images));
}

/// 1 + number of other candidates strictly closer (L2) to `target` than the ground truth.
inline std::size_t rank_of(const Vector& target, const Matrix& pool_features, std::size_t gt_index) {
  if (gt_index >= static_cast<std::size_t>(pool_features.cols())) throw ContractViolation("ground truth not in pool");
  const double d_gt = (pool_features.col(static_cast<Eigen::Index>(gt_index)) - target).norm();
  std::size_t rank = 1;
  for (Eigen::Index c = 0; c < pool_features.cols(); ++c) {
    if (static_cast<std::size_t>(c) == gt_index) continue;
    if ((pool_features.col(c) - target).norm() < d_gt) ++rank;
  }
  return rank;
}

inline std::size_t seqcomp_rank(const QueryPair& q, const CandidatePool& pool, const Matrix& pool_features,
                                const NetworkParams& net, const UnlabeledSet& u) {
  q.validate();
  const auto gt = pool.find(q.clip_id, q.t3);
  if (!gt) throw ContractViolation("seqcomp_rank: ground truth absent from pool");
  const Clip& clip = u.clip(q.clip_id);
  const Matrix z = embed(net, frames_to_matrix({clip.frames.at(q.t1), clip.frames.at(q.t2)}));
  return rank_of(extrapolate(z.col(0), z.col(1)), pool_features, *gt);
}

inline std::size_t seqcomp_rank(const QueryPair& q, const CandidatePool& pool, const NetworkParams& net,
                                const UnlabeledSet& u) {
  return seqcomp_rank(q, pool, embed_pool(pool, net), net, u);
}

/// Mean percentile rank: mean(r / pool_size) * 100.
inline double eta(const std::vector<std::size_t>& ranks, std::size_t pool_size) {
  if (ranks.empty()) throw ContractViolation("eta: no ranks");
  double sum = 0.0;
  for (auto r : ranks) {
    if (r < 1 || r > pool_size) throw ContractViolation("eta: rank outside [1, pool_size]");
    sum += static_cast<double>(r) / static_cast<double>(pool_size);
  }
  return 100.0 * sum / static_cast<double>(ranks.size());
}

/// Run `fn(i)` for i in [0, n) on `threads` workers; results land by index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& w : workers) w.join();
}

struct EvalReport {
  double eta = 0.0;
  std::vector<std::size_t> ranks;
  std::size_t pool_size = 0;
  std::optional<double> accuracy;
  nlohmann::json config = nlohmann::json::object();
};

inline EvalReport evaluate_seqcomp(const std::vector<QueryPair>& queries, const CandidatePool& pool,
                                   const NetworkParams& net, const UnlabeledSet& u, std::size_t threads = 1) {
  const Matrix features = embed_pool(pool, net);
  EvalReport report;
  report.pool_size = pool.size();
  report.ranks.resize(queries.size());
  parallel_for(queries.size(), threads,
               [&](std::size_t i) { report.ranks[i] = seqcomp_rank(queries[i], pool, features, net, u); });
  report.eta = eta(report.ranks, pool.size());
  return report;
}

inline double linear_accuracy(const Model& model, const LabeledSet& test) {
  if (test.size() == 0) throw ContractViolation("linear_accuracy: empty test set");
  const Matrix z = embed(model.net, frames_to_matrix(test.images));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (classify(model.classifier, z.col(static_cast<Eigen::Index>(i))).prediction == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

/// Majority vote over the k nearest training features (L2). Distance ties
/// go to the lower training index; vote ties go to the tied class whose
/// member is nearest. With `exclude_self`, train item i is skipped for test
/// item i (train and test are the same set).
inline std::vector<std::size_t> knn_predict(const Matrix& train_z, const std::vector<std::size_t>& train_y,
                                            const Matrix& test_z, std::size_t k, bool exclude_self = false) {
  const std::size_t available = static_cast<std::size_t>(train_z.cols()) - (exclude_self ? 1 : 0);
  if (k < 1 || available < k) throw ContractViolation("knn: need 1 <= k <= training size");
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(test_z.cols()));
  std::vector<std::pair<double, std::size_t>> dist;
  for (Eigen::Index t = 0; t < test_z.cols(); ++t) {
    dist.clear();
    for (Eigen::Index i = 0; i < train_z.cols(); ++i) {
      if (exclude_self && i == t) continue;
      dist.emplace_back((train_z.col(i) - test_z.col(t)).squaredNorm(), static_cast<std::size_t>(i));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::map<std::size_t, std::size_t> votes;
    std::map<std::size_t, std::size_t> nearest_rank;  // class -> position of its nearest member
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t y = train_y[dist[r].second];
      ++votes[y];
      nearest_rank.emplace(y, r);
    }
    std::size_t best = 0, best_votes = 0, best_rank = k;
    for (const auto& [y, v] : votes) {
      if (v > best_votes || (v == best_votes && nearest_rank[y] < best_rank)) {
        best = y;
        best_votes = v;
        best_rank = nearest_rank[y];
      }
    }
    out.push_back(best);
  }
  return out;
}

inline double knn_accuracy(const NetworkParams& net, const LabeledSet& train, const LabeledSet& test, std::size_t k,
                           bool exclude_self = false) {
  if (test.size() == 0) throw ContractViolation("knn_accuracy: empty test set");
  const Matrix train_z = embed(net, frames_to_matrix(train.images));
  const Matrix test_z = embed(net, frames_to_matrix(test.images));
  const auto pred = knn_predict(train_z, train.labels, test_z, k, exclude_self);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i];
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["eta"] = r.ranks.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.eta);
  j["ranks"] = r.ranks;
  j["pool_size"] = r.pool_size;
  j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
  j["config"] = r.config;
  return j;
}

inline void save_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << to_json(r).dump(2) << '\n';
}

inline void save_ranks_csv(const std::vector<QueryPair>& queries, const EvalReport& r,
                           const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "query,clip_id,t1,t2,t3,rank\n";
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    out << i << ',' << q.clip_id << ',' << q.t1 << ',' << q.t2 << ',' << q.t3 << ',' << r.ranks[i] << '\n';
  }
}

}  // namespace ssfa
