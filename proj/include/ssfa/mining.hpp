#pragma once

// Pair and triplet mining from unlabeled clips.
//
// Pairs (j > k, gap g = j - k):
//   positive  1 <= g <= T
//   negative  g >= 2T + 1
// Triplets (l < m < n, a = m - l, b = n - m):
//   positive  a == b, 1 <= a <= T
//   negative  1 <= a <= T, b >= 2T
// Everything in between is a buffer zone and is never emitted. Tuples never
// span two clips. T is the clip's window in frames, floor(T_seconds / period).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ssfa/datamodel.hpp"
#include "ssfa/error.hpp"
#include "ssfa/rng.hpp"

namespace ssfa {

struct PairSample {
  std::string clip_id;
  std::size_t j = 0;
  std::size_t k = 0;
  int p = 0;

  friend bool operator==(const PairSample&, const PairSample&) = default;
};

struct TripletSample {
  std::string clip_id;
  std::size_t l = 0;
  std::size_t m = 0;
  std::size_t n = 0;
  int p = 0;

  friend bool operator==(const TripletSample&, const TripletSample&) = default;
};

struct MiningConfig {
  double T_seconds = 2.0;
  double pair_neg_ratio = 3.0;
  double triplet_neg_ratio = 1.0;
  std::size_t max_pairs = 50000;
  std::size_t max_triplets = 50000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(T_seconds > 0.0)) throw ConfigError("T_seconds must be positive");
    if (!(pair_neg_ratio >= 0.0) || !(triplet_neg_ratio >= 0.0)) throw ConfigError("negative ratios must be >= 0");
    if (max_pairs < 1 || max_triplets < 1) throw ConfigError("tuple caps must be >= 1");
  }
};

template <class Sample>
struct MiningResult {
  std::vector<Sample> samples;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t skipped_clips = 0;  // clips without a single positive candidate

  double achieved_ratio() const {
    return positives == 0 ? 0.0 : static_cast<double>(negatives) / static_cast<double>(positives);
  }
};

// ---------------------------------------------------------------------------
// Candidate counting and unranking. Candidates are ordered by gap (spacing)
// and then by the earliest frame index, so a rank identifies a tuple without
// materializing the O(L^2) candidate list.

namespace mining_detail {

inline std::size_t pair_count(std::size_t len, std::size_t gap_lo, std::size_t gap_hi) {
  std::size_t total = 0;
  for (std::size_t g = gap_lo; g <= gap_hi && g < len; ++g) total += len - g;
  return total;
}

/// (j, k) for the rank-th pair with gap in [gap_lo, gap_hi].
inline std::pair<std::size_t, std::size_t> unrank_pair(std::size_t len, std::size_t gap_lo, std::uint64_t rank) {
  for (std::size_t g = gap_lo; g < len; ++g) {
    const std::size_t c = len - g;
    if (rank < c) return {rank + g, rank};
    rank -= c;
  }
  throw ContractViolation("pair rank out of range");
}

inline std::size_t triplet_pos_count(std::size_t len, std::size_t window) {
  std::size_t total = 0;
  for (std::size_t s = 1; s <= window && 2 * s < len; ++s) total += len - 2 * s;
  return total;
}

inline std::size_t triplet_neg_count(std::size_t len, std::size_t window) {
  std::size_t total = 0;
  for (std::size_t a = 1; a <= window; ++a) {
    for (std::size_t b = std::max<std::size_t>(2 * window, 1); a + b < len; ++b) total += len - a - b;
  }
  return total;
}

inline std::tuple<std::size_t, std::size_t, std::size_t> unrank_triplet_pos(std::size_t len, std::uint64_t rank) {
  for (std::size_t s = 1; 2 * s < len; ++s) {
    const std::size_t c = len - 2 * s;
    if (rank < c) return {rank, rank + s, rank + 2 * s};
    rank -= c;
  }
  throw ContractViolation("triplet rank out of range");
}

inline std::tuple<std::size_t, std::size_t, std::size_t> unrank_triplet_neg(std::size_t len, std::size_t window,
                                                                            std::uint64_t rank) {
  for (std::size_t a = 1; a <= window; ++a) {
    for (std::size_t b = std::max<std::size_t>(2 * window, 1); a + b < len; ++b) {
      const std::size_t c = len - a - b;
      if (rank < c) return {rank, rank + a, rank + a + b};
      rank -= c;
    }
  }
  throw ContractViolation("triplet rank out of range");
}

/// Floyd's algorithm: `count` distinct values from [0, n), returned sorted.
inline std::vector<std::uint64_t> floyd_sample(Rng& rng, std::uint64_t n, std::uint64_t count) {
  count = std::min(count, n);
  std::set<std::uint64_t> chosen;
  for (std::uint64_t j = n - count; j < n; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

/// Map global ranks onto (clip, local rank) through prefix sums of per-clip counts.
template <class Emit>
void for_each_rank(const std::vector<std::uint64_t>& ranks, const std::vector<std::size_t>& counts, Emit&& emit) {
  std::size_t clip = 0;
  std::uint64_t offset = 0;
  for (auto r : ranks) {
    while (r >= offset + counts[clip]) offset += counts[clip++];
    emit(clip, r - offset);
  }
}

inline std::size_t negatives_for(std::size_t positives, double ratio, std::size_t available, std::size_t room) {
  const auto wanted = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(positives) + 1e-9));
  return std::min({wanted, available, room});
}

inline std::size_t positives_for(std::size_t cap, double ratio, std::size_t available) {
  const auto share = static_cast<std::size_t>(std::floor(static_cast<double>(cap) / (1.0 + ratio) + 1e-9));
  return std::min(available, std::max<std::size_t>(share, 1));
}

}  // namespace mining_detail

/// Enumerate the full positive and negative pair candidate sets of one clip.
inline std::pair<std::vector<std::pair<std::size_t, std::size_t>>, std::vector<std::pair<std::size_t, std::size_t>>>
pair_candidates(std::size_t clip_len, std::size_t window) {
  using namespace mining_detail;
  std::vector<std::pair<std::size_t, std::size_t>> pos, neg;
  if (window == 0) return {pos, neg};
  const std::size_t npos = pair_count(clip_len, 1, window);
  for (std::size_t r = 0; r < npos; ++r) pos.push_back(unrank_pair(clip_len, 1, r));
  const std::size_t nneg = pair_count(clip_len, 2 * window + 1, clip_len);
  for (std::size_t r = 0; r < nneg; ++r) neg.push_back(unrank_pair(clip_len, 2 * window + 1, r));
  return {pos, neg};
}

using Triple = std::tuple<std::size_t, std::size_t, std::size_t>;

inline std::pair<std::vector<Triple>, std::vector<Triple>> triplet_candidates(std::size_t clip_len, std::size_t window) {
  using namespace mining_detail;
  std::vector<Triple> pos, neg;
  if (window == 0) return {pos, neg};
  const std::size_t npos = triplet_pos_count(clip_len, window);
  for (std::size_t r = 0; r < npos; ++r) pos.push_back(unrank_triplet_pos(clip_len, r));
  const std::size_t nneg = triplet_neg_count(clip_len, window);
  for (std::size_t r = 0; r < nneg; ++r) neg.push_back(unrank_triplet_neg(clip_len, window, r));
  return {pos, neg};
}

/// Sample temporal pairs. Positives are drawn uniformly without replacement
/// from all clips, then negatives at `pair_neg_ratio` per positive; when a
/// candidate class runs out the achieved ratio is reported, never padded.
inline MiningResult<PairSample> mine_pairs(const UnlabeledSet& u, const MiningConfig& cfg) {
  using namespace mining_detail;
  cfg.validate();
  MiningResult<PairSample> result;
  std::vector<std::size_t> pos_counts, neg_counts, windows;
  std::uint64_t total_pos = 0, total_neg = 0;
  for (const auto& clip : u.clips) {
    const std::size_t w = clip.window_frames(cfg.T_seconds);
    const std::size_t len = clip.frames.size();
    windows.push_back(w);
    pos_counts.push_back(w == 0 ? 0 : pair_count(len, 1, w));
    neg_counts.push_back(w == 0 ? 0 : pair_count(len, 2 * w + 1, len));
    if (pos_counts.back() == 0) ++result.skipped_clips;
    total_pos += pos_counts.back();
    total_neg += neg_counts.back();
  }
  if (total_neg == 0 || total_pos == 0) {
    throw MiningError("no clip is long enough for a negative pair (needs at least 2*T_frames+2 frames)");
  }

  Rng rng(derive_seed(cfg.seed, 0x9a1f));
  const std::size_t npos = positives_for(cfg.max_pairs, cfg.pair_neg_ratio, total_pos);
  const std::size_t nneg = negatives_for(npos, cfg.pair_neg_ratio, total_neg, cfg.max_pairs - npos);

  std::vector<std::pair<std::size_t, PairSample>> tagged;
  for_each_rank(floyd_sample(rng, total_pos, npos), pos_counts, [&](std::size_t c, std::uint64_t r) {
    auto [j, k] = unrank_pair(u.clips[c].frames.size(), 1, r);
    tagged.push_back({c, {u.clips[c].clip_id, j, k, 1}});
  });
  for_each_rank(floyd_sample(rng, total_neg, nneg), neg_counts, [&](std::size_t c, std::uint64_t r) {
    auto [j, k] = unrank_pair(u.clips[c].frames.size(), 2 * windows[c] + 1, r);
    tagged.push_back({c, {u.clips[c].clip_id, j, k, 0}});
  });
  std::stable_sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first, a.second.k, a.second.j) < std::tie(b.first, b.second.k, b.second.j);
  });
  for (auto& t : tagged) result.samples.push_back(std::move(t.second));
  result.positives = npos;
  result.negatives = nneg;
  return result;
}

inline MiningResult<TripletSample> mine_triplets(const UnlabeledSet& u, const MiningConfig& cfg) {
  using namespace mining_detail;
  cfg.validate();
  MiningResult<TripletSample> result;
  std::vector<std::size_t> pos_counts, neg_counts, windows;
  std::uint64_t total_pos = 0, total_neg = 0;
  for (const auto& clip : u.clips) {
    const std::size_t w = clip.window_frames(cfg.T_seconds);
    const std::size_t len = clip.frames.size();
    windows.push_back(w);
    pos_counts.push_back(w == 0 ? 0 : triplet_pos_count(len, w));
    neg_counts.push_back(w == 0 ? 0 : triplet_neg_count(len, w));
    if (pos_counts.back() == 0) ++result.skipped_clips;
    total_pos += pos_counts.back();
    total_neg += neg_counts.back();
  }
  if (total_neg == 0 || total_pos == 0) {
    throw MiningError("no clip is long enough for a negative triplet (needs at least 2*T_frames+2 frames)");
  }

  Rng rng(derive_seed(cfg.seed, 0x7c3b));
  const std::size_t npos = positives_for(cfg.max_triplets, cfg.triplet_neg_ratio, total_pos);
  const std::size_t nneg = negatives_for(npos, cfg.triplet_neg_ratio, total_neg, cfg.max_triplets - npos);

  std::vector<std::pair<std::size_t, TripletSample>> tagged;
  for_each_rank(floyd_sample(rng, total_pos, npos), pos_counts, [&](std::size_t c, std::uint64_t r) {
    auto [l, m, n] = unrank_triplet_pos(u.clips[c].frames.size(), r);
    tagged.push_back({c, {u.clips[c].clip_id, l, m, n, 1}});
  });
  for_each_rank(floyd_sample(rng, total_neg, nneg), neg_counts, [&](std::size_t c, std::uint64_t r) {
    auto [l, m, n] = unrank_triplet_neg(u.clips[c].frames.size(), windows[c], r);
    tagged.push_back({c, {u.clips[c].clip_id, l, m, n, 0}});
  });
  std::stable_sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first, a.second.l, a.second.m, a.second.n) <
           std::tie(b.first, b.second.l, b.second.m, b.second.n);
  });
  for (auto& t : tagged) result.samples.push_back(std::move(t.second));
  result.positives = npos;
  result.negatives = nneg;
  return result;
}

// ---------------------------------------------------------------------------
// Tuple file: '#' header lines echoing the config, then
//   PAIR clip_id j k p
//   TRIP clip_id l m n p

struct TupleFile {
  std::vector<PairSample> pairs;
  std::vector<TripletSample> triplets;
};

inline std::string format_mining_config(const MiningConfig& cfg) {
  std::ostringstream os;
  os << std::setprecision(17) << "T_seconds=" << cfg.T_seconds << " pair_neg_ratio=" << cfg.pair_neg_ratio
     << " triplet_neg_ratio=" << cfg.triplet_neg_ratio << " max_pairs=" << cfg.max_pairs
     << " max_triplets=" << cfg.max_triplets << " seed=" << cfg.seed;
  return os.str();
}

inline void save_tuples(const std::filesystem::path& path, const MiningConfig& cfg, const TupleFile& tuples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "# SSFA-TUPLES v1\n# " << format_mining_config(cfg) << '\n';
  for (const auto& s : tuples.pairs) {
    if (s.clip_id.find_first_of(" \t\n") != std::string::npos) throw ValidationError("clip_id contains whitespace");
    out << "PAIR " << s.clip_id << ' ' << s.j << ' ' << s.k << ' ' << s.p << '\n';
  }
  for (const auto& s : tuples.triplets) {
    if (s.clip_id.find_first_of(" \t\n") != std::string::npos) throw ValidationError("clip_id contains whitespace");
    out << "TRIP " << s.clip_id << ' ' << s.l << ' ' << s.m << ' ' << s.n << ' ' << s.p << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline TupleFile load_tuples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  TupleFile tuples;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    bool ok = false;
    if (tag == "PAIR") {
      PairSample s;
      ok = static_cast<bool>(is >> s.clip_id >> s.j >> s.k >> s.p) && (s.p == 0 || s.p == 1);
      if (ok) tuples.pairs.push_back(std::move(s));
    } else if (tag == "TRIP") {
      TripletSample s;
      ok = static_cast<bool>(is >> s.clip_id >> s.l >> s.m >> s.n >> s.p) && (s.p == 0 || s.p == 1);
      if (ok) tuples.triplets.push_back(std::move(s));
    }
    std::string rest;
    if (!ok || (is >> rest)) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed tuple line");
  }
  return tuples;
}

}  // namespace ssfa
