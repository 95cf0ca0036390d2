#pragma once

// Central finite-difference checks for every loss term and for the full
// objective composed through a one-hidden-layer network.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ssfa/losses.hpp"
#include "ssfa/network.hpp"
#include "ssfa/rng.hpp"

namespace ssfa {

struct GradcheckConfig {
  std::size_t points = 100;
  double h = 1e-5;
  double tolerance = 1e-4;
  double boundary = 1e-3;  // min distance from any kink (hinge, |.|, ReLU)
  Metric metric = Metric::L2;
  std::uint64_t seed = 1;
  bool flip_sign = false;  // test hook: negate analytic gradients
};

struct GradcheckTerm {
  std::string name;
  std::size_t points = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckTerm> terms;
  bool passed() const {
    return std::all_of(terms.begin(), terms.end(), [](const GradcheckTerm& t) { return t.passed; });
  }
};

namespace gradcheck_detail {

using Flat = std::vector<double>;

/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
inline double max_rel_error(const std::function<double(const Flat&)>& f, Flat x, const Flat& analytic, double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline void append(Flat& out, const Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(m(i, j));
}

inline std::size_t take(const Flat& in, std::size_t pos, Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = in[pos++];
  return pos;
}

/// True when (a, b) sits at least `eps` away from every kink of the contrastive loss.
inline bool clear_of_kinks(const Vector& a, const Vector& b, int p, double delta, Metric metric, double eps) {
  const Vector diff = a - b;
  if (metric == Metric::L1) {
    if ((diff.array().abs() < eps).any()) return false;
  } else if (diff.norm() < eps) {
    return false;
  }
  return p != 0 || std::abs(distance(a, b, metric) - delta) > eps;
}

inline bool pairs_clear(const Matrix& zj, const Matrix& zk, const std::vector<int>& p, double delta, Metric metric,
                        double eps) {
  for (Eigen::Index i = 0; i < zj.cols(); ++i) {
    if (!clear_of_kinks(zj.col(i), zk.col(i), p[static_cast<std::size_t>(i)], delta, metric, eps)) return false;
  }
  return true;
}

inline bool triplets_clear(const Matrix& zl, const Matrix& zm, const Matrix& zn, const std::vector<int>& p,
                           double delta, Metric metric, double eps) {
  return pairs_clear(zl - zm, zm - zn, p, delta, metric, eps);
}

inline std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> p(n);
  for (auto& v : p) v = static_cast<int>(rng.below(2));
  return p;
}

/// Runs `points` accepted samples of `one`, which returns a negative value
/// for a rejected (near-kink) draw and the point's max relative error otherwise.
inline GradcheckTerm run_term(const std::string& name, const GradcheckConfig& cfg, std::uint64_t stream,
                              const std::function<double(Rng&)>& one) {
  Rng rng(derive_seed(cfg.seed, stream));
  GradcheckTerm t{name, 0, 0.0, false};
  std::size_t attempts = 0;
  while (t.points < cfg.points && attempts < 100 * cfg.points) {
    ++attempts;
    const double err = one(rng);
    if (err < 0.0) continue;
    ++t.points;
    t.max_rel_error = std::max(t.max_rel_error, err);
  }
  t.passed = t.points == cfg.points && t.max_rel_error <= cfg.tolerance;
  return t;
}

}  // namespace gradcheck_detail

inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  using namespace gradcheck_detail;
  const double sign = cfg.flip_sign ? -1.0 : 1.0;
  constexpr Eigen::Index D = 4, N = 3, C = 3;
  GradcheckReport report;

  report.terms.push_back(run_term("softmax", cfg, 1, [&](Rng& rng) {
    ClassifierWeights cw{random_matrix(C, D, rng)};
    const Matrix z = random_matrix(D, N, rng);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(C);
    const auto loss = softmax_loss(cw, z, y);
    Flat x, g;
    append(x, z);
    append(x, cw.W);
    append(g, sign * loss.dz);
    append(g, sign * loss.dW);
    auto f = [&](const Flat& v) {
      Matrix zz(D, N);
      ClassifierWeights ww{Matrix(C, D)};
      take(v, take(v, 0, zz), ww.W);
      return softmax_loss(ww, zz, y).value;
    };
    return max_rel_error(f, x, g, cfg.h);
  }));

  const Margins margins{1.0, 1.0, cfg.metric};

  report.terms.push_back(run_term("R2", cfg, 2, [&](Rng& rng) {
    const Matrix zj = random_matrix(D, N, rng, 0.4), zk = random_matrix(D, N, rng, 0.4);
    const auto p = random_labels(N, rng);
    if (!pairs_clear(zj, zk, p, margins.delta_pair, cfg.metric, cfg.boundary)) return -1.0;
    const auto loss = pair_loss(zj, zk, p, margins.delta_pair, cfg.metric);
    Flat x, g;
    append(x, zj);
    append(x, zk);
    append(g, sign * loss.dzj);
    append(g, sign * loss.dzk);
    auto f = [&](const Flat& v) {
      Matrix a(D, N), b(D, N);
      take(v, take(v, 0, a), b);
      return pair_loss(a, b, p, margins.delta_pair, cfg.metric).value;
    };
    return max_rel_error(f, x, g, cfg.h);
  }));

  report.terms.push_back(run_term("R3", cfg, 3, [&](Rng& rng) {
    const Matrix zl = random_matrix(D, N, rng, 0.4), zm = random_matrix(D, N, rng, 0.4),
                 zn = random_matrix(D, N, rng, 0.4);
    const auto p = random_labels(N, rng);
    if (!triplets_clear(zl, zm, zn, p, margins.delta_triplet, cfg.metric, cfg.boundary)) return -1.0;
    const auto loss = triplet_loss(zl, zm, zn, p, margins.delta_triplet, cfg.metric);
    Flat x, g;
    append(x, zl);
    append(x, zm);
    append(x, zn);
    append(g, sign * loss.dzl);
    append(g, sign * loss.dzm);
    append(g, sign * loss.dzn);
    auto f = [&](const Flat& v) {
      Matrix a(D, N), b(D, N), c(D, N);
      take(v, take(v, take(v, 0, a), b), c);
      return triplet_loss(a, b, c, p, margins.delta_triplet, cfg.metric).value;
    };
    return max_rel_error(f, x, g, cfg.h);
  }));

  report.terms.push_back(run_term("L_u", cfg, 4, [&](Rng& rng) {
    PairFeatures pf{random_matrix(D, N, rng, 0.4), random_matrix(D, N, rng, 0.4), random_labels(N, rng)};
    TripletFeatures tf{random_matrix(D, N, rng, 0.4), random_matrix(D, N, rng, 0.4),
                       random_matrix(D, N, rng, 0.4), random_labels(N, rng)};
    const double lambda2 = rng.uniform(0.1, 3.0);
    if (!pairs_clear(pf.zj, pf.zk, pf.p, margins.delta_pair, cfg.metric, cfg.boundary) ||
        !triplets_clear(tf.zl, tf.zm, tf.zn, tf.p, margins.delta_triplet, cfg.metric, cfg.boundary)) {
      return -1.0;
    }
    const auto loss = unsup_loss(&pf, &tf, lambda2, margins);
    Flat x, g;
    append(x, pf.zj);
    append(x, pf.zk);
    append(x, tf.zl);
    append(x, tf.zm);
    append(x, tf.zn);
    append(g, sign * loss.pairs->dzj);
    append(g, sign * loss.pairs->dzk);
    append(g, sign * lambda2 * loss.triplets->dzl);
    append(g, sign * lambda2 * loss.triplets->dzm);
    append(g, sign * lambda2 * loss.triplets->dzn);
    auto f = [&](const Flat& v) {
      PairFeatures a{Matrix(D, N), Matrix(D, N), pf.p};
      TripletFeatures b{Matrix(D, N), Matrix(D, N), Matrix(D, N), tf.p};
      std::size_t pos = take(v, take(v, 0, a.zj), a.zk);
      take(v, take(v, take(v, pos, b.zl), b.zm), b.zn);
      return unsup_loss(&a, &b, lambda2, margins).value;
    };
    return max_rel_error(f, x, g, cfg.h);
  }));

  report.terms.push_back(run_term("total", cfg, 5, [&](Rng& rng) {
    const LayerSpec spec{{6, 5, D}};
    Model model{init_glorot(spec, rng()), ClassifierWeights{random_matrix(C, D, rng)}};
    for (auto& b : model.net.biases) b = random_matrix(b.size(), 1, rng, 0.1);
    ObjectiveBatch batch;
    batch.x_labeled = random_matrix(6, N, rng);
    for (Eigen::Index i = 0; i < N; ++i) batch.labels.push_back(rng.below(C));
    batch.xj = random_matrix(6, N, rng);
    batch.xk = random_matrix(6, N, rng);
    batch.pair_p = random_labels(N, rng);
    batch.xl = random_matrix(6, N, rng);
    batch.xm = random_matrix(6, N, rng);
    batch.xn = random_matrix(6, N, rng);
    batch.triplet_p = random_labels(N, rng);
    const ObjectiveWeights w{1.0, rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0)};

    for (const Matrix* xs : {&batch.x_labeled, &batch.xj, &batch.xk, &batch.xl, &batch.xm, &batch.xn}) {
      const auto tape = forward(model.net, *xs).second;
      for (const auto& pre : tape.pre) {
        if ((pre.array().abs() < cfg.boundary).any()) return -1.0;
      }
    }
    const Matrix zj = embed(model.net, batch.xj), zk = embed(model.net, batch.xk);
    const Matrix zl = embed(model.net, batch.xl), zm = embed(model.net, batch.xm), zn = embed(model.net, batch.xn);
    if (!pairs_clear(zj, zk, batch.pair_p, margins.delta_pair, cfg.metric, cfg.boundary) ||
        !triplets_clear(zl, zm, zn, batch.triplet_p, margins.delta_triplet, cfg.metric, cfg.boundary)) {
      return -1.0;
    }

    const auto obj = total_objective(batch, model, w, margins);
    Flat g = flatten(obj.grad);
    for (double& v : g) v *= sign;
    auto f = [&](const Flat& v) {
      Model m = model;
      unflatten(v, m);
      return total_objective(batch, m, w, margins).value;
    };
    return max_rel_error(f, flatten(model), g, cfg.h);
  }));

  return report;
}

}  // namespace ssfa
