#pragma once

// Objective terms: softmax classification loss, the contrastive pair loss
// (slowness), the contrastive triplet loss over feature differences
// (steadiness) and their weighted combinations. Batch losses are means over
// the batch. Every term returns its exact gradient with respect to its inputs.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssfa/error.hpp"
#include "ssfa/network.hpp"

namespace ssfa {

enum class Metric { L2, L1 };

inline const char* to_string(Metric m) { return m == Metric::L2 ? "l2" : "l1"; }

inline Metric parse_metric(const std::string& s) {
  if (s == "l2" || s == "L2") return Metric::L2;
  if (s == "l1" || s == "L1") return Metric::L1;
  throw ConfigError("unknown metric '" + s + "'");
}

struct Margins {
  double delta_pair = 1.0;
  double delta_triplet = 1.0;
  Metric metric = Metric::L2;

  void validate() const {
    if (!(delta_pair >= 0.0) || !(delta_triplet >= 0.0)) throw ConfigError("margins must be >= 0");
  }
};

/// Distance between two vectors under `metric` (L2 is unsquared).
template <class A, class B>
double distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, Metric metric) {
  return metric == Metric::L2 ? (a - b).norm() : (a - b).cwiseAbs().sum();
}

struct ContrastiveValue {
  double value = 0.0;
  Vector grad_a;
  Vector grad_b;
};

/// p * d(a,b) + (1 - p) * max(delta - d(a,b), 0).
/// Subgradient choices: the L2 distance has zero gradient at a == b, L1 uses
/// sign(0) = 0, and the hinge is flat at d == delta.
inline ContrastiveValue contrastive(const Vector& a, const Vector& b, int p, double delta, Metric metric) {
  if (a.size() != b.size()) throw ShapeError("contrastive: dimension mismatch");
  ContrastiveValue out{0.0, Vector::Zero(a.size()), Vector::Zero(a.size())};
  const Vector diff = a - b;
  const double d = metric == Metric::L2 ? diff.norm() : diff.cwiseAbs().sum();

  Vector dd = Vector::Zero(a.size());  // gradient of d w.r.t. a
  if (metric == Metric::L2) {
    if (d > 0.0) dd = diff / d;
  } else {
    dd = diff.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
  }

  if (p != 0) {
    out.value = d;
    out.grad_a = dd;
  } else if (d < delta) {
    out.value = delta - d;
    out.grad_a = -dd;
  }
  out.grad_b = -out.grad_a;
  return out;
}

inline ContrastiveValue contrastive(const Vector& a, const Vector& b, int p, const Margins& margins) {
  return contrastive(a, b, p, margins.delta_pair, margins.metric);
}

struct SoftmaxLoss {
  double value = 0.0;
  Matrix dz;  // D x N
  Matrix dW;  // C x D
};

/// -(1/N) sum_i log softmax_{y_i}(W z_i), computed with the max-shift.
inline SoftmaxLoss softmax_loss(const ClassifierWeights& cw, const Matrix& z, std::span<const std::size_t> labels) {
  if (z.cols() == 0) throw ContractViolation("softmax_loss: empty batch");
  if (static_cast<std::size_t>(z.cols()) != labels.size()) throw ShapeError("softmax_loss: label count mismatch");
  if (z.rows() != cw.W.cols()) throw ShapeError("softmax_loss: feature dimension mismatch");
  const auto n = static_cast<double>(z.cols());
  const Matrix logits = cw.W * z;
  Matrix dlogits(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (y >= logits.rows()) throw ContractViolation("softmax_loss: label out of range");
    const double shift = logits.col(i).maxCoeff();
    const Vector e = (logits.col(i).array() - shift).exp().matrix();
    const double sum = e.sum();
    total += std::log(sum) - (logits(y, i) - shift);
    dlogits.col(i) = e / sum;
    dlogits(y, i) -= 1.0;
  }
  dlogits /= n;
  return {total / n, cw.W.transpose() * dlogits, dlogits * z.transpose()};
}

struct PairLoss {
  double value = 0.0;
  Matrix dzj;
  Matrix dzk;
};

/// Mean contrastive loss over pair columns (zj.col(i), zk.col(i), p[i]).
inline PairLoss pair_loss(const Matrix& zj, const Matrix& zk, std::span<const int> p, double delta, Metric metric) {
  if (zj.cols() == 0) throw ContractViolation("pair_loss: empty batch");
  if (zj.rows() != zk.rows() || zj.cols() != zk.cols() || static_cast<std::size_t>(zj.cols()) != p.size()) {
    throw ShapeError("pair_loss: batch shape mismatch");
  }
  const auto n = static_cast<double>(zj.cols());
  PairLoss out{0.0, Matrix::Zero(zj.rows(), zj.cols()), Matrix::Zero(zk.rows(), zk.cols())};
  for (Eigen::Index i = 0; i < zj.cols(); ++i) {
    auto c = contrastive(zj.col(i), zk.col(i), p[static_cast<std::size_t>(i)], delta, metric);
    out.value += c.value;
    out.dzj.col(i) = c.grad_a / n;
    out.dzk.col(i) = c.grad_b / n;
  }
  out.value /= n;
  return out;
}

struct TripletLoss {
  double value = 0.0;
  Matrix dzl;
  Matrix dzm;
  Matrix dzn;
};

/// Mean over triplets of contrastive(z_l - z_m, z_m - z_n, p).
inline TripletLoss triplet_loss(const Matrix& zl, const Matrix& zm, const Matrix& zn, std::span<const int> p,
                                double delta, Metric metric) {
  if (zl.cols() == 0) throw ContractViolation("triplet_loss: empty batch");
  if (zl.rows() != zm.rows() || zl.rows() != zn.rows() || zl.cols() != zm.cols() || zl.cols() != zn.cols() ||
      static_cast<std::size_t>(zl.cols()) != p.size()) {
    throw ShapeError("triplet_loss: batch shape mismatch");
  }
  const auto n = static_cast<double>(zl.cols());
  TripletLoss out{0.0, Matrix::Zero(zl.rows(), zl.cols()), Matrix::Zero(zl.rows(), zl.cols()),
                  Matrix::Zero(zl.rows(), zl.cols())};
  for (Eigen::Index i = 0; i < zl.cols(); ++i) {
    const Vector a = zl.col(i) - zm.col(i);
    const Vector b = zm.col(i) - zn.col(i);
    auto c = contrastive(a, b, p[static_cast<std::size_t>(i)], delta, metric);
    out.value += c.value;
    out.dzl.col(i) = c.grad_a / n;
    out.dzm.col(i) = (c.grad_b - c.grad_a) / n;
    out.dzn.col(i) = -c.grad_b / n;
  }
  out.value /= n;
  return out;
}

/// Features of a pair batch: columns of zj and zk with labels p.
struct PairFeatures {
  Matrix zj, zk;
  std::vector<int> p;
};

struct TripletFeatures {
  Matrix zl, zm, zn;
  std::vector<int> p;
};

inline PairLoss pair_loss_R2(const PairFeatures& f, const Margins& m) {
  return pair_loss(f.zj, f.zk, f.p, m.delta_pair, m.metric);
}

inline TripletLoss triplet_loss_R3(const TripletFeatures& f, const Margins& m) {
  return triplet_loss(f.zl, f.zm, f.zn, f.p, m.delta_triplet, m.metric);
}

struct UnsupLoss {
  double value = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  std::optional<PairLoss> pairs;        // gradients already include no weighting
  std::optional<TripletLoss> triplets;  // unweighted; the combined gradient is pairs + lambda2 * triplets
};

/// R2 + lambda2 * R3; a missing batch contributes zero.
inline UnsupLoss unsup_loss(const PairFeatures* pairs, const TripletFeatures* triplets, double lambda2,
                            const Margins& margins) {
  const bool have_pairs = pairs && pairs->zj.cols() > 0;
  const bool have_triplets = triplets && triplets->zl.cols() > 0;
  if (!have_pairs && !have_triplets) throw ContractViolation("unsup_loss: both pair and triplet batches are empty");
  UnsupLoss out;
  if (have_pairs) {
    out.pairs = pair_loss_R2(*pairs, margins);
    out.r2 = out.pairs->value;
  }
  if (have_triplets) {
    out.triplets = triplet_loss_R3(*triplets, margins);
    out.r3 = out.triplets->value;
  }
  out.value = out.r2 + lambda2 * out.r3;
  return out;
}

// ---------------------------------------------------------------------------
// Full objective through the shared network.

/// Raw (preprocessed, flattened) inputs for one optimization step. Columns are samples.
struct ObjectiveBatch {
  Matrix x_labeled;
  std::vector<std::size_t> labels;
  Matrix xj, xk;
  std::vector<int> pair_p;
  Matrix xl, xm, xn;
  std::vector<int> triplet_p;

  bool has_labeled() const { return x_labeled.cols() > 0; }
  bool has_pairs() const { return xj.cols() > 0; }
  bool has_triplets() const { return xl.cols() > 0; }
};

struct ObjectiveWeights {
  double supervised = 1.0;  // 0 for purely unsupervised training
  double lambda = 0.0;
  double lambda2 = 0.0;
};

/// A weighted gradient contribution of one objective term.
template <class P>
struct GradientTerm {
  std::string name;
  double value = 0.0;   // unweighted term value
  double weight = 0.0;  // multiplier applied to both value and gradient
  P grad;               // already weighted
};

struct Objective {
  double value = 0.0;
  double ls = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  std::vector<GradientTerm<Model>> terms;  // order: L_s, R2, R3
  Model grad;                              // sum of terms in that order
};

namespace detail {

/// Backpropagate several replicas of the shared stack into one gradient.
inline void accumulate_replicas(const Model& model, Model& grad,
                                std::initializer_list<std::pair<const ActivationTape*, const Matrix*>> replicas) {
  for (const auto& [tape, dz] : replicas) {
    auto bw = backward(model.net, *tape, *dz);
    for (std::size_t i = 0; i < grad.net.num_layers(); ++i) {
      grad.net.weights[i] += bw.grad.weights[i];
      grad.net.biases[i] += bw.grad.biases[i];
    }
  }
}

}  // namespace detail

/// supervised * L_s + lambda * (R2 + lambda2 * R3).
///
/// The network is evaluated once per tuple member (one labeled stack, two
/// pair stacks, three triplet stacks) and every replica's gradient lands in
/// the single shared parameter set. Terms with zero weight are skipped
/// except for their value when the batch is present.
inline Objective total_objective(const ObjectiveBatch& batch, const Model& model, const ObjectiveWeights& w,
                                 const Margins& margins) {
  const bool use_ls = w.supervised != 0.0;
  if (use_ls && !batch.has_labeled()) throw ContractViolation("total_objective: labeled batch is empty");
  if (w.lambda != 0.0 && !batch.has_pairs() && !batch.has_triplets()) {
    throw ContractViolation("total_objective: unsupervised weight set but no tuples given");
  }
  Objective obj;
  obj.grad = Model::zeros_like(model);

  if (use_ls) {
    auto [z, tape] = forward(model.net, batch.x_labeled);
    auto ls = softmax_loss(model.classifier, z, batch.labels);
    GradientTerm<Model> term{"L_s", ls.value, w.supervised, Model::zeros_like(model)};
    const Matrix dz = w.supervised * ls.dz;
    detail::accumulate_replicas(model, term.grad, {{&tape, &dz}});
    term.grad.classifier.W = w.supervised * ls.dW;
    obj.ls = ls.value;
    obj.terms.push_back(std::move(term));
  }

  if (batch.has_pairs()) {
    auto [zj, tj] = forward(model.net, batch.xj);
    auto [zk, tk] = forward(model.net, batch.xk);
    auto r2 = pair_loss(zj, zk, batch.pair_p, margins.delta_pair, margins.metric);
    obj.r2 = r2.value;
    if (w.lambda != 0.0) {
      GradientTerm<Model> term{"R2", r2.value, w.lambda, Model::zeros_like(model)};
      const Matrix dj = w.lambda * r2.dzj, dk = w.lambda * r2.dzk;
      detail::accumulate_replicas(model, term.grad, {{&tj, &dj}, {&tk, &dk}});
      obj.terms.push_back(std::move(term));
    }
  }

  if (batch.has_triplets()) {
    auto [zl, tl] = forward(model.net, batch.xl);
    auto [zm, tm] = forward(model.net, batch.xm);
    auto [zn, tn] = forward(model.net, batch.xn);
    auto r3 = triplet_loss(zl, zm, zn, batch.triplet_p, margins.delta_triplet, margins.metric);
    obj.r3 = r3.value;
    const double weight = w.lambda * w.lambda2;
    if (weight != 0.0) {
      GradientTerm<Model> term{"R3", r3.value, weight, Model::zeros_like(model)};
      const Matrix dl = weight * r3.dzl, dm = weight * r3.dzm, dn = weight * r3.dzn;
      detail::accumulate_replicas(model, term.grad, {{&tl, &dl}, {&tm, &dm}, {&tn, &dn}});
      obj.terms.push_back(std::move(term));
    }
  }

  obj.value = w.supervised * obj.ls + w.lambda * (obj.r2 + w.lambda2 * obj.r3);
  for (const auto& t : obj.terms) axpy(1.0, t.grad, obj.grad);
  return obj;
}

}  // namespace ssfa
