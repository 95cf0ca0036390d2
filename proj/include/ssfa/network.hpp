#pragma once

// Fully-connected feature map z(x) with explicit forward/backward passes and
// the bias-free linear classifier on top of it.
//
// Layout conventions: a batch is a matrix whose columns are samples. Weight
// matrices are (fan_out x fan_in). ReLU follows every layer except the last.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ssfa/error.hpp"
#include "ssfa/rng.hpp"

namespace ssfa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct LayerSpec {
  std::vector<std::size_t> sizes;  // input dim, hidden dims..., output dim D

  void validate() const {
    if (sizes.size() < 2) throw ShapeError("layer spec needs at least an input and an output width");
    for (auto s : sizes) {
      if (s < 1) throw ShapeError("layer widths must be >= 1");
    }
  }
  std::size_t input_dim() const { return sizes.front(); }
  std::size_t output_dim() const { return sizes.back(); }
  std::size_t num_layers() const { return sizes.size() - 1; }

  /// One hidden ReLU layer: input -> hidden -> ReLU -> D features.
  static LayerSpec one_hidden(std::size_t input, std::size_t hidden = 25, std::size_t features = 25) {
    return LayerSpec{{input, hidden, features}};
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkParams {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static NetworkParams zeros(const LayerSpec& spec) {
    spec.validate();
    NetworkParams p;
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
      p.weights.push_back(Matrix::Zero(spec.sizes[i + 1], spec.sizes[i]));
      p.biases.push_back(Vector::Zero(spec.sizes[i + 1]));
    }
    return p;
  }

  LayerSpec spec() const {
    LayerSpec s;
    if (weights.empty()) return s;
    s.sizes.push_back(static_cast<std::size_t>(weights.front().cols()));
    for (const auto& w : weights) s.sizes.push_back(static_cast<std::size_t>(w.rows()));
    return s;
  }

  std::size_t num_layers() const { return weights.size(); }

  void validate() const {
    if (weights.empty() || weights.size() != biases.size()) throw ShapeError("network params: layer count mismatch");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (biases[i].size() != weights[i].rows()) throw ShapeError("network params: bias size mismatch");
      if (i > 0 && weights[i].cols() != weights[i - 1].rows()) throw ShapeError("network params: width mismatch");
    }
  }
};

/// C x D classifier weights, no bias.
struct ClassifierWeights {
  Matrix W;

  std::size_t num_classes() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(W.cols()); }
};

/// Intermediates of one forward pass over a batch.
struct ActivationTape {
  Matrix input;
  std::vector<Matrix> pre;   // W x + b per layer
  std::vector<Matrix> post;  // activation output per layer (last one is z)
};

namespace detail {

inline void glorot_fill(Matrix& m, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  }
}

}  // namespace detail

/// Glorot-uniform weights, zero biases.
inline NetworkParams init_glorot(const LayerSpec& spec, std::uint64_t seed) {
  NetworkParams p = NetworkParams::zeros(spec);
  Rng rng(derive_seed(seed, 0x6e6574));
  for (auto& w : p.weights) detail::glorot_fill(w, rng);
  return p;
}

inline ClassifierWeights init_classifier(std::size_t num_classes, std::size_t features, std::uint64_t seed) {
  ClassifierWeights cw{Matrix::Zero(num_classes, features)};
  Rng rng(derive_seed(seed, 0x636c73));
  detail::glorot_fill(cw.W, rng);
  return cw;
}

/// Forward a batch (columns are samples).
inline std::pair<Matrix, ActivationTape> forward(const NetworkParams& params, const Matrix& x) {
  if (params.weights.empty()) throw ShapeError("forward: empty network");
  if (x.rows() != params.weights.front().cols()) {
    throw ShapeError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                     std::to_string(params.weights.front().cols()));
  }
  ActivationTape tape;
  tape.input = x;
  const Matrix* h = &tape.input;
  const std::size_t last = params.num_layers() - 1;
  for (std::size_t i = 0; i <= last; ++i) {
    Matrix a = params.weights[i] * (*h);
    a.colwise() += params.biases[i];
    tape.pre.push_back(a);
    if (i < last) a = a.cwiseMax(0.0);
    tape.post.push_back(std::move(a));
    h = &tape.post.back();
  }
  return {tape.post.back(), std::move(tape)};
}

inline std::pair<Vector, ActivationTape> forward(const NetworkParams& params, const Vector& x) {
  auto [z, tape] = forward(params, Matrix(x));
  return {Vector(z.col(0)), std::move(tape)};
}

/// Embed without keeping the tape.
inline Matrix embed(const NetworkParams& params, const Matrix& x) { return forward(params, x).first; }

struct BackwardResult {
  NetworkParams grad;
  Matrix dx;
};

/// Backpropagate dz (same shape as z) through the recorded pass. Gradients
/// are summed over the batch columns. ReLU has zero derivative at 0.
inline BackwardResult backward(const NetworkParams& params, const ActivationTape& tape, const Matrix& dz) {
  const std::size_t layers = params.num_layers();
  if (tape.pre.size() != layers || tape.post.size() != layers) throw ShapeError("backward: tape/layer mismatch");
  if (dz.rows() != tape.post.back().rows() || dz.cols() != tape.post.back().cols()) {
    throw ShapeError("backward: dz shape does not match forward output");
  }
  BackwardResult out{NetworkParams::zeros(params.spec()), Matrix()};
  Matrix delta = dz;
  for (std::size_t i = layers; i-- > 0;) {
    if (i < layers - 1) delta = delta.cwiseProduct((tape.pre[i].array() > 0.0).cast<double>().matrix());
    const Matrix& input = i == 0 ? tape.input : tape.post[i - 1];
    out.grad.weights[i].noalias() = delta * input.transpose();
    out.grad.biases[i] = delta.rowwise().sum();
    delta = params.weights[i].transpose() * delta;
  }
  out.dx = std::move(delta);
  return out;
}

struct Classification {
  Vector logits;
  std::size_t prediction = 0;
};

/// logits = W z; prediction is the smallest index attaining the maximum.
inline Classification classify(const ClassifierWeights& cw, const Vector& z) {
  if (cw.W.cols() != z.size()) throw ShapeError("classify: feature dimension mismatch");
  Classification c{cw.W * z, 0};
  for (Eigen::Index i = 1; i < c.logits.size(); ++i) {
    if (c.logits(i) > c.logits(static_cast<Eigen::Index>(c.prediction))) c.prediction = static_cast<std::size_t>(i);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Combined parameter set (theta, W) and the vector-space operations the
// optimizer needs.

struct Model {
  NetworkParams net;
  ClassifierWeights classifier;

  static Model zeros_like(const Model& m) {
    return {NetworkParams::zeros(m.net.spec()), {Matrix::Zero(m.classifier.W.rows(), m.classifier.W.cols())}};
  }

  std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(classifier.W.size());
    for (std::size_t i = 0; i < net.num_layers(); ++i) n += net.weights[i].size() + net.biases[i].size();
    return n;
  }

  /// Visit every parameter block in checkpoint order.
  template <class F>
  void for_each_block(F&& f) {
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
      f(net.weights[i]);
      f(net.biases[i]);
    }
    f(classifier.W);
  }
  template <class F>
  void for_each_block(F&& f) const {
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
      f(net.weights[i]);
      f(net.biases[i]);
    }
    f(classifier.W);
  }
};

/// y += a * x
inline void axpy(double a, const Model& x, Model& y) {
  for (std::size_t i = 0; i < y.net.num_layers(); ++i) {
    y.net.weights[i] += a * x.net.weights[i];
    y.net.biases[i] += a * x.net.biases[i];
  }
  y.classifier.W += a * x.classifier.W;
}

inline void scale(double a, Model& y) {
  y.for_each_block([a](auto& block) { block *= a; });
}

inline bool all_finite(const Model& m) {
  bool ok = true;
  m.for_each_block([&ok](const auto& block) { ok = ok && block.allFinite(); });
  return ok;
}

/// Flatten in checkpoint order (per block, row-major).
inline std::vector<double> flatten(const Model& m) {
  std::vector<double> out;
  out.reserve(m.parameter_count());
  m.for_each_block([&out](const auto& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r) {
      for (Eigen::Index c = 0; c < block.cols(); ++c) out.push_back(block(r, c));
    }
  });
  return out;
}

inline void unflatten(const std::vector<double>& values, Model& m) {
  if (values.size() != m.parameter_count()) throw ShapeError("unflatten: parameter count mismatch");
  std::size_t pos = 0;
  m.for_each_block([&](auto& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r) {
      for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = values[pos++];
    }
  });
}

// ---------------------------------------------------------------------------
// Checkpoint (see docs/checkpoint.md):
//   "SSFA-CKPT v1\n"
//   "layers <w0> <w1> ... <wL>\n"
//   "classes <C>\n"
//   little-endian IEEE-754 binary64 payload: for each layer the weight matrix
//   (row-major) then the bias vector, then W (row-major).

namespace detail {

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline double get_f64(const std::string& in, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string encode_checkpoint(const Model& m) {
  const LayerSpec spec = m.net.spec();
  std::string out = "SSFA-CKPT v1\nlayers";
  for (auto s : spec.sizes) out += " " + std::to_string(s);
  out += "\nclasses " + std::to_string(m.classifier.num_classes()) + "\n";
  for (double v : flatten(m)) detail::put_f64(out, v);
  return out;
}

inline Model decode_checkpoint(const std::string& data, const std::string& name = "checkpoint") {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) throw FormatError(name + ": truncated checkpoint header");
    std::string line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != "SSFA-CKPT v1") throw FormatError(name + ": not an SSFA-CKPT v1 file");

  std::istringstream layers(next_line());
  std::string tag;
  layers >> tag;
  if (tag != "layers") throw FormatError(name + ": expected 'layers' line");
  LayerSpec spec;
  std::size_t width = 0;
  while (layers >> width) spec.sizes.push_back(width);
  if (!layers.eof()) throw FormatError(name + ": malformed 'layers' line");
  try {
    spec.validate();
  } catch (const ShapeError& e) {
    throw FormatError(name + ": " + e.what());
  }

  std::istringstream classes(next_line());
  std::size_t num_classes = 0;
  if (!(classes >> tag >> num_classes) || tag != "classes" || num_classes < 1) {
    throw FormatError(name + ": expected 'classes <C>' line");
  }

  Model m{NetworkParams::zeros(spec), {Matrix::Zero(num_classes, spec.output_dim())}};
  const std::size_t count = m.parameter_count();
  if (data.size() - pos != count * 8) {
    throw IoError(name + ": payload has " + std::to_string(data.size() - pos) + " bytes, expected " +
                  std::to_string(count * 8));
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = detail::get_f64(data, pos + 8 * i);
  unflatten(values, m);
  return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  const std::string data = encode_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(data, path.string());
}

}  // namespace ssfa
