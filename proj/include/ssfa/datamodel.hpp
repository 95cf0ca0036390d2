#pragma once

// Frames, clips, labeled/unlabeled datasets, PGM and manifest I/O, and the
// per-image standardization applied before frames enter the network.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include "ssfa/error.hpp"

namespace ssfa {

/// A single grayscale image, row-major.
struct Frame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  Frame() = default;
  Frame(std::size_t w, std::size_t h, std::vector<double> px) : width(w), height(h), pixels(std::move(px)) {
    validate();
  }
  Frame(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) { validate(); }

  void validate() const {
    if (width < 1 || height < 1) throw ShapeError("frame dimensions must be positive");
    if (pixels.size() != width * height) {
      throw ShapeError("frame has " + std::to_string(pixels.size()) + " pixels, expected " +
                       std::to_string(width * height));
    }
  }

  std::size_t size() const noexcept { return pixels.size(); }
  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct Clip {
  std::string clip_id;
  std::vector<Frame> frames;
  double frame_period = 1.0;  // seconds per frame

  void validate() const {
    if (frames.empty()) throw ValidationError("clip '" + clip_id + "' has no frames");
    if (!(frame_period > 0.0)) throw ValidationError("clip '" + clip_id + "' has non-positive frame period");
    for (const auto& f : frames) {
      f.validate();
      if (f.width != frames.front().width || f.height != frames.front().height) {
        throw ShapeError("clip '" + clip_id + "' mixes frame sizes");
      }
    }
  }

  /// Temporal window in frames: floor(T / frame_period).
  std::size_t window_frames(double t_seconds) const {
    return static_cast<std::size_t>(std::floor(t_seconds / frame_period + 1e-9));
  }
};

struct LabeledSet {
  std::vector<Frame> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return images.size(); }

  void validate() const {
    if (images.size() != labels.size()) throw ValidationError("labeled set: images/labels length mismatch");
    for (auto y : labels) {
      if (y >= num_classes) {
        throw ValidationError("label " + std::to_string(y) + " out of range for " +
                              std::to_string(num_classes) + " classes");
      }
    }
    for (const auto& f : images) f.validate();
  }
};

struct UnlabeledSet {
  std::vector<Clip> clips;

  void validate() const {
    if (clips.empty()) throw ValidationError("unlabeled set has no clips");
    std::unordered_set<std::string> seen;
    for (const auto& c : clips) {
      c.validate();
      if (!seen.insert(c.clip_id).second) throw ValidationError("duplicate clip_id '" + c.clip_id + "'");
    }
  }

  const Clip& clip(const std::string& id) const {
    for (const auto& c : clips) {
      if (c.clip_id == id) return c;
    }
    throw ContractViolation("unknown clip_id '" + id + "'");
  }
};

/// Standardize a frame: (p - mean) / max(std, eps), population std.
inline Frame preprocess(const Frame& frame, double eps = 1e-8) {
  const auto n = static_cast<double>(frame.size());
  double mean = 0.0;
  for (double p : frame.pixels) mean += p;
  mean /= n;
  double var = 0.0;
  for (double p : frame.pixels) var += (p - mean) * (p - mean);
  const double scale = std::max(std::sqrt(var / n), eps);
  Frame out = frame;
  for (double& p : out.pixels) p = (p - mean) / scale;
  if (scale == eps) {
    // Constant frames: the residuals are rounding noise, map them to exact zero.
    bool constant = std::all_of(frame.pixels.begin(), frame.pixels.end(),
                                [&](double p) { return p == frame.pixels.front(); });
    if (constant) std::fill(out.pixels.begin(), out.pixels.end(), 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM

namespace detail {

class PgmHeaderReader {
 public:
  PgmHeaderReader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    std::size_t start = pos_;
    while (pos_ < data_.size() && !std::isspace(static_cast<unsigned char>(data_[pos_]))) ++pos_;
    if (start == pos_) throw FormatError(path_ + ": truncated PGM header");
    return data_.substr(start, pos_ - start);
  }

  std::uint64_t number() {
    auto tok = token();
    if (!std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
        tok.size() > 9) {
      throw FormatError(path_ + ": invalid PGM header field '" + tok + "'");
    }
    return std::stoull(tok);
  }

  std::size_t position() const noexcept { return pos_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < data_.size()) {
      if (std::isspace(static_cast<unsigned char>(data_[pos_]))) {
        ++pos_;
      } else if (data_[pos_] == '#') {
        while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& data_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Read a binary (P5) or ASCII (P2) graymap; pixels are scaled by 1/maxval.
inline Frame load_pgm(const std::filesystem::path& path) {
  const std::string data = detail::read_file(path);
  const std::string name = path.string();
  detail::PgmHeaderReader reader(data, name);
  const std::string magic = reader.token();
  if (magic != "P5" && magic != "P2") throw FormatError(name + ": unsupported magic '" + magic + "'");
  const auto width = reader.number();
  const auto height = reader.number();
  const auto maxval = reader.number();
  if (width == 0 || height == 0) throw FormatError(name + ": zero image dimension");
  if (maxval == 0 || maxval > 65535) throw FormatError(name + ": maxval out of range");

  const std::size_t count = width * height;
  std::vector<double> pixels(count);
  const double scale = 1.0 / static_cast<double>(maxval);

  if (magic == "P5") {
    std::size_t pos = reader.position() + 1;  // single whitespace byte after maxval
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (reader.position() >= data.size() || data.size() < pos + count * bytes_per) {
      throw IoError(name + ": truncated PGM payload");
    }
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t v = static_cast<unsigned char>(data[pos]);
      if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(data[pos + 1]);
      pos += bytes_per;
      if (v > maxval) throw FormatError(name + ": sample exceeds maxval");
      pixels[i] = v * scale;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t v = 0;
      try {
        v = reader.number();
      } catch (const FormatError&) {
        throw IoError(name + ": truncated PGM payload");
      }
      if (v > maxval) throw FormatError(name + ": sample exceeds maxval");
      pixels[i] = static_cast<double>(v) * scale;
    }
  }
  return Frame(width, height, std::move(pixels));
}

/// Write a binary P5 graymap with maxval 255; pixels are clamped to [0,1]
/// and quantized by round(p * 255).
inline void save_pgm(const Frame& frame, const std::filesystem::path& path) {
  frame.validate();
  std::string out = "P5\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) + "\n255\n";
  out.reserve(out.size() + frame.size());
  for (double p : frame.pixels) {
    const double c = std::clamp(std::isnan(p) ? 0.0 : p, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Manifests
//
// Unlabeled: clip_id <TAB> frame_period_seconds <TAB> path1,path2,...
// Labeled:   classes <TAB> C   (header), then image_path <TAB> label_index
// Paths are relative to the manifest's directory; lines starting with '#'
// and blank lines are ignored.

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline Frame load_manifest_frame(const std::filesystem::path& base, const std::string& rel, std::size_t lineno,
                                 const std::string& line) {
  const auto full = base / rel;
  if (!std::filesystem::exists(full)) {
    throw ResolutionError("missing frame file '" + full.string() + "' at manifest line " + std::to_string(lineno) +
                          ": " + line);
  }
  return load_pgm(full);
}

inline std::size_t parse_index(const std::string& s, const std::string& what, std::size_t lineno) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": invalid " + what + " '" + s + "'");
  }
  return std::stoull(s);
}

}  // namespace detail

using Dataset = std::variant<UnlabeledSet, LabeledSet>;

/// Load either manifest kind; a `classes` header selects the labeled format.
inline Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  const auto base = path.parent_path();

  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    line = detail::strip_cr(line);
    if (line.empty() || line.front() == '#') continue;
    lines.emplace_back(lineno, line);
  }
  const bool labeled = std::any_of(lines.begin(), lines.end(),
                                   [](const auto& l) { return l.second.rfind("classes\t", 0) == 0; });

  if (labeled) {
    LabeledSet set;
    bool have_header = false;
    for (const auto& [lineno, text] : lines) {
      auto parts = detail::split(text, '\t');
      if (parts.size() != 2) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 2 fields");
      if (parts[0] == "classes") {
        if (have_header) throw FormatError("manifest line " + std::to_string(lineno) + ": duplicate classes header");
        set.num_classes = detail::parse_index(parts[1], "class count", lineno);
        have_header = true;
        continue;
      }
      set.labels.push_back(detail::parse_index(parts[1], "label", lineno));
      set.images.push_back(detail::load_manifest_frame(base, parts[0], lineno, text));
    }
    set.validate();
    return set;
  }

  UnlabeledSet set;
  for (const auto& [lineno, text] : lines) {
    auto parts = detail::split(text, '\t');
    if (parts.size() != 3) throw FormatError("manifest line " + std::to_string(lineno) + ": expected 3 fields");
    Clip clip;
    clip.clip_id = parts[0];
    try {
      std::size_t used = 0;
      clip.frame_period = std::stod(parts[1], &used);
      if (used != parts[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": invalid frame period '" + parts[1] + "'");
    }
    for (const auto& rel : detail::split(parts[2], ',')) {
      clip.frames.push_back(detail::load_manifest_frame(base, rel, lineno, text));
    }
    set.clips.push_back(std::move(clip));
  }
  set.validate();
  return set;
}

inline UnlabeledSet load_unlabeled_manifest(const std::filesystem::path& path) {
  auto ds = load_manifest(path);
  if (auto* u = std::get_if<UnlabeledSet>(&ds)) return std::move(*u);
  throw FormatError("'" + path.string() + "' is a labeled manifest, expected unlabeled");
}

inline LabeledSet load_labeled_manifest(const std::filesystem::path& path) {
  auto ds = load_manifest(path);
  if (auto* s = std::get_if<LabeledSet>(&ds)) return std::move(*s);
  throw FormatError("'" + path.string() + "' is an unlabeled manifest, expected labeled");
}

/// Write every frame as PGM under `dir/frames_subdir` and an unlabeled manifest at `dir/name`.
inline void save_unlabeled(const UnlabeledSet& set, const std::filesystem::path& dir, const std::string& name) {
  namespace fs = std::filesystem;
  const std::string sub = fs::path(name).stem().string();
  fs::create_directories(dir / sub);
  std::ofstream m(dir / name, std::ios::trunc);
  if (!m) throw IoError("cannot write manifest '" + (dir / name).string() + "'");
  m << "# clip_id\tframe_period_seconds\tframes\n";
  for (const auto& clip : set.clips) {
    std::ostringstream period;
    period.precision(17);
    period << clip.frame_period;
    m << clip.clip_id << '\t' << period.str() << '\t';
    for (std::size_t t = 0; t < clip.frames.size(); ++t) {
      const std::string rel = sub + "/" + clip.clip_id + "_" + std::to_string(t) + ".pgm";
      save_pgm(clip.frames[t], dir / rel);
      m << (t ? "," : "") << rel;
    }
    m << '\n';
  }
}

inline void save_labeled(const LabeledSet& set, const std::filesystem::path& dir, const std::string& name) {
  namespace fs = std::filesystem;
  const std::string sub = fs::path(name).stem().string();
  fs::create_directories(dir / sub);
  std::ofstream m(dir / name, std::ios::trunc);
  if (!m) throw IoError("cannot write manifest '" + (dir / name).string() + "'");
  m << "classes\t" << set.num_classes << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::string rel = sub + "/img_" + std::to_string(i) + ".pgm";
    save_pgm(set.images[i], dir / rel);
    m << rel << '\t' << set.labels[i] << '\n';
  }
}

}  // namespace ssfa
