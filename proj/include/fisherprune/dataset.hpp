#ifndef FISHERPRUNE_DATASET_HPP
#define FISHERPRUNE_DATASET_HPP

// Labeled image sets and their on-disk forms:
//  * dataset directory: manifest.json + little-endian float32 image blob +
//    uint8 label blob;
//  * IDX (MNIST-style) image/label file pairs;
//  * an in-repo synthetic-shapes generator producing MNIST-style digits-like
//    glyph classes for desk-scale experiments.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fisherprune/error.hpp"
#include "fisherprune/graph.hpp"
#include "fisherprune/tensor.hpp"

namespace fisherprune {

struct Dataset {
  FeatureShape shape;
  std::size_t classes = 0;
  Tensor images;            // N x C x H x W
  std::vector<int> labels;  // N entries in [0, classes)

  std::size_t size() const { return labels.size(); }

  void validate() const {
    require(!labels.empty(), ErrorKind::Data, "dataset is empty");
    require(classes >= 1, ErrorKind::Data, "dataset class count must be positive");
    require(images.shape() == Shape{labels.size(), shape.c, shape.h, shape.w}, ErrorKind::Data,
            "dataset image tensor " + shape_str(images.shape()) + " does not match " +
                std::to_string(labels.size()) + " samples of " + shape_str(shape.shape()));
    for (int y : labels)
      require(y >= 0 && static_cast<std::size_t>(y) < classes, ErrorKind::Data,
              "dataset label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                  ")");
  }

  /// Samples [begin, begin + count) as a batch tensor.
  Tensor batch(std::size_t begin, std::size_t count) const {
    const std::size_t per = shape.size();
    Tensor b({count, shape.c, shape.h, shape.w});
    std::copy_n(images.data() + begin * per, count * per, b.data());
    return b;
  }

  Tensor gather(const std::vector<std::size_t>& idx) const {
    const std::size_t per = shape.size();
    Tensor b({idx.size(), shape.c, shape.h, shape.w});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(images.data() + idx[k] * per, per, b.data() + k * per);
    return b;
  }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset d{shape, classes, batch(0, n), {labels.begin(), labels.begin() + n}};
    return d;
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.good(), ErrorKind::Data, path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::vector<char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::Data, "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T>
T from_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <class T>
void append_le(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(b, sizeof(T));
}

}  // namespace detail

/// Reads an IDX ubyte image file (magic 0x803, N x H x W) and label file
/// (magic 0x801). Pixels are scaled to [0, 1].
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t classes = 10) {
  std::ifstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  require(fi.good(), ErrorKind::Data, "cannot open IDX images " + images.string());
  require(fl.good(), ErrorKind::Data, "cannot open IDX labels " + labels.string());
  require(detail::read_be32(fi, images.string()) == 0x803, ErrorKind::Data,
          images.string() + ": not an IDX ubyte image file");
  const std::uint32_t n = detail::read_be32(fi, images.string());
  const std::uint32_t h = detail::read_be32(fi, images.string());
  const std::uint32_t w = detail::read_be32(fi, images.string());
  require(detail::read_be32(fl, labels.string()) == 0x801, ErrorKind::Data,
          labels.string() + ": not an IDX label file");
  const std::uint32_t nl = detail::read_be32(fl, labels.string());
  require(n == nl, ErrorKind::Data, "IDX image count " + std::to_string(n) +
                                        " != label count " + std::to_string(nl));
  require(n > 0 && h > 0 && w > 0, ErrorKind::Data, images.string() + ": empty IDX file");

  Dataset d;
  d.shape = {1, h, w};
  d.classes = classes;
  std::vector<unsigned char> px(static_cast<std::size_t>(n) * h * w);
  fi.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  require(static_cast<std::size_t>(fi.gcount()) == px.size(), ErrorKind::Data,
          images.string() + ": truncated pixel data");
  std::vector<unsigned char> lb(n);
  fl.read(reinterpret_cast<char*>(lb.data()), n);
  require(static_cast<std::size_t>(fl.gcount()) == lb.size(), ErrorKind::Data,
          labels.string() + ": truncated label data");
  d.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < px.size(); ++i) d.images[i] = px[i] / 255.0;
  d.labels.assign(lb.begin(), lb.end());
  d.validate();
  return d;
}

/// Writes a single-channel dataset as an IDX pair, quantizing to bytes.
inline void save_idx(const Dataset& d, const std::filesystem::path& images,
                     const std::filesystem::path& labels) {
  require(d.shape.c == 1, ErrorKind::Usage, "IDX holds single-channel images only");
  std::ofstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  require(fi.good() && fl.good(), ErrorKind::Data, "cannot write IDX files");
  detail::write_be32(fi, 0x803);
  detail::write_be32(fi, static_cast<std::uint32_t>(d.size()));
  detail::write_be32(fi, static_cast<std::uint32_t>(d.shape.h));
  detail::write_be32(fi, static_cast<std::uint32_t>(d.shape.w));
  std::vector<unsigned char> px(d.images.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(d.images[i], 0.0, 1.0) * 255.0));
  fi.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  detail::write_be32(fl, 0x801);
  detail::write_be32(fl, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) fl.put(static_cast<char>(y));
}

/// Loads a dataset directory (manifest.json + blobs).
inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  require(in.good(), ErrorKind::Data, "cannot open " + manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  try {
    const auto shape = m.at("shape").get<std::vector<std::size_t>>();
    require(shape.size() == 3, ErrorKind::Data, manifest_path.string() + ": shape must be [c,h,w]");
    d.shape = {shape[0], shape[1], shape[2]};
    d.classes = m.at("classes").get<std::size_t>();
    const auto n = m.at("samples").get<std::size_t>();
    const auto img = detail::read_file(dir / m.value("images", "images.f32"));
    const auto lab = detail::read_file(dir / m.value("labels", "labels.u8"));
    require(img.size() == n * d.shape.size() * 4, ErrorKind::Data,
            dir.string() + ": image blob holds " + std::to_string(img.size()) +
                " bytes, manifest implies " + std::to_string(n * d.shape.size() * 4));
    require(lab.size() == n, ErrorKind::Data,
            dir.string() + ": label blob holds " + std::to_string(lab.size()) + " entries, expected " +
                std::to_string(n));
    d.images = Tensor({n, d.shape.c, d.shape.h, d.shape.w});
    for (std::size_t i = 0; i < d.images.size(); ++i)
      d.images[i] = detail::from_le<float>(img.data() + 4 * i);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<unsigned char>(lab[i]);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, manifest_path.string() + ": " + e.what());
  }
  d.validate();
  return d;
}

inline void save_dataset_dir(const Dataset& d, const std::filesystem::path& dir) {
  d.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json m = {{"format", "fisherprune-dataset"},
                      {"version", 1},
                      {"samples", d.size()},
                      {"shape", {d.shape.c, d.shape.h, d.shape.w}},
                      {"classes", d.classes},
                      {"images", "images.f32"},
                      {"labels", "labels.u8"}};
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
  std::string img;
  img.reserve(d.images.size() * 4);
  for (double v : d.images.values()) detail::append_le<float>(img, static_cast<float>(v));
  std::ofstream(dir / "images.f32", std::ios::binary) << img;
  std::string lab(d.labels.begin(), d.labels.end());
  std::ofstream(dir / "labels.u8", std::ios::binary) << lab;
}

/// Loads either a dataset directory or an IDX pair given as "images,labels".
inline Dataset load_dataset(const std::string& spec) {
  const auto comma = spec.find(',');
  if (comma != std::string::npos) return load_idx(spec.substr(0, comma), spec.substr(comma + 1));
  return load_dataset_dir(spec);
}

// ---------------------------------------------------------------------------
// Synthetic glyphs. Ten classes of line/outline figures with random placement,
// size, stroke width, contrast and pixel noise.

struct SynthOptions {
  std::size_t samples = 1000;
  std::size_t side = 16;
  double noise = 0.08;
  std::uint64_t seed = 1;
};

namespace detail {

struct Segment {
  double x0, y0, x1, y1;
};

inline double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = s.x0 + t * dx - px, qy = s.y0 + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Distance from (px,py) to the figure of class `cls` centered at (cx,cy) with
// half-extent r.
inline double glyph_distance(int cls, double px, double py, double cx, double cy, double r) {
  std::vector<Segment> segs;
  const double l = cx - r, rt = cx + r, t = cy - r, b = cy + r;
  switch (cls) {
    case 0: segs = {{l, cy, rt, cy}}; break;                                    // horizontal bar
    case 1: segs = {{cx, t, cx, b}}; break;                                     // vertical bar
    case 2: segs = {{l, t, rt, b}}; break;                                      // diagonal
    case 3: segs = {{l, b, rt, t}}; break;                                      // anti-diagonal
    case 4: segs = {{l, cy, rt, cy}, {cx, t, cx, b}}; break;                    // plus
    case 5: segs = {{l, t, rt, b}, {l, b, rt, t}}; break;                       // cross
    case 6: segs = {{l, t, rt, t}, {rt, t, rt, b}, {rt, b, l, b}, {l, b, l, t}}; break;  // square
    case 7: segs = {{l, t, rt, t}, {cx, t, cx, b}}; break;                      // T
    case 8: {                                                                   // ring
      const double d = std::hypot(px - cx, py - cy);
      return std::abs(d - r);
    }
    case 9: segs = {{l, t, l, b}, {l, b, rt, b}}; break;                        // L corner
    default: fail(ErrorKind::Usage, "glyph class out of range");
  }
  double best = 1e300;
  for (const auto& s : segs) best = std::min(best, segment_distance(px, py, s));
  return best;
}

}  // namespace detail

/// Deterministic for a given seed; labels cycle through the ten classes in a
/// shuffled order so every prefix is close to balanced.
inline Dataset make_synthetic_glyphs(const SynthOptions& opt) {
  require(opt.samples > 0, ErrorKind::Usage, "synthetic dataset needs at least one sample");
  require(opt.side >= 12, ErrorKind::Usage, "synthetic glyphs need side >= 12");
  constexpr int kClasses = 10;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Dataset d;
  d.shape = {1, opt.side, opt.side};
  d.classes = kClasses;
  d.images = Tensor({opt.samples, 1, opt.side, opt.side});
  d.labels.resize(opt.samples);
  const double side = static_cast<double>(opt.side);

  std::array<int, kClasses> order{};
  for (int k = 0; k < kClasses; ++k) order[k] = k;
  for (std::size_t s = 0; s < opt.samples; ++s) {
    if (s % kClasses == 0) std::shuffle(order.begin(), order.end(), rng);
    const int cls = order[s % kClasses];
    d.labels[s] = cls;
    const double r = side * (0.2 + 0.12 * unit(rng));
    const double margin = r + 1.0;
    const double cx = margin + (side - 2 * margin) * unit(rng);
    const double cy = margin + (side - 2 * margin) * unit(rng);
    const double half_width = 0.5 + 0.5 * unit(rng);
    const double ink = 0.6 + 0.4 * unit(rng);
    double* img = d.images.data() + s * opt.side * opt.side;
    for (std::size_t y = 0; y < opt.side; ++y)
      for (std::size_t x = 0; x < opt.side; ++x) {
        const double dist = detail::glyph_distance(cls, x + 0.5, y + 0.5, cx, cy, r);
        const double cover = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
        const double v = ink * cover + opt.noise * gauss(rng);
        img[y * opt.side + x] = std::clamp(v, 0.0, 1.0);
      }
  }
  return d;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_DATASET_HPP
