#pragma once

// Datasets: IDX ingestion, seeded synthetic image generators, batching and augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gsearch/error.hpp"
#include "gsearch/tensor.hpp"

namespace gsearch {

struct Split {
  Tensor<float> images;  // [N, C, H, W] in [0, 1]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct Augment {
  int pad = 0;         // pad-and-random-crop margin in pixels
  bool hflip = false;  // random horizontal flip

  bool enabled() const { return pad > 0 || hflip; }
};

struct Dataset {
  Split train, test;
  int classes = 0;
  Augment augment;

  void validate() const {
    for (const Split* s : {&train, &test}) {
      if (s->size() == 0) throw Error("dataset split is empty");
      if (s->images.dim(0) != s->size()) throw Error("dataset split has mismatched image and label counts");
      for (int l : s->labels)
        if (l < 0 || l >= classes) throw Error("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;
};

// Unsigned-byte IDX payloads only.
inline IdxFile read_idx(const std::string& path, std::size_t want_rank) {
  const auto b = read_file(path);
  if (b.size() < 4) throw FormatError(path + ": truncated IDX header (expected at least 4 bytes, got " +
                                      std::to_string(b.size()) + ")");
  if (b[0] != 0 || b[1] != 0 || b[2] != 0x08 || b[3] != want_rank)
    throw FormatError(path + ": bad IDX magic, expected 0x000008" + std::string(want_rank == 1 ? "01" : "03"));
  const std::size_t header = 4 + 4 * want_rank;
  if (b.size() < header)
    throw FormatError(path + ": truncated IDX header (expected " + std::to_string(header) + " bytes, got " +
                      std::to_string(b.size()) + ")");
  IdxFile f;
  std::size_t count = 1;
  for (std::size_t i = 0; i < want_rank; ++i) {
    f.dims.push_back(be32(b, 4 + 4 * i));
    count *= f.dims.back();
  }
  if (b.size() != header + count)
    throw FormatError(path + ": " + (b.size() < header + count ? "truncated" : "oversized") + " IDX file, expected " +
                      std::to_string(header + count) + " bytes, got " + std::to_string(b.size()));
  f.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(header), b.end());
  return f;
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace detail

/// Reads an IDX image file ([N, H, W] unsigned bytes) and its label file ([N]).
inline Split load_idx(const std::string& images_path, const std::string& labels_path) {
  auto img = detail::read_idx(images_path, 3);
  auto lab = detail::read_idx(labels_path, 1);
  if (img.dims[0] != lab.dims[0])
    throw FormatError("IDX count mismatch: " + std::to_string(img.dims[0]) + " images but " +
                      std::to_string(lab.dims[0]) + " labels");
  if (img.dims[0] == 0 || img.dims[1] == 0 || img.dims[2] == 0) throw FormatError(images_path + ": empty IDX image set");
  Split s;
  std::vector<float> px(img.bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.bytes[i]) / 255.0f;
  s.images = Tensor<float>(Shape{img.dims[0], 1, img.dims[1], img.dims[2]}, std::move(px));
  s.labels.assign(lab.bytes.begin(), lab.bytes.end());
  return s;
}

/// Writes bytes as IDX image ([N, H, W]) and label files.
inline void write_idx(const std::string& images_path, const std::string& labels_path, std::uint32_t n, std::uint32_t h,
                      std::uint32_t w, const std::vector<unsigned char>& pixels, const std::vector<unsigned char>& labels) {
  if (pixels.size() != std::size_t{n} * h * w || labels.size() != n) throw Error("write_idx: size mismatch");
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img || !lab) throw FormatError("cannot write IDX files");
  img.write("\0\0\x08\x03", 4);
  for (auto d : {n, h, w}) detail::put_be32(img, d);
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  lab.write("\0\0\x08\x01", 4);
  detail::put_be32(lab, n);
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

inline Dataset load_idx_dataset(const std::string& train_images, const std::string& train_labels,
                                const std::string& test_images, const std::string& test_labels) {
  Dataset d;
  d.train = load_idx(train_images, train_labels);
  d.test = load_idx(test_images, test_labels);
  if (d.train.images.shape() != Shape{d.train.size(), 1, d.test.images.dim(2), d.test.images.dim(3)})
    throw FormatError("IDX train and test images differ in size");
  int mx = 0;
  for (const Split* s : {&d.train, &d.test})
    for (int l : s->labels) mx = std::max(mx, l);
  d.classes = mx + 1;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SyntheticKind { blobs, rings };

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "blobs") return SyntheticKind::blobs;
  if (s == "rings") return SyntheticKind::rings;
  throw Error("unknown synthetic dataset kind '" + s + "' (expected blobs or rings)");
}

inline constexpr int kSyntheticSize = 16;

namespace detail {

inline Split render_synthetic(SyntheticKind kind, std::size_t n, int classes, double noise, std::mt19937_64& rng) {
  const int S = kSyntheticSize;
  const double mid = (S - 1) / 2.0;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<float> px(n * S * S);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = labels[i];
    const double jx = noise * 1.5 * unit(rng), jy = noise * 1.5 * unit(rng);
    double cx, cy, radius;
    if (kind == SyntheticKind::blobs) {
      const double angle = 2.0 * M_PI * c / classes;
      cx = mid + 4.5 * std::cos(angle) + jx;
      cy = mid + 4.5 * std::sin(angle) + jy;
      radius = 0.0;
    } else {
      cx = mid + jx;
      cy = mid + jy;
      radius = 1.5 + 5.0 * (c + 0.5) / classes + noise * 0.5 * unit(rng);
    }
    float* img = &px[i * S * S];
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double d = std::hypot(x - cx, y - cy);
        const double r = d - radius;
        double v = std::exp(-(r * r) / (2.0 * 1.5 * 1.5));
        v += noise * 0.2 * unit(rng);
        img[y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return Split{Tensor<float>(Shape{n, 1, static_cast<std::size_t>(S), static_cast<std::size_t>(S)}, std::move(px)),
               std::move(labels)};
}

}  // namespace detail

/// Seeded 16x16 single-channel images. `blobs` draws a Gaussian spot at a per-class
/// position on a circle; `rings` draws a centred ring with a per-class radius. `noise`
/// scales position jitter and pixel noise. Labels are balanced within one.
inline Dataset gen_synthetic(SyntheticKind kind, std::size_t n, int classes, double noise, std::uint64_t seed,
                             std::size_t n_test = 0) {
  if (classes < 2) throw Error("synthetic data needs at least 2 classes");
  if (n < static_cast<std::size_t>(classes)) throw Error("synthetic data needs n >= classes");
  if (noise < 0) throw Error("synthetic noise must be non-negative");
  if (n_test == 0) n_test = n;
  std::mt19937_64 rng(seed);
  Dataset d;
  d.classes = classes;
  d.train = detail::render_synthetic(kind, n, classes, noise, rng);
  d.test = detail::render_synthetic(kind, n_test, classes, noise, rng);
  return d;
}

inline Dataset gen_synthetic(const std::string& kind, std::size_t n, int classes, double noise, std::uint64_t seed,
                             std::size_t n_test = 0) {
  return gen_synthetic(parse_synthetic_kind(kind), n, classes, noise, seed, n_test);
}

// ---------------------------------------------------------------------------
// Batching

/// Sample order for one epoch, a pure function of (n, seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Gathers samples `idx` of `split`; when `augment` is given, applies pad-and-crop and flips.
template <typename T>
Tensor<T> make_batch(const Split& split, std::span<const std::size_t> idx, const Augment* augment = nullptr,
                     std::mt19937_64* rng = nullptr) {
  const auto& s = split.images.shape();
  const std::size_t c = s[1], h = s[2], w = s[3], per = c * h * w;
  Tensor<T> out(Shape{idx.size(), c, h, w});
  auto src = split.images.data();
  auto dst = out.data();
  const bool aug = augment && augment->enabled() && rng;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const float* in = &src[idx[b] * per];
    T* o = &dst[b * per];
    if (!aug) {
      std::copy(in, in + per, o);
      continue;
    }
    const int p = augment->pad;
    std::uniform_int_distribution<int> shift(-p, p);
    const int dy = p > 0 ? shift(*rng) : 0, dx = p > 0 ? shift(*rng) : 0;
    const bool flip = augment->hflip && std::uniform_int_distribution<int>(0, 1)(*rng) == 1;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          long sx = static_cast<long>(flip ? w - 1 - x : x) + dx;
          const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
          o[(ch * h + y) * w + x] =
              inside ? static_cast<T>(in[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)]) : T{0};
        }
  }
  return out;
}

inline std::vector<int> batch_labels(const Split& split, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (auto i : idx) out.push_back(split.labels[i]);
  return out;
}

}  // namespace gsearch
