#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "forge/train.hpp"

FORGE_NAMESPACE_BEGIN
namespace train {

namespace {

constexpr int kSide = 16;

using Rng = std::mt19937_64;
using Painter = std::function<void(int label, Rng& rng, std::vector<Real>& img)>;

Real uniform(Rng& rng, double lo, double hi) { return static_cast<Real>(std::uniform_real_distribution<double>(lo, hi)(rng)); }

void paint_shape(int label, Rng& rng, std::vector<Real>& img) {
  const double cx = uniform(rng, 5.5, 10.5), cy = uniform(rng, 5.5, 10.5);
  const double s = uniform(rng, 3.0, 5.0), a = uniform(rng, 0.6, 1.0);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const double dx = std::abs(x - cx), dy = std::abs(y - cy);
      bool inside = false;
      if (label == 0) inside = dx <= s && dy <= s;
      if (label == 1) inside = dx * dx + dy * dy <= s * s;
      if (label == 2) inside = (dx <= 0.8 && dy <= s) || (dy <= 0.8 && dx <= s);
      if (inside) img[static_cast<std::size_t>(y * kSide + x)] += static_cast<Real>(a);
    }
  }
}

void paint_ring(int label, Rng& rng, std::vector<Real>& img) {
  const double cx = uniform(rng, 6.5, 8.5), cy = uniform(rng, 6.5, 8.5);
  const double r = label == 0 ? uniform(rng, 2.0, 3.5) : uniform(rng, 5.0, 6.5);
  const double a = uniform(rng, 0.6, 1.0);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (std::abs(d - r) <= 0.75) img[static_cast<std::size_t>(y * kSide + x)] += static_cast<Real>(a);
    }
  }
}

void paint_patch(int label, Rng& rng, std::vector<Real>& img) {
  const int px = std::uniform_int_distribution<int>(0, 8)(rng), py = std::uniform_int_distribution<int>(0, 8)(rng);
  const bool vertical = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  const double a = uniform(rng, 0.6, 1.0);
  for (int y = py; y < py + 8; ++y) {
    for (int x = px; x < px + 8; ++x) {
      const int bit = label == 0 ? (x + y) & 1 : (vertical ? x & 1 : y & 1);
      if (bit != 0) img[static_cast<std::size_t>(y * kSide + x)] += static_cast<Real>(a);
    }
  }
}

Dataset make_split(const Painter& paint, int classes, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  std::vector<Real> data;
  data.reserve(static_cast<std::size_t>(n) * kSide * kSide);
  std::vector<Real> img(kSide * kSide);
  for (int label : labels) {
    for (auto& p : img) p = static_cast<Real>(noise(rng));
    paint(label, rng, img);
    data.insert(data.end(), img.begin(), img.end());
  }
  Dataset d;
  d.images = Tensor(Shape{n, 1, kSide, kSide}, std::move(data));
  d.labels = std::move(labels);
  d.classes = classes;
  return d;
}

}  // namespace

const std::vector<std::string>& dataset_names() {
  static const std::vector<std::string> names{"shapes16", "rings", "parity-patch"};
  return names;
}

Splits generate_dataset(const std::string& name, std::uint64_t seed, SplitSizes sizes) {
  Painter paint;
  int classes = 2;
  if (name == "shapes16") {
    paint = paint_shape;
    classes = 3;
  } else if (name == "rings") {
    paint = paint_ring;
  } else if (name == "parity-patch") {
    paint = paint_patch;
  } else {
    throw ConfigError("unknown dataset '" + name + "' (expected shapes16, rings or parity-patch)");
  }
  if (sizes.train <= 0 || sizes.val <= 0 || sizes.test <= 0) throw ConfigError("dataset split sizes must be positive");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu};
  std::vector<std::uint32_t> streams(3);
  seq.generate(streams.begin(), streams.end());
  return Splits{make_split(paint, classes, sizes.train, streams[0]), make_split(paint, classes, sizes.val, streams[1]),
                make_split(paint, classes, sizes.test, streams[2])};
}

Tensor Dataset::batch(const std::vector<std::int64_t>& idx, std::size_t begin, std::size_t end) const {
  Shape shape = images.shape();
  const std::int64_t row = numel(shape) / shape[0];
  shape[0] = static_cast<std::int64_t>(end - begin);
  std::vector<Real> out;
  out.reserve(static_cast<std::size_t>(shape[0] * row));
  const auto v = images.values();
  for (std::size_t i = begin; i < end; ++i) {
    const auto* src = v.data() + idx[i] * row;
    out.insert(out.end(), src, src + row);
  }
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> Dataset::batch_labels(const std::vector<std::int64_t>& idx, std::size_t begin, std::size_t end) const {
  std::vector<int> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(labels[static_cast<std::size_t>(idx[i])]);
  return out;
}

}  // namespace train
FORGE_NAMESPACE_END
