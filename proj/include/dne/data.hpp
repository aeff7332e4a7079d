// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion: the CIFAR-100 binary format and a seeded synthetic
// generator of class-conditional blob images, both split into task streams.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dne/continual.hpp"

namespace dne {

struct CifarFormat {
  static constexpr std::size_t channels = 3;
  static constexpr std::size_t side = 32;
  static constexpr std::size_t pixels = channels * side * side;
  static constexpr std::size_t record = 2 + pixels;  // coarse label, fine label, pixels
  static constexpr std::size_t classes = 100;
};

/// Parses a CIFAR-100 binary buffer. Labels are the fine labels; pixels are
/// scaled to [0, 1], channel planes in R, G, B order.
inline std::vector<Sample> parse_cifar100(const std::vector<unsigned char>& bytes) {
  const std::size_t n = bytes.size() / CifarFormat::record;
  if (bytes.size() % CifarFormat::record != 0)
    throw FormatError("truncated CIFAR-100 record at byte offset " +
                      std::to_string(n * CifarFormat::record) + " (" +
                      std::to_string(bytes.size() - n * CifarFormat::record) + " trailing bytes)");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * CifarFormat::record;
    const unsigned label = bytes[off + 1];
    if (label >= CifarFormat::classes)
      throw FormatError("corrupt CIFAR-100 record " + std::to_string(i) + " at byte offset " +
                        std::to_string(off) + ": fine label " + std::to_string(label));
    Tensor img({CifarFormat::channels, CifarFormat::side, CifarFormat::side}, 0.0);
    for (std::size_t p = 0; p < CifarFormat::pixels; ++p)
      img.data[p] = static_cast<double>(bytes[off + 2 + p]) / 255.0;
    out.push_back(Sample{std::move(img), static_cast<int>(label)});
  }
  return out;
}

inline std::vector<Sample> load_cifar100_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return parse_cifar100(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Keeps the first `per_class` samples of each class below `classes`;
/// per_class == 0 keeps all of them.
inline std::vector<Sample> take_per_class(const std::vector<Sample>& samples, std::size_t classes,
                                          std::size_t per_class) {
  std::map<int, std::size_t> seen;
  std::vector<Sample> out;
  for (const auto& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes) continue;
    if (per_class != 0 && seen[s.label] >= per_class) continue;
    ++seen[s.label];
    out.push_back(s);
  }
  return out;
}

/// Number of tasks for a first task of `first` classes followed by tasks of
/// `step` classes.
inline std::size_t task_count(std::size_t classes, std::size_t first, std::size_t step) {
  if (first == 0 || step == 0 || first > classes || (classes - first) % step != 0)
    throw ConfigError("cannot split " + std::to_string(classes) + " classes into a first task of " +
                      std::to_string(first) + " and steps of " + std::to_string(step));
  return 1 + (classes - first) / step;
}

/// Splits samples with labels 0..classes-1 into disjoint-class tasks, in
/// ascending class order.
inline TaskStream split_tasks(const std::vector<Sample>& train, const std::vector<Sample>& eval,
                              std::size_t classes, std::size_t first, std::size_t step) {
  const std::size_t T = task_count(classes, first, step);
  std::vector<Task> tasks(T);
  auto task_of = [&](int label) -> std::size_t {
    const auto c = static_cast<std::size_t>(label);
    return c < first ? 0 : 1 + (c - first) / step;
  };
  for (std::size_t c = 0; c < classes; ++c) tasks[task_of(static_cast<int>(c))].classes.push_back(static_cast<int>(c));
  for (const auto& s : train) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw StreamError("training label " + std::to_string(s.label) + " outside the class universe");
    tasks[task_of(s.label)].train.push_back(s);
  }
  for (const auto& s : eval) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw StreamError("evaluation label " + std::to_string(s.label) + " outside the class universe");
    tasks[task_of(s.label)].eval.push_back(s);
  }
  return TaskStream(std::move(tasks), step);
}

// -- synthetic blobs --------------------------------------------------------

struct SynthSpec {
  std::size_t classes = 8;
  std::size_t train_per_class = 24;
  std::size_t eval_per_class = 16;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

/// Appearance of one class: a colored square at a fixed cell plus a weaker
/// secondary square of another color.
struct BlobPrototype {
  std::vector<double> color, accent;
  std::size_t cx = 0, cy = 0, ax = 0, ay = 0;
};

inline std::vector<BlobPrototype> synth_prototypes(const SynthSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic stream needs at least 2 classes");
  if (spec.image_size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 17);
  const std::size_t cells = 4;  // coarse 4x4 grid of blob positions
  const std::size_t palette = std::size_t{1} << spec.channels;
  std::vector<std::size_t> combos(cells * cells * palette);
  std::iota(combos.begin(), combos.end(), 0);
  std::shuffle(combos.begin(), combos.end(), rng);
  if (spec.classes > combos.size())
    throw ConfigError("synthetic stream supports at most " + std::to_string(combos.size()) +
                      " classes");
  std::uniform_int_distribution<std::size_t> cell(0, cells * cells - 1), col(0, palette - 1);
  const std::size_t step = spec.image_size / cells;
  auto corner = [&](std::size_t code) {
    std::vector<double> c(spec.channels);
    for (std::size_t ch = 0; ch < spec.channels; ++ch) c[ch] = (code >> ch) & 1 ? 0.95 : 0.05;
    return c;
  };
  std::vector<BlobPrototype> out;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    BlobPrototype p;
    const std::size_t pos = combos[k] / palette, code = combos[k] % palette;
    p.cx = (pos % cells) * step;
    p.cy = (pos / cells) * step;
    p.color = corner(code);
    const std::size_t apos = cell(rng);
    p.ax = (apos % cells) * step;
    p.ay = (apos / cells) * step;
    p.accent = corner(col(rng));
    out.push_back(std::move(p));
  }
  return out;
}

/// One image of class `k`: gray background, the class blobs with a one-pixel
/// positional jitter, brightness jitter and Gaussian pixel noise, clamped to
/// [0, 1].
inline Tensor synth_image(const SynthSpec& spec, const BlobPrototype& p, Rng& rng) {
  const std::size_t n = spec.image_size, C = spec.channels, blob = n / 4;
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_real_distribution<double> bright(0.8, 1.0);
  Tensor img({C, n, n}, 0.5);
  auto paint = [&](std::size_t x0, std::size_t y0, const std::vector<double>& color, double alpha,
                   std::size_t size) {
    const int dx = jitter(rng), dy = jitter(rng);
    const double b = bright(rng);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const long px = static_cast<long>(x0 + x) + dx, py = static_cast<long>(y0 + y) + dy;
        if (px < 0 || py < 0 || px >= static_cast<long>(n) || py >= static_cast<long>(n)) continue;
        for (std::size_t c = 0; c < C; ++c) {
          double& v = img.data[(c * n + static_cast<std::size_t>(py)) * n + static_cast<std::size_t>(px)];
          v = (1.0 - alpha) * v + alpha * b * color[c];
        }
      }
  };
  paint(p.ax, p.ay, p.accent, 0.5, blob);
  paint(p.cx, p.cy, p.color, 1.0, blob);
  for (auto& v : img.data) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return img;
}

struct SynthData {
  std::vector<Sample> train, eval;
};

/// Generates train and evaluation samples, class by class, from one seed.
inline SynthData synth_samples(const SynthSpec& spec) {
  if (spec.train_per_class < 2 || spec.eval_per_class < 1)
    throw ConfigError("synthetic stream needs at least 2 training samples per class");
  const auto protos = synth_prototypes(spec);
  Rng rng(spec.seed);
  SynthData d;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t i = 0; i < spec.train_per_class; ++i)
      d.train.push_back(Sample{synth_image(spec, protos[k], rng), static_cast<int>(k)});
    for (std::size_t i = 0; i < spec.eval_per_class; ++i)
      d.eval.push_back(Sample{synth_image(spec, protos[k], rng), static_cast<int>(k)});
  }
  return d;
}

inline TaskStream synth_stream(const SynthSpec& spec, std::size_t first, std::size_t step) {
  const auto d = synth_samples(spec);
  return split_tasks(d.train, d.eval, spec.classes, first, step);
}

/// Per-class pixel means of a sample set, keyed by label.
inline std::map<int, std::vector<double>> class_means(const std::vector<Sample>& samples) {
  std::map<int, std::vector<double>> sum;
  std::map<int, std::size_t> count;
  for (const auto& s : samples) {
    auto& acc = sum[s.label];
    if (acc.empty()) acc.assign(s.image.numel(), 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.image.data[i];
    ++count[s.label];
  }
  for (auto& [k, v] : sum)
    for (auto& x : v) x /= static_cast<double>(count[k]);
  return sum;
}

/// Smallest L2 distance between two class means.
inline double min_class_mean_distance(const std::vector<Sample>& samples) {
  const auto means = class_means(samples);
  double best = std::numeric_limits<double>::infinity();
  for (auto a = means.begin(); a != means.end(); ++a)
    for (auto b = std::next(a); b != means.end(); ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < a->second.size(); ++i) {
        const double e = a->second[i] - b->second[i];
        d += e * e;
      }
      best = std::min(best, std::sqrt(d));
    }
  return best;
}

}  // namespace dne
