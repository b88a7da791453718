#include "scl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "scl/metrics.hpp"
#include "scl/rng.hpp"
#include "tensor_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace scl {

const std::vector<std::string>& scene_class_names() {
  static const std::vector<std::string> names = {"floor", "wall",  "box",
                                                 "wedge", "ridge", "dome"};
  return names;
}

namespace {

constexpr double kDepthNoiseSigma = 0.004;  // meters
constexpr double kRgbNoiseSigma = 0.06;

struct Rgb {
  double r, g, b;
};

Rgb class_albedo(int class_id) {
  switch (class_id) {
    case kFloor: return {0.42, 0.40, 0.38};
    case kWall: return {0.55, 0.54, 0.52};
    // The four object classes share one albedo: color alone cannot separate
    // them, only the depth profile can.
    default: return {0.50, 0.48, 0.46};
  }
}

double object_profile(const SceneObject& o, i64 x, i64 y) {
  const double cx = o.x0 + o.width / 2.0;
  const double cy = o.y0 + o.height / 2.0;
  switch (o.class_id) {
    case kBox:
    case kWedge:
      return o.slant_x * (x - cx) + o.slant_y * (y - cy);
    case kRidge: {
      const double half = (o.axis == 0 ? o.height : o.width) / 2.0;
      const double u = ((o.axis == 0 ? y - cy : x - cx)) / std::max(half, 1.0);
      return -o.amplitude * std::sqrt(std::max(0.0, 1.0 - u * u));
    }
    case kDome: {
      const double ux = (x - cx) / std::max(o.width / 2.0, 1.0);
      const double uy = (y - cy) / std::max(o.height / 2.0, 1.0);
      const double r2 = ux * ux + uy * uy;
      return -o.amplitude * std::sqrt(std::max(0.0, 1.0 - r2));
    }
    default:
      return 0.0;
  }
}

}  // namespace

SegmentationSample generate_scene(const SceneRecipe& recipe, std::uint64_t seed) {
  const i64 h = recipe.height, w = recipe.width;
  if (h < 4 || w < 4) throw std::invalid_argument("scene rasters must be at least 4 x 4");
  // horizon 0 means no wall at all: an empty recipe is a pure floor plane.
  const i64 horizon = std::clamp<i64>(recipe.horizon_y, 0, h - 2);

  std::vector<double> depth(static_cast<size_t>(h * w));
  std::vector<int> owner(static_cast<size_t>(h * w));  // -1 floor, -2 wall, else object index
  Tensor<float> labels({h, w});

  // Background planes.
  for (i64 y = 0; y < h; ++y) {
    for (i64 x = 0; x < w; ++x) {
      const size_t px = static_cast<size_t>(y * w + x);
      if (y < horizon) {
        depth[px] = recipe.wall_base + recipe.wall_slant * (x - w / 2.0);
        owner[px] = -2;
        labels(y, x) = static_cast<float>(kWall);
      } else {
        const double t = static_cast<double>(y - horizon) / static_cast<double>(h - 1 - horizon);
        depth[px] = recipe.wall_base + (recipe.floor_near - recipe.wall_base) * t;
        owner[px] = -1;
        labels(y, x) = static_cast<float>(kFloor);
      }
    }
  }

  // Objects, painter's order.
  for (size_t k = 0; k < recipe.objects.size(); ++k) {
    const SceneObject& o = recipe.objects[k];
    if (o.class_id < 0 || o.class_id >= kNumSceneClasses)
      throw std::invalid_argument("object class id out of range");
    const i64 y1 = std::min<i64>(h, o.y0 + o.height);
    const i64 x1 = std::min<i64>(w, o.x0 + o.width);
    for (i64 y = std::max<i64>(0, o.y0); y < y1; ++y) {
      for (i64 x = std::max<i64>(0, o.x0); x < x1; ++x) {
        const size_t px = static_cast<size_t>(y * w + x);
        depth[px] = o.base_distance + object_profile(o, x, y);
        owner[px] = static_cast<int>(k);
        labels(y, x) = static_cast<float>(o.class_id);
      }
    }
  }

  // Textures and noise. The draw order is fixed and independent of the
  // geometry so identical seeds give identical textures whatever the depths.
  Xoshiro256 rng(seed);
  const double light_gain = rng.uniform(-0.15, 0.15);
  Rgb floor_tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  Rgb wall_tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  std::vector<Rgb> object_tints(recipe.objects.size());
  for (auto& t : object_tints)
    t = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};

  Tensor<float> rgb({3, h, w});
  for (i64 y = 0; y < h; ++y) {
    const double light = light_gain * (static_cast<double>(y) / (h - 1) - 0.5);
    for (i64 x = 0; x < w; ++x) {
      const size_t px = static_cast<size_t>(y * w + x);
      const int who = owner[px];
      const Rgb base = class_albedo(who == -1 ? kFloor
                                    : who == -2 ? kWall
                                                : recipe.objects[static_cast<size_t>(who)].class_id);
      const Rgb tint = who == -1 ? floor_tint : who == -2 ? wall_tint
                                              : object_tints[static_cast<size_t>(who)];
      const double ch[3] = {base.r + tint.r, base.g + tint.g, base.b + tint.b};
      for (int c = 0; c < 3; ++c) {
        const double v = ch[c] + light + kRgbNoiseSigma * rng.normal();
        rgb(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  Tensor<float> depth_t({1, h, w});
  const float offset = static_cast<float>(recipe.depth_offset);
  for (i64 p = 0; p < h * w; ++p) {
    const double noisy = depth[static_cast<size_t>(p)] + kDepthNoiseSigma * rng.normal();
    // Cast first, then one float addition: shifting depth_offset by delta
    // from a zero baseline moves every value by exactly delta.
    depth_t[p] = static_cast<float>(noisy) + offset;
  }

  if (recipe.ignore_border > 0) {
    const i64 b = recipe.ignore_border;
    for (i64 y = 0; y < h; ++y)
      for (i64 x = 0; x < w; ++x)
        if (y < b || y >= h - b || x < b || x >= w - b) labels(y, x) = 255.0f;
  }

  return SegmentationSample{std::move(rgb), std::move(depth_t), std::move(labels)};
}

std::vector<SegmentationSample> generate_split(int num_samples, std::uint64_t seed,
                                               double shift_lo, double shift_hi,
                                               int height, int width) {
  if (num_samples < 0) throw std::invalid_argument("negative sample count");
  if (shift_hi < shift_lo) throw std::invalid_argument("shift range is inverted");

  std::vector<SegmentationSample> samples;
  samples.reserve(static_cast<size_t>(num_samples));
  for (int i = 0; i < num_samples; ++i) {
    Xoshiro256 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));

    SceneRecipe r;
    r.height = height;
    r.width = width;
    r.horizon_y = static_cast<int>(rng.uniform(0.38, 0.58) * height);
    r.wall_base = rng.uniform(3.4, 4.6);
    r.wall_slant = rng.uniform(-0.008, 0.008);
    r.floor_near = rng.uniform(1.6, 2.4);
    r.ignore_border = 1;
    r.depth_offset = rng.uniform(shift_lo, shift_hi);

    // One object of each class per scene in a random z-order keeps the class
    // pixel frequencies stable across splits.
    int classes[4] = {kBox, kWedge, kRidge, kDome};
    shuffle(std::begin(classes), std::end(classes), rng);
    for (int class_id : classes) {
      SceneObject o;
      o.class_id = class_id;
      o.width = static_cast<int>(rng.uniform(0.22, 0.45) * width);
      o.height = static_cast<int>(rng.uniform(0.22, 0.45) * height);
      o.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - o.width)));
      o.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - o.height)));
      o.base_distance = rng.uniform(1.8, 3.2);
      if (class_id == kWedge) {
        o.slant_x = rng.uniform(0.015, 0.05) * (rng.below(2) ? 1.0 : -1.0);
        o.slant_y = rng.uniform(0.015, 0.05) * (rng.below(2) ? 1.0 : -1.0);
      } else if (class_id == kBox) {
        o.slant_x = rng.uniform(-0.006, 0.006);
        o.slant_y = rng.uniform(-0.006, 0.006);
      } else {
        o.amplitude = rng.uniform(0.25, 0.7);
        o.axis = static_cast<int>(rng.below(2));
      }
      r.objects.push_back(o);
    }

    samples.push_back(generate_scene(r, rng.next()));
  }
  return samples;
}

Dataset generate_dataset(int train_n, int test_n, std::uint64_t seed,
                         double train_shift_lo, double train_shift_hi,
                         double test_shift_lo, double test_shift_hi,
                         int height, int width) {
  Dataset ds;
  ds.train = generate_split(train_n, derive_seed(seed, 1), train_shift_lo, train_shift_hi,
                            height, width);
  ds.test = generate_split(test_n, derive_seed(seed, 2), test_shift_lo, test_shift_hi,
                           height, width);

  ds.meta.num_classes = kNumSceneClasses;
  ds.meta.class_names = scene_class_names();
  ds.meta.height = height;
  ds.meta.width = width;

  // Normalization from the training split only.
  double sum = 0.0, sum_sq = 0.0;
  i64 count = 0;
  for (const auto& s : ds.train) {
    for (i64 i = 0; i < s.depth.size(); ++i) {
      const double d = s.depth[i];
      sum += d;
      sum_sq += d * d;
      ++count;
    }
  }
  if (count > 0) {
    ds.meta.depth_mean = sum / static_cast<double>(count);
    const double var = sum_sq / static_cast<double>(count) - ds.meta.depth_mean * ds.meta.depth_mean;
    ds.meta.depth_std = std::sqrt(std::max(var, 1e-12));
  }
  return ds;
}

namespace {

constexpr std::uint64_t kSampleTensorCount = 3;

void write_sample(const fs::path& path, const SegmentationSample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  detail::write_u64(os, kSampleTensorCount);
  detail::write_tensor_record(os, "rgb", s.rgb);
  detail::write_tensor_record(os, "depth", s.depth);
  detail::write_tensor_record(os, "labels", s.labels);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

SegmentationSample read_sample(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open sample file " + path.string());
  const std::uint64_t count = detail::read_u64(is);
  if (count != kSampleTensorCount)
    throw std::runtime_error("sample file " + path.string() + " has unexpected tensor count");
  SegmentationSample s;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name;
    Tensor<float> t = detail::read_tensor_record<float>(is, name);
    if (name == "rgb") s.rgb = std::move(t);
    else if (name == "depth") s.depth = std::move(t);
    else if (name == "labels") s.labels = std::move(t);
    else throw std::runtime_error("sample file has unknown tensor '" + name + "'");
  }
  return s;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& dataset) {
  fs::create_directories(dir);

  json index;
  index["format"] = "scds";
  index["version"] = 1;
  index["num_classes"] = dataset.meta.num_classes;
  index["class_names"] = dataset.meta.class_names;
  index["ignore_label"] = kIgnoreLabel;
  index["height"] = dataset.meta.height;
  index["width"] = dataset.meta.width;
  index["depth_mean"] = dataset.meta.depth_mean;
  index["depth_std"] = dataset.meta.depth_std;

  auto write_split = [&](const char* split, const std::vector<SegmentationSample>& samples) {
    std::vector<std::string> names;
    names.reserve(samples.size());
    char buf[32];
    for (size_t i = 0; i < samples.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s_%05zu.bin", split, i);
      names.emplace_back(buf);
      write_sample(fs::path(dir) / buf, samples[i]);
    }
    index["splits"][split] = names;
  };
  write_split("train", dataset.train);
  write_split("test", dataset.test);

  std::ofstream os(fs::path(dir) / "index.json");
  if (!os) throw std::runtime_error("cannot write dataset index in " + dir);
  os << index.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  const fs::path index_path = fs::path(dir) / "index.json";
  std::ifstream is(index_path);
  if (!is) throw std::runtime_error("dataset index not found: " + index_path.string());
  json index;
  try {
    is >> index;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed dataset index: " + std::string(e.what()));
  }
  if (index.value("format", "") != "scds")
    throw std::runtime_error("not a dataset index: " + index_path.string());

  Dataset ds;
  ds.meta.num_classes = index.at("num_classes").get<int>();
  ds.meta.class_names = index.at("class_names").get<std::vector<std::string>>();
  ds.meta.height = index.at("height").get<int>();
  ds.meta.width = index.at("width").get<int>();
  ds.meta.depth_mean = index.at("depth_mean").get<double>();
  ds.meta.depth_std = index.at("depth_std").get<double>();

  auto read_split = [&](const char* split, std::vector<SegmentationSample>& out) {
    for (const auto& name : index.at("splits").at(split)) {
      out.push_back(read_sample(fs::path(dir) / name.get<std::string>()));
    }
  };
  read_split("train", ds.train);
  read_split("test", ds.test);
  return ds;
}

std::pair<Tensor<float>, Tensor<float>> make_batch(
    std::span<const SegmentationSample> samples, const DatasetMeta& meta, bool rgb_only) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const i64 h = samples[0].rgb.extent(1), w = samples[0].rgb.extent(2);
  const i64 n = static_cast<i64>(samples.size());
  const i64 channels = rgb_only ? 3 : 4;

  Tensor<float> input({n, channels, h, w});
  Tensor<float> labels({n, h, w});
  const float mean = static_cast<float>(meta.depth_mean);
  const float std_dev = static_cast<float>(meta.depth_std);

  for (i64 b = 0; b < n; ++b) {
    const SegmentationSample& s = samples[static_cast<size_t>(b)];
    if (s.rgb.extent(1) != h || s.rgb.extent(2) != w)
      throw std::invalid_argument("samples in a batch must share raster size");
    float* dst = input.data() + b * channels * h * w;
    std::copy_n(s.rgb.data(), 3 * h * w, dst);
    if (!rgb_only) {
      float* dch = dst + 3 * h * w;
      for (i64 p = 0; p < h * w; ++p) dch[p] = (s.depth[p] - mean) / std_dev;
    }
    std::copy_n(s.labels.data(), h * w, labels.data() + b * h * w);
  }
  return {std::move(input), std::move(labels)};
}

}  // namespace scl
