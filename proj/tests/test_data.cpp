#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "scl/data.hpp"
#include "scl/metrics.hpp"
#include "scl/rng.hpp"

using namespace scl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() / (std::string("scl-test-") + tag);
  fs::remove_all(dir);
  return dir;
}

bool samples_equal(const SegmentationSample& a, const SegmentationSample& b) {
  return max_abs_diff(a.rgb, b.rgb) == 0.0 && max_abs_diff(a.depth, b.depth) == 0.0 &&
         max_abs_diff(a.labels, b.labels) == 0.0;
}

}  // namespace

TEST_CASE("empty recipe renders an all-floor planar scene") {
  SceneRecipe recipe;
  recipe.height = recipe.width = 16;
  const SegmentationSample s = generate_scene(recipe, 5);
  for (i64 i = 0; i < s.labels.size(); ++i) CHECK(s.labels[i] == static_cast<float>(kFloor));
  // planar: rows are constant, depth varies linearly down the image
  for (i64 y = 0; y < 16; ++y)
    for (i64 x = 1; x < 16; ++x) CHECK(s.depth(0, y, x) == s.depth(0, y, 0));
  const float d0 = s.depth(0, 0, 0), d1 = s.depth(0, 8, 0), d2 = s.depth(0, 15, 0);
  CHECK(d0 > d1);
  CHECK(d1 > d2);
  CHECK(d2 > 0.0f);
}

TEST_CASE("generation is deterministic in (recipe, seed)") {
  SceneRecipe recipe;
  recipe.height = recipe.width = 24;
  recipe.horizon_y = 10;
  recipe.objects.push_back({kBox, 4, 8, 10, 9, 2.2, 0.0, 0.0, 0.0, 0});
  const SegmentationSample a = generate_scene(recipe, 77);
  const SegmentationSample b = generate_scene(recipe, 77);
  const SegmentationSample c = generate_scene(recipe, 78);
  CHECK(samples_equal(a, b));
  CHECK(max_abs_diff(a.rgb, c.rgb) > 0.0);  // textures move with the seed
  CHECK(max_abs_diff(a.labels, c.labels) == 0.0);  // geometry does not
}

TEST_CASE("depth offset shifts the raster exactly and touches nothing else") {
  SceneRecipe recipe;
  recipe.height = recipe.width = 24;
  recipe.horizon_y = 10;
  recipe.objects.push_back({kWedge, 3, 6, 12, 10, 2.0, 0.03, -0.02, 0.0, 0});
  recipe.objects.push_back({kDome, 10, 10, 9, 9, 2.6, 0.0, 0.0, 0.5, 0});

  const SegmentationSample base = generate_scene(recipe, 11);
  for (const double delta : {0.5, 1.75, 3.0}) {
    SceneRecipe shifted = recipe;
    shifted.depth_offset = delta;
    const SegmentationSample moved = generate_scene(shifted, 11);
    CHECK(max_abs_diff(moved.rgb, base.rgb) == 0.0);
    CHECK(max_abs_diff(moved.labels, base.labels) == 0.0);
    const float delta_f = static_cast<float>(delta);
    for (i64 i = 0; i < base.depth.size(); ++i)
      CHECK(moved.depth[i] == base.depth[i] + delta_f);
  }
}

TEST_CASE("generated scenes label every pixel and keep depth positive") {
  const auto samples = generate_split(20, 123, 0.0, 1.0, 32, 32);
  for (const auto& s : samples) {
    for (i64 i = 0; i < s.labels.size(); ++i) {
      const int label = static_cast<int>(s.labels[i]);
      const bool valid = (label >= 0 && label < kNumSceneClasses) || label == kIgnoreLabel;
      CHECK(valid);
      if (label != kIgnoreLabel) CHECK(s.depth[i] > 0.0f);
    }
  }
}

TEST_CASE("splits are reproducible and depth ranges separate") {
  const auto a = generate_split(8, 9, 0.0, 1.0, 32, 32);
  const auto b = generate_split(8, 9, 0.0, 1.0, 32, 32);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(samples_equal(a[i], b[i]));

  const Dataset ds = generate_dataset(60, 60, 4, 0.0, 1.0, 2.5, 3.5, 32, 32);
  double max_train_mean = -1e9, min_test_mean = 1e9;
  for (const auto& s : ds.train) {
    double m = 0.0;
    for (i64 i = 0; i < s.depth.size(); ++i) m += s.depth[i];
    max_train_mean = std::max(max_train_mean, m / static_cast<double>(s.depth.size()));
  }
  for (const auto& s : ds.test) {
    double m = 0.0;
    for (i64 i = 0; i < s.depth.size(); ++i) m += s.depth[i];
    min_test_mean = std::min(min_test_mean, m / static_cast<double>(s.depth.size()));
  }
  // disjoint offset ranges leave a visible gap between the split means
  CHECK(max_train_mean < min_test_mean);
}

TEST_CASE("class pixel frequencies match across splits within 10 percent") {
  const Dataset ds = generate_dataset(200, 200, 31, 0.0, 1.0, 2.5, 3.5, 32, 32);
  auto freq = [](const std::vector<SegmentationSample>& split) {
    std::vector<double> counts(kNumSceneClasses, 0.0);
    double total = 0.0;
    for (const auto& s : split)
      for (i64 i = 0; i < s.labels.size(); ++i) {
        const int label = static_cast<int>(s.labels[i]);
        if (label == kIgnoreLabel) continue;
        counts[static_cast<size_t>(label)] += 1.0;
        total += 1.0;
      }
    for (double& c : counts) c /= total;
    return counts;
  };
  const auto train_freq = freq(ds.train);
  const auto test_freq = freq(ds.test);
  for (int c = 0; c < kNumSceneClasses; ++c) {
    CHECK(train_freq[static_cast<size_t>(c)] > 0.0);
    const double rel = std::abs(train_freq[static_cast<size_t>(c)] -
                                test_freq[static_cast<size_t>(c)]) /
                       train_freq[static_cast<size_t>(c)];
    CHECK(rel <= 0.10);
  }
}

TEST_CASE("dataset round trip is bit exact") {
  const fs::path dir = temp_dir("roundtrip");
  const Dataset ds = generate_dataset(6, 3, 21, 0.0, 1.0, 2.5, 3.5, 32, 32);
  write_dataset(dir.string(), ds);
  const Dataset back = read_dataset(dir.string());

  CHECK(back.meta.num_classes == ds.meta.num_classes);
  CHECK(back.meta.class_names == ds.meta.class_names);
  CHECK(back.meta.depth_mean == ds.meta.depth_mean);
  CHECK(back.meta.depth_std == ds.meta.depth_std);
  REQUIRE(back.train.size() == ds.train.size());
  REQUIRE(back.test.size() == ds.test.size());
  for (size_t i = 0; i < ds.train.size(); ++i) CHECK(samples_equal(ds.train[i], back.train[i]));
  for (size_t i = 0; i < ds.test.size(); ++i) CHECK(samples_equal(ds.test[i], back.test[i]));
  fs::remove_all(dir);
}

TEST_CASE("dataset io errors") {
  CHECK_THROWS_AS(read_dataset("/nonexistent/dataset-dir"), std::runtime_error);

  // truncated sample file surfaces as a corrupt-file error
  const fs::path dir = temp_dir("truncated");
  Dataset ds = generate_dataset(2, 1, 3, 0.0, 1.0, 2.0, 3.0, 16, 16);
  write_dataset(dir.string(), ds);
  const fs::path victim = dir / "train_00000.bin";
  const auto size = fs::file_size(victim);
  fs::resize_file(victim, size / 2);
  CHECK_THROWS_AS(read_dataset(dir.string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("make_batch layouts") {
  const Dataset ds = generate_dataset(5, 2, 8, 0.0, 1.0, 2.0, 3.0, 16, 16);
  auto [input, labels] = make_batch(std::span(ds.train.data(), 4), ds.meta);
  CHECK(input.shape() == Shape{4, 4, 16, 16});
  CHECK(labels.shape() == Shape{4, 16, 16});

  // channels 0..2 are the raw rgb, channel 3 the normalized depth
  const SegmentationSample& s0 = ds.train[0];
  for (i64 p = 0; p < 16 * 16; ++p) {
    CHECK(input[p] == s0.rgb[p]);
    const float want = (s0.depth[p] - static_cast<float>(ds.meta.depth_mean)) /
                       static_cast<float>(ds.meta.depth_std);
    CHECK(input[3 * 16 * 16 + p] == want);
    CHECK(labels[p] == s0.labels[p]);
  }

  auto [rgb_only, labels2] = make_batch(std::span(ds.train.data(), 4), ds.meta, true);
  CHECK(rgb_only.shape() == Shape{4, 3, 16, 16});

  // constant-depth sample produces a constant normalized channel
  Dataset flat = ds;
  flat.train[0].depth = Tensor<float>::full({1, 16, 16}, 2.5f);
  auto [batch3, labels3] = make_batch(std::span(flat.train.data(), 1), flat.meta);
  const float expected = (2.5f - static_cast<float>(flat.meta.depth_mean)) /
                         static_cast<float>(flat.meta.depth_std);
  for (i64 p = 0; p < 16 * 16; ++p) CHECK(batch3[3 * 16 * 16 + p] == expected);
}
