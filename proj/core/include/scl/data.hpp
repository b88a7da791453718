#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scl/tensor.hpp"

namespace scl {

// One RGB-D sample: rgb in [0,1], depth in meters (positive where labeled),
// labels as class ids with 255 for ignored pixels. All rasters share H x W.
struct SegmentationSample {
  Tensor<float> rgb;     // 3 x H x W
  Tensor<float> depth;   // 1 x H x W
  Tensor<float> labels;  // H x W
};

// Scene classes. The two background classes tile the whole frame; the four
// object classes differ only in their depth profile, so telling them apart
// requires the local depth geometry rather than color.
enum SceneClass : int {
  kFloor = 0,
  kWall = 1,
  kBox = 2,    // flat raised plateau
  kWedge = 3,  // linear depth ramp
  kRidge = 4,  // half-cylinder profile along one axis
  kDome = 5,   // radial cap profile
};
inline constexpr int kNumSceneClasses = 6;
const std::vector<std::string>& scene_class_names();

struct SceneObject {
  int class_id = kBox;
  int x0 = 0, y0 = 0;       // top-left corner, pixels
  int width = 0, height = 0;
  double base_distance = 2.5;  // meters
  double slant_x = 0.0, slant_y = 0.0;  // meters per pixel (wedge)
  double amplitude = 0.0;               // profile depth swing (ridge, dome)
  int axis = 0;                         // ridge orientation: 0 along x, 1 along y
};

// Full description of one scene. Distances are in meters. depth_offset is
// applied to the finished raster as a single final per-pixel addition, so
// shifting it moves every depth value by exactly that amount while labels
// and rgb stay untouched; it is the mechanism behind the train/test
// absolute-depth gap. Objects paint in list order (later entries occlude
// earlier ones).
struct SceneRecipe {
  int height = 64, width = 64;
  int horizon_y = 0;           // floor/wall split row; 0 = no wall
  double wall_base = 4.0;      // wall distance at the horizon
  double wall_slant = 0.0;     // meters per pixel, horizontal
  double floor_near = 2.0;     // floor distance at the bottom row
  double depth_offset = 0.0;
  int ignore_border = 0;       // border rows/cols labelled 255
  std::vector<SceneObject> objects;
};

// Renders a scene. Deterministic in (recipe, seed); the seed drives only the
// textures and sensor noise, never the geometry.
SegmentationSample generate_scene(const SceneRecipe& recipe, std::uint64_t seed);

// Random class-balanced scenes (every object class once per scene, random
// placement and z-order) whose depth_offset is drawn uniformly from
// [shift_lo, shift_hi]. Per-sample seeds derive from (seed, index).
std::vector<SegmentationSample> generate_split(int num_samples, std::uint64_t seed,
                                               double shift_lo, double shift_hi,
                                               int height = 64, int width = 64);

struct DatasetMeta {
  int num_classes = kNumSceneClasses;
  std::vector<std::string> class_names;
  int height = 64, width = 64;
  // Depth normalization constants, computed on the training split only so a
  // shifted test split stays visibly shifted after normalization.
  double depth_mean = 0.0;
  double depth_std = 1.0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SegmentationSample> train;
  std::vector<SegmentationSample> test;
};

// Generates the default depth-shift benchmark: train offsets in
// [train_shift_lo, train_shift_hi], test offsets in a disjoint higher range,
// normalization fitted on train.
Dataset generate_dataset(int train_n, int test_n, std::uint64_t seed,
                         double train_shift_lo, double train_shift_hi,
                         double test_shift_lo, double test_shift_hi,
                         int height = 64, int width = 64);

// Directory layout: index.json plus one binary tensor file per sample in the
// checkpoint tensor-record encoding (see docs/formats.md). Round-trips are
// bit exact.
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset read_dataset(const std::string& dir);

// Stacks samples into the network input: channels [R, G, B, (depth-mean)/std]
// (the depth channel dropped in rgb_only mode) and an N x H x W label
// raster.
std::pair<Tensor<float>, Tensor<float>> make_batch(
    std::span<const SegmentationSample> samples, const DatasetMeta& meta,
    bool rgb_only = false);

}  // namespace scl
