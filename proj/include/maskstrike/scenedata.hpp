#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskstrike/geometry.hpp"

namespace maskstrike {

/// "background" at index 0, then the 12 color-shape classes
/// ("red-circle", "red-square", ...). Index order is stable.
const std::vector<std::string>& class_vocabulary();
int class_index(const std::string& name);

struct LabeledBox {
  Box box;
  std::string class_name;
  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct SceneAnnotation {
  std::string image_id;
  std::vector<LabeledBox> boxes;
  ImageShape canvas;
  friend bool operator==(const SceneAnnotation&, const SceneAnnotation&) = default;
};

struct BackgroundParams {
  int base_min = 80;          // mean gray level range
  int base_max = 170;
  int tint = 12;              // per-channel offset of the base color
  int blob_amplitude = 35;    // low-frequency value noise
  int blob_cell = 24;         // value-noise lattice spacing, pixels
  int grain = 10;             // per-pixel uniform noise half-width
};

struct DatasetConfig {
  int n_scenes = 1000;
  int height = 160;
  int width = 224;
  int min_objects = 2;
  int max_objects = 6;
  int min_object_size = 18;
  int max_object_size = 36;
  int object_gap = 3;
  // Probability that a scene copies one object's class onto another, so
  // that "most frequent class" is well defined in a good share of scenes.
  double repeat_probability = 0.35;
  BackgroundParams background;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Scene {
  Image image;
  SceneAnnotation annotation;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<SceneAnnotation> annotations;
};

std::string scene_image_id(std::uint64_t seed, int index);

/// Scene `index` of the dataset described by cfg. Depends only on
/// (cfg, index); pixel values are integers in [0,255].
Scene generate_scene(const DatasetConfig& cfg, int index);

Dataset generate_dataset(const DatasetConfig& cfg);

/// COCO-style JSON: images, annotations with [x, y, w, h], categories.
void write_annotations(std::span<const SceneAnnotation> annotations,
                       const std::filesystem::path& path);
std::vector<SceneAnnotation> read_annotations(const std::filesystem::path& path);
std::vector<SceneAnnotation> parse_annotations(const std::string& text);

/// Writes `<dir>/<image_id>.png` for each scene plus `<dir>/annotations.json`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace maskstrike
