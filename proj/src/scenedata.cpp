#include "maskstrike/scenedata.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "maskstrike/image_io.hpp"
#include "maskstrike/rng.hpp"

namespace maskstrike {

namespace {

using json = nlohmann::json;

enum class ShapeKind { circle, square, triangle };

constexpr std::array<const char*, 4> kColorNames = {"red", "green", "blue", "yellow"};
constexpr std::array<const char*, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<std::array<int, 3>, 4> kColorRgb = {{
    {175, 85, 80},
    {85, 155, 95},
    {85, 105, 175},
    {180, 170, 85},
}};

int to_byte(int v) { return std::clamp(v, 0, 255); }

bool shape_covers(ShapeKind kind, int size, int x, int y) {
  switch (kind) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle: {
      const int dx = 2 * x + 1 - size;
      const int dy = 2 * y + 1 - size;
      return dx * dx + dy * dy <= size * size;
    }
    case ShapeKind::triangle:
      return 2 * std::abs(2 * x + 1 - size) <= 2 * y + 1;
  }
  return false;
}

struct Placement {
  int x0, y0, size;
};

}  // namespace

const std::vector<std::string>& class_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"background"};
    for (const char* color : kColorNames)
      for (const char* shape : kShapeNames) v.push_back(std::string(color) + "-" + shape);
    return v;
  }();
  return vocab;
}

int class_index(const std::string& name) {
  const auto& vocab = class_vocabulary();
  const auto it = std::find(vocab.begin(), vocab.end(), name);
  if (it == vocab.end()) throw Error("unknown class name '" + name + "'");
  return static_cast<int>(it - vocab.begin());
}

void DatasetConfig::validate() const {
  if (n_scenes < 0) throw Error("dataset: n_scenes must be >= 0");
  if (height < 32 || width < 32) throw Error("dataset: canvas too small");
  if (min_objects < 1 || max_objects < min_objects)
    throw Error("dataset: objects_per_scene range is empty");
  if (min_object_size < 8 || max_object_size < min_object_size)
    throw Error("dataset: object size range is empty");
  if (max_object_size > std::min(height, width)) throw Error("dataset: objects exceed canvas");
  if (repeat_probability < 0.0 || repeat_probability > 1.0)
    throw Error("dataset: repeat_probability must be in [0,1]");
  if (background.base_min > background.base_max || background.blob_cell < 1)
    throw Error("dataset: bad background parameters");
}

std::string scene_image_id(std::uint64_t seed, int index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%llu_%05d", static_cast<unsigned long long>(seed), index);
  return buf;
}

Scene generate_scene(const DatasetConfig& cfg, int index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const int H = cfg.height;
  const int W = cfg.width;
  const BackgroundParams& bg = cfg.background;

  // Background: gray base + tint + integer bilinear value noise + grain.
  const int base = rng.uniform_int(bg.base_min, bg.base_max);
  std::array<int, 3> tint{};
  for (int& t : tint) t = rng.uniform_int(-bg.tint, bg.tint);
  const int cell = bg.blob_cell;
  const int gh = H / cell + 2;
  const int gw = W / cell + 2;
  std::vector<int> lattice(static_cast<std::size_t>(gh) * gw);
  for (int& v : lattice) v = rng.uniform_int(-bg.blob_amplitude, bg.blob_amplitude);

  Scene scene{Image(H, W), SceneAnnotation{scene_image_id(cfg.seed, index), {}, {H, W}}};
  Image& img = scene.image;
  for (int y = 0; y < H; ++y) {
    const int cy = y / cell;
    const int ry = y % cell;
    for (int x = 0; x < W; ++x) {
      const int cx = x / cell;
      const int rx = x % cell;
      const int top = lattice[cy * gw + cx] * (cell - rx) + lattice[cy * gw + cx + 1] * rx;
      const int bot =
          lattice[(cy + 1) * gw + cx] * (cell - rx) + lattice[(cy + 1) * gw + cx + 1] * rx;
      const int blob = (top * (cell - ry) + bot * ry) / (cell * cell);
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = to_byte(base + tint[c] + blob + rng.uniform_int(-bg.grain, bg.grain));
    }
  }

  const int n_objects = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<int> classes(n_objects);
  for (int& c : classes) c = rng.uniform_int(1, 12);
  if (n_objects >= 2 && rng.uniform01() < cfg.repeat_probability) classes[1] = classes[0];

  std::vector<Placement> placed;
  for (int i = 0; i < n_objects; ++i) {
    const int size = rng.uniform_int(cfg.min_object_size, cfg.max_object_size);
    bool ok = false;
    Placement p{};
    for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
      p = {rng.uniform_int(0, W - size), rng.uniform_int(0, H - size), size};
      ok = std::none_of(placed.begin(), placed.end(), [&](const Placement& q) {
        const int g = cfg.object_gap;
        return p.x0 < q.x0 + q.size + g && q.x0 < p.x0 + p.size + g &&
               p.y0 < q.y0 + q.size + g && q.y0 < p.y0 + p.size + g;
      });
    }
    if (!ok)
      throw Error("generate_scene: infeasible placement for object " + std::to_string(i) +
                  " of " + scene.annotation.image_id);
    placed.push_back(p);

    const int cls = classes[i];
    const int color = (cls - 1) / 3;
    const auto kind = static_cast<ShapeKind>((cls - 1) % 3);
    std::array<int, 3> rgb{};
    for (int c = 0; c < 3; ++c) rgb[c] = kColorRgb[color][c] + rng.uniform_int(-12, 12);

    int bx0 = W, by0 = H, bx1 = 0, by1 = 0;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        if (!shape_covers(kind, size, x, y)) continue;
        const int px = p.x0 + x;
        const int py = p.y0 + y;
        for (int c = 0; c < 3; ++c) img.at(py, px, c) = to_byte(rgb[c] + rng.uniform_int(-6, 6));
        bx0 = std::min(bx0, px);
        by0 = std::min(by0, py);
        bx1 = std::max(bx1, px + 1);
        by1 = std::max(by1, py + 1);
      }
    scene.annotation.boxes.push_back(
        {Box{double(bx0), double(by0), double(bx1), double(by1)}, class_vocabulary()[cls]});
  }
  return scene;
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.images.resize(cfg.n_scenes);
  ds.annotations.resize(cfg.n_scenes);
  // Each scene owns its PRNG stream, so the parallel loop matches a serial one.
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.n_scenes; ++i) {
    Scene s = generate_scene(cfg, i);
    ds.images[i] = std::move(s.image);
    ds.annotations[i] = std::move(s.annotation);
  }
  return ds;
}

namespace {

json annotations_to_json(std::span<const SceneAnnotation> annotations) {
  const auto& vocab = class_vocabulary();
  json images = json::array();
  json anns = json::array();
  json categories = json::array();
  for (std::size_t c = 1; c < vocab.size(); ++c)
    categories.push_back({{"id", c}, {"name", vocab[c]}});
  int ann_id = 1;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const SceneAnnotation& a = annotations[i];
    images.push_back({{"id", i + 1},
                      {"file_name", a.image_id + ".png"},
                      {"height", a.canvas.height},
                      {"width", a.canvas.width}});
    for (const LabeledBox& lb : a.boxes) {
      const double w = lb.box.width();
      const double h = lb.box.height();
      anns.push_back({{"id", ann_id++},
                      {"image_id", i + 1},
                      {"category_id", class_index(lb.class_name)},
                      {"bbox", {lb.box.x1, lb.box.y1, w, h}},
                      {"area", w * h},
                      {"iscrowd", 0}});
    }
  }
  return {{"images", images}, {"annotations", anns}, {"categories", categories}};
}

std::string stem_of(const std::string& file_name) {
  const auto dot = file_name.rfind('.');
  return dot == std::string::npos ? file_name : file_name.substr(0, dot);
}

}  // namespace

void write_annotations(std::span<const SceneAnnotation> annotations,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << annotations_to_json(annotations).dump(1) << '\n';
}

std::vector<SceneAnnotation> parse_annotations(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("annotations: parse error: ") + e.what());
  }
  for (const char* key : {"images", "annotations", "categories"})
    if (!doc.contains(key) || !doc[key].is_array())
      throw Error(std::string("annotations: missing array '") + key + "'");

  std::map<long long, std::string> category_names;
  for (std::size_t i = 0; i < doc["categories"].size(); ++i) {
    const json& c = doc["categories"][i];
    if (!c.is_object() || !c.contains("id") || !c["id"].is_number_integer() ||
        !c.contains("name") || !c["name"].is_string())
      throw Error("annotations: malformed record categories[" + std::to_string(i) + "]");
    category_names[c["id"].get<long long>()] = c["name"].get<std::string>();
  }

  std::vector<SceneAnnotation> result;
  std::map<long long, std::size_t> slot;
  for (std::size_t i = 0; i < doc["images"].size(); ++i) {
    const json& im = doc["images"][i];
    if (!im.is_object() || !im.contains("id") || !im["id"].is_number_integer() ||
        !im.contains("file_name") || !im["file_name"].is_string() || !im.contains("height") ||
        !im["height"].is_number_integer() || !im.contains("width") ||
        !im["width"].is_number_integer())
      throw Error("annotations: malformed record images[" + std::to_string(i) + "]");
    slot[im["id"].get<long long>()] = result.size();
    result.push_back({stem_of(im["file_name"].get<std::string>()),
                      {},
                      {im["height"].get<int>(), im["width"].get<int>()}});
  }

  for (std::size_t i = 0; i < doc["annotations"].size(); ++i) {
    const json& a = doc["annotations"][i];
    const std::string where = "annotations[" + std::to_string(i) + "]";
    if (!a.is_object() || !a.contains("image_id") || !a["image_id"].is_number_integer() ||
        !a.contains("category_id") || !a["category_id"].is_number_integer() ||
        !a.contains("bbox") || !a["bbox"].is_array() || a["bbox"].size() != 4)
      throw Error("annotations: malformed record " + where);
    for (const json& v : a["bbox"])
      if (!v.is_number()) throw Error("annotations: non-numeric bbox in " + where);
    const auto img = slot.find(a["image_id"].get<long long>());
    if (img == slot.end()) throw Error("annotations: unknown image_id in " + where);
    const auto cat = category_names.find(a["category_id"].get<long long>());
    if (cat == category_names.end()) throw Error("annotations: unknown category_id in " + where);
    const double x = a["bbox"][0], y = a["bbox"][1], w = a["bbox"][2], h = a["bbox"][3];
    if (!(w > 0.0) || !(h > 0.0)) throw Error("annotations: degenerate bbox in " + where);
    result[img->second].boxes.push_back({Box{x, y, x + w, y + h}, cat->second});
  }
  return result;
}

std::vector<SceneAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str());
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < dataset.images.size(); ++i)
    save_png(dataset.images[i], dir / (dataset.annotations[i].image_id + ".png"));
  write_annotations(dataset.annotations, dir / "annotations.json");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.annotations = read_annotations(dir / "annotations.json");
  for (const SceneAnnotation& a : ds.annotations) {
    ds.images.push_back(load_png(dir / (a.image_id + ".png")));
    if (ds.images.back().height != a.canvas.height || ds.images.back().width != a.canvas.width)
      throw Error("dataset: image size disagrees with annotation for " + a.image_id);
  }
  return ds;
}

}  // namespace maskstrike
