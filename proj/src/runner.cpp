#include "maskstrike/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <omp.h>
#include <spdlog/spdlog.h>

#include "maskstrike/image_io.hpp"
#include "maskstrike/rng.hpp"

#ifndef MASKSTRIKE_VERSION
#define MASKSTRIKE_VERSION "0.0.0"
#endif

namespace maskstrike {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version_string() { return MASKSTRIKE_VERSION; }

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw Error(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw Error(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const DatasetConfig& c) {
  const BackgroundParams& b = c.background;
  return {{"n_scenes", c.n_scenes},
          {"height", c.height},
          {"width", c.width},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"min_object_size", c.min_object_size},
          {"max_object_size", c.max_object_size},
          {"object_gap", c.object_gap},
          {"repeat_probability", c.repeat_probability},
          {"background",
           {{"base_min", b.base_min},
            {"base_max", b.base_max},
            {"tint", b.tint},
            {"blob_amplitude", b.blob_amplitude},
            {"blob_cell", b.blob_cell},
            {"grain", b.grain}}},
          {"seed", c.seed}};
}

void from_json(const json& j, DatasetConfig& c) {
  check_keys(j,
             {"n_scenes", "height", "width", "min_objects", "max_objects", "min_object_size",
              "max_object_size", "object_gap", "repeat_probability", "background", "seed"},
             "dataset");
  read_field(j, "n_scenes", c.n_scenes);
  read_field(j, "height", c.height);
  read_field(j, "width", c.width);
  read_field(j, "min_objects", c.min_objects);
  read_field(j, "max_objects", c.max_objects);
  read_field(j, "min_object_size", c.min_object_size);
  read_field(j, "max_object_size", c.max_object_size);
  read_field(j, "object_gap", c.object_gap);
  read_field(j, "repeat_probability", c.repeat_probability);
  read_field(j, "seed", c.seed);
  if (j.contains("background")) {
    const json& b = j.at("background");
    check_keys(b, {"base_min", "base_max", "tint", "blob_amplitude", "blob_cell", "grain"},
               "dataset.background");
    read_field(b, "base_min", c.background.base_min);
    read_field(b, "base_max", c.background.base_max);
    read_field(b, "tint", c.background.tint);
    read_field(b, "blob_amplitude", c.background.blob_amplitude);
    read_field(b, "blob_cell", c.background.blob_cell);
    read_field(b, "grain", c.background.grain);
  }
}

json to_json(const DetectorConfig& c) {
  return {{"short_side", c.short_side},
          {"n_max", c.n_max},
          {"nms_iou", c.nms_iou},
          {"objectness_threshold", c.objectness_threshold},
          {"num_classes", c.num_classes}};
}

void from_json(const json& j, DetectorConfig& c) {
  check_keys(j, {"short_side", "n_max", "nms_iou", "objectness_threshold", "num_classes"},
             "detector");
  read_field(j, "short_side", c.short_side);
  read_field(j, "n_max", c.n_max);
  read_field(j, "nms_iou", c.nms_iou);
  read_field(j, "objectness_threshold", c.objectness_threshold);
  read_field(j, "num_classes", c.num_classes);
}

json to_json(const TrainConfig& c) {
  return {{"rpn_epochs", c.rpn_epochs},
          {"classifier_epochs", c.classifier_epochs},
          {"rpn_batch", c.rpn_batch},
          {"classifier_batch", c.classifier_batch},
          {"rpn_learning_rate", c.rpn_learning_rate},
          {"classifier_learning_rate", c.classifier_learning_rate},
          {"label_smoothing", c.label_smoothing},
          {"crops_per_object", c.crops_per_object},
          {"background_crops", c.background_crops},
          {"heldout_scenes", c.heldout_scenes},
          {"min_train_scenes", c.min_train_scenes},
          {"min_heldout_map", c.min_heldout_map},
          {"verbose", c.verbose}};
}

void from_json(const json& j, TrainConfig& c) {
  check_keys(j,
             {"rpn_epochs", "classifier_epochs", "rpn_batch", "classifier_batch",
              "rpn_learning_rate", "classifier_learning_rate", "label_smoothing",
              "crops_per_object", "background_crops", "heldout_scenes", "min_train_scenes",
              "min_heldout_map", "verbose"},
             "training");
  read_field(j, "rpn_epochs", c.rpn_epochs);
  read_field(j, "classifier_epochs", c.classifier_epochs);
  read_field(j, "rpn_batch", c.rpn_batch);
  read_field(j, "classifier_batch", c.classifier_batch);
  read_field(j, "rpn_learning_rate", c.rpn_learning_rate);
  read_field(j, "classifier_learning_rate", c.classifier_learning_rate);
  read_field(j, "label_smoothing", c.label_smoothing);
  read_field(j, "crops_per_object", c.crops_per_object);
  read_field(j, "background_crops", c.background_crops);
  read_field(j, "heldout_scenes", c.heldout_scenes);
  read_field(j, "min_train_scenes", c.min_train_scenes);
  read_field(j, "min_heldout_map", c.min_heldout_map);
  read_field(j, "verbose", c.verbose);
}

json to_json(const ExperimentConfig& c) {
  json variants = json::array();
  for (Variant v : c.variants) variants.push_back(to_string(v));
  json attack = json::object();
  for (const auto& [v, o] : c.attack) {
    json entry = json::object();
    if (o.learning_rate) entry["learning_rate"] = *o.learning_rate;
    if (o.max_iter) entry["max_iter"] = *o.max_iter;
    attack[to_string(v)] = entry;
  }
  return {{"dataset_path", c.dataset_path ? json(c.dataset_path->string()) : json(nullptr)},
          {"dataset", to_json(c.dataset)},
          {"weights", c.weights_path.string()},
          {"variants", variants},
          {"attack", attack},
          {"eval",
           {{"run_permutation", c.controls.run_permutation},
            {"run_resize", c.controls.run_resize},
            {"resize_scales", c.controls.resize_scales},
            {"targets_per_image", c.controls.targets_per_image}}},
          {"output_dir", c.output_dir.string()},
          {"seed", c.seed},
          {"save_images", c.save_images},
          {"workers", c.workers}};
}

void from_json(const json& j, ExperimentConfig& c) {
  check_keys(j,
             {"dataset_path", "dataset", "weights", "variants", "attack", "eval", "output_dir",
              "seed", "save_images", "workers", "training", "detector"},
             "experiment");
  if (j.contains("dataset_path") && !j.at("dataset_path").is_null())
    c.dataset_path = j.at("dataset_path").get<std::string>();
  if (j.contains("dataset")) from_json(j.at("dataset"), c.dataset);
  if (j.contains("weights")) c.weights_path = j.at("weights").get<std::string>();
  if (j.contains("variants")) {
    c.variants.clear();
    for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
  }
  if (j.contains("attack")) {
    for (const auto& [name, entry] : j.at("attack").items()) {
      check_keys(entry, {"learning_rate", "max_iter"}, "attack");
      AttackOverrides o;
      if (entry.contains("learning_rate")) o.learning_rate = entry.at("learning_rate").get<double>();
      if (entry.contains("max_iter")) o.max_iter = entry.at("max_iter").get<int>();
      c.attack[parse_variant(name)] = o;
    }
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, {"run_permutation", "run_resize", "resize_scales", "targets_per_image"}, "eval");
    read_field(e, "run_permutation", c.controls.run_permutation);
    read_field(e, "run_resize", c.controls.run_resize);
    read_field(e, "resize_scales", c.controls.resize_scales);
    read_field(e, "targets_per_image", c.controls.targets_per_image);
  }
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  read_field(j, "seed", c.seed);
  read_field(j, "save_images", c.save_images);
  read_field(j, "workers", c.workers);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

fs::path resolve_output_dir(const fs::path& configured) {
  if (const char* env = std::getenv("MASKSTRIKE_OUT"); env && *env) return env;
  return configured;
}

void ExperimentConfig::validate() const {
  if (controls.targets_per_image < 1) throw Error("eval.targets_per_image must be >= 1");
  if (variants.empty()) throw Error("no variants selected");
  for (double s : controls.resize_scales)
    if (!(s > 0.0)) throw Error("eval.resize_scales must be positive");
  if (dataset_path) {
    if (!fs::exists(*dataset_path)) throw Error("dataset path does not exist: " + dataset_path->string());
  } else {
    dataset.validate();
  }
  if (workers < 0) throw Error("workers must be >= 0");
  for (Variant v : variants) {
    AttackConfig a = attack_config(v);
    if (is_targeted(v)) a.target_class = 1;
    a.validate();
  }
}

AttackConfig ExperimentConfig::attack_config(Variant v) const {
  AttackConfig a = AttackConfig::defaults(v);
  if (const auto it = attack.find(v); it != attack.end()) {
    if (it->second.learning_rate) a.learning_rate = *it->second.learning_rate;
    if (it->second.max_iter) a.max_iter = *it->second.max_iter;
  }
  return a;
}

// ------------------------------------------------------------- records

std::string AttackRecord::key() const {
  return image_id + "/" + to_string(variant) + "/" + std::to_string(target_slot);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

int variant_rank(Variant v) {
  const auto& all = all_variants();
  return static_cast<int>(std::find(all.begin(), all.end(), v) - all.begin());
}

}  // namespace

json AttackRecord::to_json() const {
  const AttackMeasurements& m = measurements;
  json trace_json = json::array();
  for (const TraceStep& t : trace) trace_json.push_back({t.loss, t.boxes, t.max_change});
  json resized = json::array();
  for (const auto& [s, ok] : m.resized_success) resized.push_back({s, ok});
  return {{"image_id", image_id},
          {"image_index", image_index},
          {"variant", to_string(variant)},
          {"target_slot", target_slot},
          {"k", target ? json(*target) : json(nullptr)},
          {"o_pick", o_pick},
          {"attempted", m.attempted},
          {"success", m.success},
          {"failure_cause", m.failure_cause},
          {"iterations", m.iterations},
          {"delta", optional_json(m.delta)},
          {"l2_image_norm", m.l2},
          {"ssim", m.ssim},
          {"map_outside", optional_json(m.map_outside)},
          {"actc", optional_json(m.actc)},
          {"acac", optional_json(m.acac)},
          {"leak_outside_mask", optional_json(m.leak)},
          {"permuted_success", m.permuted_success ? json(*m.permuted_success) : json(nullptr)},
          {"resized_success", resized},
          {"initial_boxes", initial_boxes},
          {"initial_mean_probability", initial_mean_probability},
          {"caption_original", join_tokens(captions.original_caption)},
          {"caption_adversarial", join_tokens(captions.adversarial_caption)},
          {"keyword", captions.o_pick_keyword},
          {"trace", trace_json},
          {"original_png", original_png},
          {"adversarial_png", adversarial_png},
          {"perturbation_png", perturbation_png}};
}

AttackRecord AttackRecord::from_json(const json& j) {
  AttackRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_index = j.at("image_index").get<int>();
  r.variant = parse_variant(j.at("variant").get<std::string>());
  r.target_slot = j.at("target_slot").get<int>();
  if (!j.at("k").is_null()) r.target = j.at("k").get<int>();
  r.o_pick = j.at("o_pick").get<int>();
  AttackMeasurements& m = r.measurements;
  m.variant = r.variant;
  m.attempted = j.at("attempted").get<bool>();
  m.success = j.at("success").get<bool>();
  m.failure_cause = j.at("failure_cause").get<std::string>();
  m.iterations = j.at("iterations").get<int>();
  m.delta = optional_double(j, "delta");
  m.l2 = j.at("l2_image_norm").get<double>();
  m.ssim = j.at("ssim").get<double>();
  m.map_outside = optional_double(j, "map_outside");
  m.actc = optional_double(j, "actc");
  m.acac = optional_double(j, "acac");
  m.leak = optional_double(j, "leak_outside_mask");
  if (!j.at("permuted_success").is_null()) m.permuted_success = j.at("permuted_success").get<bool>();
  for (const auto& pair : j.at("resized_success"))
    m.resized_success[pair.at(0).get<double>()] = pair.at(1).get<bool>();
  r.initial_boxes = j.at("initial_boxes").get<int>();
  r.initial_mean_probability = j.at("initial_mean_probability").get<double>();
  r.captions.original_caption = tokenize(j.at("caption_original").get<std::string>());
  r.captions.adversarial_caption = tokenize(j.at("caption_adversarial").get<std::string>());
  r.captions.o_pick_keyword = j.at("keyword").get<std::string>();
  for (const auto& t : j.at("trace"))
    r.trace.push_back({t.at(0).get<double>(), t.at(1).get<int>(), t.at(2).get<double>()});
  r.original_png = j.at("original_png").get<std::string>();
  r.adversarial_png = j.at("adversarial_png").get<std::string>();
  r.perturbation_png = j.at("perturbation_png").get<std::string>();
  return r;
}

std::vector<AttackRecord> read_records(const fs::path& path) {
  std::vector<AttackRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(AttackRecord::from_json(json::parse(lines[i])));
    } catch (const std::exception& e) {
      if (i + 1 == lines.size()) {
        spdlog::warn("{}: dropping truncated last record", path.string());
        break;
      }
      throw Error(path.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

json RunManifest::to_json() const {
  return {{"config", config},
          {"code_version", code_version},
          {"output_dir", output_dir.string()},
          {"records", records.string()},
          {"metrics_csv", metrics_csv.string()},
          {"metrics_json", metrics_json.string()},
          {"metrics_markdown", metrics_markdown.string()},
          {"captions_csv", captions_csv.string()},
          {"record_count", record_count}};
}

RunManifest RunManifest::load(const fs::path& path) {
  const json j = read_json_file(fs::is_directory(path) ? path / "manifest.json" : path);
  RunManifest m;
  m.config = j.at("config");
  m.code_version = j.at("code_version").get<std::string>();
  m.output_dir = j.at("output_dir").get<std::string>();
  m.records = j.at("records").get<std::string>();
  m.metrics_csv = j.at("metrics_csv").get<std::string>();
  m.metrics_json = j.at("metrics_json").get<std::string>();
  m.metrics_markdown = j.at("metrics_markdown").get<std::string>();
  m.captions_csv = j.at("captions_csv").get<std::string>();
  m.record_count = j.at("record_count").get<int>();
  return m;
}

// ---------------------------------------------------------- aggregation

namespace {

void sort_records(std::vector<AttackRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const AttackRecord& a, const AttackRecord& b) {
    if (a.image_index != b.image_index) return a.image_index < b.image_index;
    if (a.variant != b.variant) return variant_rank(a.variant) < variant_rank(b.variant);
    return a.target_slot < b.target_slot;
  });
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

MetricsReport aggregate_records(const std::vector<AttackRecord>& records,
                                const std::vector<double>& resize_scales) {
  std::vector<AttackRecord> sorted = records;
  sort_records(sorted);
  std::vector<AttackMeasurements> m;
  for (const AttackRecord& r : sorted) m.push_back(r.measurements);
  return summarize(m, resize_scales);
}

std::vector<CaptionScores> caption_scores(const std::vector<AttackRecord>& records) {
  std::vector<AttackRecord> sorted = records;
  sort_records(sorted);
  std::vector<CaptionScores> out;
  for (Variant v : all_variants()) {
    std::vector<CaptionPair> pairs;
    for (const AttackRecord& r : sorted)
      if (r.variant == v && r.measurements.attempted && r.measurements.success)
        pairs.push_back(r.captions);
    if (!pairs.empty()) out.push_back(score_captions(v, pairs));
  }
  return out;
}

Image render_perturbation(const Perturbation& p) {
  Image out(p.height, p.width);
  for (std::size_t i = 0; i < p.values.size(); ++i)
    out.values[i] = std::clamp(128.0 + 20.0 * p.values[i], 0.0, 255.0);
  return out;
}

// ------------------------------------------------------------------ run

namespace {

struct UnitContext {
  const ExperimentConfig& cfg;
  const Detector& detector;
  const fs::path& out_dir;
  const std::set<std::string>& done;
};

std::string slot_suffix(Variant v, int slot) {
  return is_targeted(v) ? to_string(v) + "_t" + std::to_string(slot) : to_string(v);
}

AttackRecord make_record(const UnitContext& ctx, const std::string& image_id, int index,
                         const AttackResult& result, int slot, std::uint64_t unit_seed) {
  AttackRecord rec;
  rec.image_id = image_id;
  rec.image_index = index;
  rec.variant = result.variant;
  rec.target_slot = slot;
  rec.target = result.target;
  rec.o_pick = result.o_pick;
  MeasureOptions mo;
  mo.permutation = ctx.cfg.controls.run_permutation;
  mo.resize = ctx.cfg.controls.run_resize;
  mo.resize_scales = ctx.cfg.controls.resize_scales;
  mo.permutation_seed = derive_seed(unit_seed, "permutation");
  rec.measurements = measure_attack(result, ctx.detector, mo);
  rec.trace = result.trace;
  const DetectionSet& org = result.original_detections;
  double prob_sum = 0.0;
  for (const Detection& d : org.detections) {
    if (result.o_pick >= 0 && d.predicted_class() != result.o_pick) continue;
    ++rec.initial_boxes;
    prob_sum += result.o_pick >= 0 ? d.class_probs[result.o_pick] : d.top_probability();
  }
  if (rec.initial_boxes > 0) rec.initial_mean_probability = prob_sum / rec.initial_boxes;
  rec.captions = caption_pair(result);
  if (ctx.cfg.save_images) {
    const std::string stem = image_id + "__" + slot_suffix(result.variant, slot);
    rec.original_png = "images/" + image_id + "__original.png";
    rec.adversarial_png = "images/" + stem + "_adv.png";
    rec.perturbation_png = "images/" + stem + "_pert.png";
    save_png(result.adversarial, ctx.out_dir / rec.adversarial_png);
    save_png(render_perturbation(result.perturbation), ctx.out_dir / rec.perturbation_png);
  }
  return rec;
}

AttackRecord skipped_record(const std::string& image_id, int index, Variant v, int slot,
                            const std::string& cause) {
  AttackRecord rec;
  rec.image_id = image_id;
  rec.image_index = index;
  rec.variant = v;
  rec.target_slot = slot;
  rec.measurements.variant = v;
  rec.measurements.attempted = false;
  rec.measurements.failure_cause = cause;
  return rec;
}

std::vector<AttackRecord> run_image(const UnitContext& ctx, const Image& img,
                                    const std::string& image_id, int index) {
  std::vector<AttackRecord> out;
  auto pending = [&](Variant v, int slot) {
    AttackRecord probe;
    probe.image_id = image_id;
    probe.variant = v;
    probe.target_slot = slot;
    return !ctx.done.contains(probe.key());
  };
  const int num_classes = ctx.detector.config().num_classes;
  const int slots = std::min(ctx.cfg.controls.targets_per_image, num_classes - 2);
  const DetectionSet dets = ctx.detector.detect(img);
  if (ctx.cfg.save_images && !dets.empty())
    save_png(img, ctx.out_dir / ("images/" + image_id + "__original.png"));
  for (Variant v : ctx.cfg.variants) {
    const std::uint64_t vseed =
        derive_seed(derive_seed(ctx.cfg.seed, image_id), to_string(v));
    const int n_slots = is_targeted(v) ? slots : 1;
    if (dets.empty()) {
      for (int s = 0; s < n_slots; ++s)
        if (pending(v, s)) out.push_back(skipped_record(image_id, index, v, s, "nothing to attack"));
      continue;
    }
    std::vector<int> targets;
    int o_pick = -1;
    if (is_pick_object(v)) o_pick = select_object(dets, strategy_of(v));
    if (is_targeted(v))
      targets = sample_target_classes(num_classes, o_pick, n_slots, derive_seed(vseed, "targets"));
    for (int s = 0; s < n_slots; ++s) {
      if (!pending(v, s)) continue;
      const std::uint64_t unit_seed = derive_seed(vseed, static_cast<std::uint64_t>(s));
      try {
        AttackConfig acfg = ctx.cfg.attack_config(v);
        acfg.seed = unit_seed;
        AttackResult result;
        if (v == Variant::non_tar_all) {
          result = run_all_objects(img, ctx.detector, acfg);
        } else if (is_targeted(v)) {
          acfg.target_class = targets[s];
          result = run_targeted(img, ctx.detector, acfg, o_pick, targets[s]);
        } else {
          result = run_non_targeted(img, ctx.detector, acfg, o_pick);
        }
        out.push_back(make_record(ctx, image_id, index, result, s, unit_seed));
      } catch (const std::exception& e) {
        AttackRecord rec = skipped_record(image_id, index, v, s, std::string("error: ") + e.what());
        rec.o_pick = o_pick;
        if (is_targeted(v)) rec.target = targets[s];
        out.push_back(std::move(rec));
      }
    }
  }
  return out;
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& cfg, const Detector& detector) {
  cfg.validate();
  const fs::path out_dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(out_dir / "images");

  const Dataset data = cfg.dataset_path ? read_dataset(*cfg.dataset_path) : generate_dataset(cfg.dataset);
  if (data.images.empty()) throw Error("dataset is empty");

  RunManifest manifest;
  manifest.config = to_json(cfg);
  manifest.config["output_dir"] = out_dir.string();
  manifest.code_version = version_string();
  manifest.output_dir = out_dir;
  manifest.records = out_dir / "records.jsonl";
  manifest.metrics_csv = out_dir / "metrics.csv";
  manifest.metrics_json = out_dir / "metrics.json";
  manifest.metrics_markdown = out_dir / "metrics.md";
  manifest.captions_csv = out_dir / "captions.csv";
  write_text(out_dir / "config.json", manifest.config.dump(2) + "\n");

  std::vector<AttackRecord> existing = read_records(manifest.records);
  std::set<std::string> done;
  {
    // Rewrite so that a truncated tail line never precedes new records.
    std::ofstream rewrite(manifest.records, std::ios::binary | std::ios::trunc);
    for (const AttackRecord& r : existing) {
      done.insert(r.key());
      rewrite << r.to_json().dump() << '\n';
    }
  }
  if (!existing.empty()) spdlog::info("resuming: {} records already present", existing.size());

  std::ofstream appender(manifest.records, std::ios::binary | std::ios::app);
  const UnitContext ctx{cfg, detector, out_dir, done};
  const int n = static_cast<int>(data.images.size());
  const int workers = cfg.workers > 0 ? cfg.workers : omp_get_max_threads();
  std::string first_error;

#pragma omp parallel for ordered schedule(dynamic, 1) num_threads(workers)
  for (int i = 0; i < n; ++i) {
    std::vector<AttackRecord> recs;
    std::string error;
    try {
      recs = run_image(ctx, data.images[i], data.annotations[i].image_id, i);
    } catch (const std::exception& e) {
      error = e.what();
    }
#pragma omp ordered
    {
      if (!error.empty() && first_error.empty()) first_error = error;
      for (const AttackRecord& r : recs) appender << r.to_json().dump() << '\n';
      appender.flush();
    }
  }
  appender.close();
  if (!first_error.empty()) throw Error("run aborted: " + first_error);

  std::vector<AttackRecord> records = read_records(manifest.records);
  manifest.record_count = static_cast<int>(records.size());
  const MetricsReport report = aggregate_records(records, cfg.controls.resize_scales);
  write_text(manifest.metrics_csv, metrics_csv(report));
  write_text(manifest.metrics_json, metrics_json(report).dump(2) + "\n");
  write_text(manifest.metrics_markdown, metrics_markdown(report));
  write_text(manifest.captions_csv, caption_csv(caption_scores(records)));
  write_text(out_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
  return manifest;
}

RunManifest run_experiment(const ExperimentConfig& cfg) {
  if (cfg.weights_path.empty()) throw Error("no detector weights configured");
  if (!fs::exists(cfg.weights_path))
    throw Error("detector weights not found: " + cfg.weights_path.string());
  const MiniDetector detector = MiniDetector::load(cfg.weights_path);
  return run_experiment(cfg, detector);
}

// --------------------------------------------------------------- report

namespace {

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<int> counts;
};

Histogram histogram(const std::vector<double>& values, double lo, double hi, int bins) {
  Histogram h{lo, hi, std::vector<int>(bins, 0)};
  for (double v : values) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "bin_low,bin_high,count\n";
  const int bins = static_cast<int>(h.counts.size());
  char buf[96];
  for (int b = 0; b < bins; ++b) {
    const double a = h.lo + (h.hi - h.lo) * b / bins;
    const double z = h.lo + (h.hi - h.lo) * (b + 1) / bins;
    std::snprintf(buf, sizeof buf, "%.4g,%.4g,%d\n", a, z, h.counts[b]);
    os << buf;
  }
  return os.str();
}

Image histogram_image(const Histogram& h) {
  constexpr int kBarWidth = 16;
  constexpr int kHeight = 120;
  const int bins = static_cast<int>(h.counts.size());
  Image img(kHeight, bins * kBarWidth + 2);
  std::fill(img.values.begin(), img.values.end(), 255.0);
  const int peak = std::max(1, *std::max_element(h.counts.begin(), h.counts.end()));
  for (int b = 0; b < bins; ++b) {
    const int bar = static_cast<int>(std::lround((kHeight - 4) * static_cast<double>(h.counts[b]) / peak));
    for (int y = kHeight - 1 - bar; y < kHeight - 1; ++y)
      for (int x = 1 + b * kBarWidth + 2; x < 1 + (b + 1) * kBarWidth - 1; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = c == 2 ? 150.0 : 60.0;
  }
  for (int x = 0; x < img.width; ++x)
    for (int c = 0; c < 3; ++c) img.at(kHeight - 1, x, c) = 0.0;
  return img;
}

Image hstack(const std::vector<Image>& panels, int gap) {
  int width = 0;
  int height = 0;
  for (const Image& p : panels) {
    width += p.width;
    height = std::max(height, p.height);
  }
  width += gap * static_cast<int>(panels.size() - 1);
  Image out(height, width);
  std::fill(out.values.begin(), out.values.end(), 255.0);
  int x0 = 0;
  for (const Image& p : panels) {
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = p.at(y, x, c);
    x0 += p.width + gap;
  }
  return out;
}

}  // namespace

std::vector<fs::path> render_report(const RunManifest& manifest, const ReportOptions& options) {
  std::vector<AttackRecord> records = read_records(manifest.records);
  if (records.empty()) throw Error("render_report: manifest has no records");
  if (options.histogram_bins < 1) throw Error("render_report: histogram_bins must be >= 1");
  sort_records(records);
  const fs::path dir = manifest.output_dir / "report";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  auto emit_text = [&](const fs::path& p, const std::string& text) {
    write_text(p, text);
    written.push_back(p);
  };
  auto emit_hist = [&](const std::string& stem, const Histogram& h) {
    emit_text(dir / (stem + ".csv"), histogram_csv(h));
    save_png(histogram_image(h), dir / (stem + ".png"));
    written.push_back(dir / (stem + ".png"));
  };

  std::ostringstream notes;
  notes << "# Triptychs\n\nOriginal, perturbation (x20 around mid-gray), adversarial.\n\n";
  for (Variant v : all_variants()) {
    std::vector<const AttackRecord*> rows;
    for (const AttackRecord& r : records)
      if (r.variant == v && r.measurements.attempted) rows.push_back(&r);
    if (rows.empty()) continue;
    const std::string name = to_string(v);

    std::vector<double> iters, boxes, probs;
    double max_iter = 1.0, max_boxes = 1.0;
    for (const AttackRecord* r : rows) {
      boxes.push_back(r->initial_boxes);
      probs.push_back(r->initial_mean_probability);
      max_boxes = std::max(max_boxes, static_cast<double>(r->initial_boxes));
      if (r->measurements.success) {
        iters.push_back(r->measurements.iterations);
        max_iter = std::max(max_iter, static_cast<double>(r->measurements.iterations));
      }
    }
    emit_hist("hist_iterations_" + name, histogram(iters, 0.0, max_iter + 1.0, options.histogram_bins));
    emit_hist("hist_boxes_" + name, histogram(boxes, 0.0, max_boxes + 1.0, options.histogram_bins));
    emit_hist("hist_mean_probability_" + name, histogram(probs, 0.0, 1.0, options.histogram_bins));

    notes << "## " << name << "\n\n";
    int shown = 0;
    for (const AttackRecord* r : rows) {
      if (shown >= options.triptychs_per_variant) break;
      if (!r->measurements.success || r->adversarial_png.empty()) continue;
      const Image panel = hstack({load_png(manifest.output_dir / r->original_png),
                                  load_png(manifest.output_dir / r->perturbation_png),
                                  load_png(manifest.output_dir / r->adversarial_png)},
                                 4);
      const std::string file = "triptych_" + name + "_" + std::to_string(shown) + ".png";
      save_png(panel, dir / file);
      written.push_back(dir / file);
      notes << "![" << r->key() << "](" << file << ")\n";
      ++shown;
    }
    if (shown == 0) notes << "No successful attacks with saved images.\n";
    notes << '\n';
  }
  emit_text(dir / "triptychs.md", notes.str());

  const std::vector<double> scales =
      manifest.config.contains("eval")
          ? manifest.config.at("eval").at("resize_scales").get<std::vector<double>>()
          : default_resize_scales();
  const MetricsReport report = aggregate_records(records, scales);
  emit_text(dir / "metrics.csv", metrics_csv(report));
  emit_text(dir / "metrics.md", metrics_markdown(report));
  emit_text(dir / "captions.csv", caption_csv(caption_scores(records)));
  return written;
}

}  // namespace maskstrike
