#include "maskstrike/attack.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "maskstrike/rng.hpp"

namespace maskstrike {

namespace {

constexpr std::pair<Variant, const char*> kVariantNames[] = {
    {Variant::non_tar_all, "non_tar_all"},
    {Variant::tar_frequent, "tar_frequent"},
    {Variant::tar_confident, "tar_confident"},
    {Variant::non_tar_frequent, "non_tar_frequent"},
    {Variant::non_tar_confident, "non_tar_confident"},
};

BinaryMask mask_for(const DetectionSet& dets, int o_pick, ImageShape shape) {
  std::vector<Box> boxes;
  for (const Detection& d : dets.detections)
    if (d.predicted_class() == o_pick) boxes.push_back(d.box);
  return rasterize_mask(boxes, shape.height, shape.width);
}

// The box set a for one targeted step: a itself when nonempty, otherwise
// the mask-overlap fallback. nullopt when the fallback finds nothing.
std::optional<std::vector<int>> targeted_box_set(const DetectionSet& dets, const BinaryMask& mask,
                                                 int o_pick, int k) {
  std::vector<int> a = compute_box_set_a(dets, o_pick);
  if (!a.empty()) return a;
  const std::optional<int> fb = fallback_box(dets, mask, k);
  if (!fb) return std::nullopt;
  return std::vector<int>{*fb};
}

bool targeted_condition(const DetectionSet& dets, std::span<const int> a, int o_pick, int k) {
  bool hit_k = false;
  for (int i : a) {
    const int c = dets[i].predicted_class();
    if (c == o_pick) return false;
    hit_k = hit_k || c == k;
  }
  return hit_k;
}

AttackResult start_result(const AttackConfig& cfg, const Image& img, const ForwardPass& pass) {
  AttackResult r;
  r.variant = cfg.variant;
  r.original = img;
  r.original_detections = pass.detections;
  return r;
}

void finish(AttackResult& r, const Image& current, const Detector& detector,
            std::optional<DetectionSet> last) {
  r.adversarial = current;
  r.perturbation = difference(current, r.original);
  r.final_detections = last ? std::move(*last) : detector.detect(current);
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [variant, name] : kVariantNames)
    if (variant == v) return name;
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (const auto& [variant, n] : kVariantNames)
    if (name == n) return variant;
  throw Error("unknown attack variant '" + name + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto& [variant, name] : kVariantNames) out.push_back(variant);
    return out;
  }();
  return v;
}

bool is_targeted(Variant v) { return v == Variant::tar_frequent || v == Variant::tar_confident; }
bool is_pick_object(Variant v) { return v != Variant::non_tar_all; }

SelectionStrategy strategy_of(Variant v) {
  return v == Variant::non_tar_confident || v == Variant::tar_confident
             ? SelectionStrategy::confident
             : SelectionStrategy::frequent;
}

AttackConfig AttackConfig::defaults(Variant v) {
  AttackConfig c;
  c.variant = v;
  c.max_iter = v == Variant::non_tar_all ? 120 : 60;
  return c;
}

void AttackConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error("attack config: learning rate must be >= 0");
  if (max_iter < 0) throw Error("attack config: max_iter must be >= 0");
  if (is_targeted(variant) && !target_class)
    throw Error("attack config: targeted variant " + to_string(variant) + " needs a target class");
}

int select_object(const DetectionSet& dets, SelectionStrategy strategy) {
  if (dets.empty()) throw Error("nothing to attack");
  if (strategy == SelectionStrategy::confident) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dets.size(); ++i)
      if (dets[i].top_probability() > dets[best].top_probability()) best = i;
    return dets[best].predicted_class();
  }
  struct Tally {
    int count = 0;
    double confidence = 0.0;
  };
  std::map<int, Tally> tally;  // ordered: ties fall to the lower class index
  for (const Detection& d : dets.detections) {
    Tally& t = tally[d.predicted_class()];
    ++t.count;
    t.confidence += d.confidence();
  }
  auto best = tally.begin();
  for (auto it = std::next(tally.begin()); it != tally.end(); ++it) {
    const Tally& a = it->second;
    const Tally& b = best->second;
    if (a.count > b.count || (a.count == b.count && a.confidence > b.confidence)) best = it;
  }
  return best->first;
}

BinaryMask compute_mask(const DetectionSet& dets, int o_pick, ImageShape shape) {
  if (compute_box_set_a(dets, o_pick).empty())
    throw Error("compute_mask: class " + std::to_string(o_pick) + " is not detected");
  return mask_for(dets, o_pick, shape);
}

std::vector<int> compute_box_set_a(const DetectionSet& dets, int o_pick) {
  std::vector<int> a;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].predicted_class() == o_pick) a.push_back(static_cast<int>(i));
  return a;
}

std::optional<int> fallback_box(const DetectionSet& dets, const BinaryMask& mask, int k) {
  std::optional<int> best;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!box_intersects_mask(dets[i].box, mask)) continue;
    if (!best || dets[i].class_probs[k] > dets[*best].class_probs[k]) best = static_cast<int>(i);
  }
  return best;
}

LossSpec loss_nontargeted(const DetectionSet& dets, std::span<const int> a, int o_pick) {
  LossSpec spec;
  for (int i : a) spec.terms.push_back({i, o_pick, 1.0});
  spec.validate(dets);
  return spec;
}

LossSpec loss_targeted(const DetectionSet& dets, std::span<const int> a, int k) {
  LossSpec spec;
  for (int i : a) spec.terms.push_back({i, k, 1.0});
  spec.validate(dets);
  return spec;
}

bool nontargeted_goal_met(const DetectionSet& dets, int o_pick) {
  return compute_box_set_a(dets, o_pick).empty();
}

bool targeted_goal_met(const DetectionSet& dets, const BinaryMask& mask, int o_pick, int k) {
  const auto a = targeted_box_set(dets, mask, o_pick, k);
  return a && targeted_condition(dets, *a, o_pick, k);
}

bool all_objects_goal_met(const DetectionSet& dets, std::span<const int> original_classes) {
  return std::none_of(dets.detections.begin(), dets.detections.end(), [&](const Detection& d) {
    return std::find(original_classes.begin(), original_classes.end(), d.predicted_class()) !=
           original_classes.end();
  });
}

bool goal_met(const AttackResult& result, const DetectionSet& dets) {
  switch (result.variant) {
    case Variant::non_tar_frequent:
    case Variant::non_tar_confident:
      return nontargeted_goal_met(dets, result.o_pick);
    case Variant::tar_frequent:
    case Variant::tar_confident:
      return targeted_goal_met(dets, result.mask, result.o_pick, result.target.value());
    case Variant::non_tar_all:
      return all_objects_goal_met(dets, result.original_classes);
  }
  return false;
}

AttackResult run_non_targeted(const Image& img, const Detector& detector, const AttackConfig& cfg,
                              int o_pick) {
  cfg.validate();
  ForwardPass pass = detector.forward(img);
  AttackResult r = start_result(cfg, img, pass);
  r.o_pick = o_pick;
  r.mask = mask_for(pass.detections, o_pick, {img.height, img.width});

  Image current = img;
  for (int j = 0; j < cfg.max_iter; ++j) {
    if (j > 0) pass = detector.forward(current);
    const std::vector<int> a = compute_box_set_a(pass.detections, o_pick);
    if (a.empty()) {
      r.success = true;
      break;
    }
    LossAndGradient lg = detector.backward(pass, loss_nontargeted(pass.detections, a, o_pick));
    lg.plan.learning_rate = cfg.learning_rate;
    Image next = clamp_image(add(current, mask_gradient(lg.plan, r.mask)));  // ascent
    r.trace.push_back({lg.loss, static_cast<int>(a.size()), max_abs(difference(next, current))});
    current = std::move(next);
    ++r.iterations_used;
  }
  if (!r.success) r.failure_cause = "budget-exhausted";
  finish(r, current, detector, r.success ? std::optional(pass.detections) : std::nullopt);
  return r;
}

AttackResult run_targeted(const Image& img, const Detector& detector, const AttackConfig& cfg,
                          int o_pick, int k) {
  cfg.validate();
  if (k == o_pick) throw Error("targeted attack: target class equals the attacked class");
  if (k <= 0 || k >= detector.config().num_classes)
    throw Error("targeted attack: target class " + std::to_string(k) + " is not a foreground class");
  ForwardPass pass = detector.forward(img);
  AttackResult r = start_result(cfg, img, pass);
  r.o_pick = o_pick;
  r.target = k;
  r.mask = mask_for(pass.detections, o_pick, {img.height, img.width});

  Image current = img;
  bool stopped = false;
  for (int j = 0; j < cfg.max_iter; ++j) {
    if (j > 0) pass = detector.forward(current);
    const auto a = targeted_box_set(pass.detections, r.mask, o_pick, k);
    if (!a) {
      r.failure_cause = "no-overlap";
      stopped = true;
      break;
    }
    if (targeted_condition(pass.detections, *a, o_pick, k)) {
      r.success = true;
      break;
    }
    LossAndGradient lg = detector.backward(pass, loss_targeted(pass.detections, *a, k));
    lg.plan.learning_rate = cfg.learning_rate;
    Image next = clamp_image(difference(current, mask_gradient(lg.plan, r.mask)));  // descent
    r.trace.push_back({lg.loss, static_cast<int>(a->size()), max_abs(difference(next, current))});
    current = std::move(next);
    ++r.iterations_used;
  }
  if (!r.success && !stopped) r.failure_cause = "budget-exhausted";
  const bool fresh = r.success || stopped;
  finish(r, current, detector, fresh ? std::optional(pass.detections) : std::nullopt);
  return r;
}

AttackResult run_all_objects(const Image& img, const Detector& detector, const AttackConfig& cfg) {
  cfg.validate();
  ForwardPass pass = detector.forward(img);
  if (pass.detections.empty()) throw Error("nothing to attack");
  AttackResult r = start_result(cfg, img, pass);
  r.mask = BinaryMask(img.height, img.width);

  std::vector<int> c_org = pass.detections.predicted_classes();
  std::sort(c_org.begin(), c_org.end());
  c_org.erase(std::unique(c_org.begin(), c_org.end()), c_org.end());
  r.original_classes = c_org;
  std::vector<int> candidates;
  for (int c = 1; c < detector.config().num_classes; ++c)
    if (!std::binary_search(c_org.begin(), c_org.end(), c)) candidates.push_back(c);
  if (candidates.empty()) throw Error("non_tar_all: every class is already present");
  Rng rng(derive_seed(cfg.seed, "non_tar_all/z"));
  const int z = candidates[rng.uniform_index(candidates.size())];
  r.target = z;

  Image current = img;
  for (int j = 0; j < cfg.max_iter; ++j) {
    if (j > 0) pass = detector.forward(current);
    if (all_objects_goal_met(pass.detections, c_org)) {
      r.success = true;
      break;
    }
    LossSpec spec;
    for (std::size_t b = 0; b < pass.detections.size(); ++b)
      spec.terms.push_back({static_cast<int>(b), z, 1.0});
    LossAndGradient lg = detector.backward(pass, spec);
    lg.plan.learning_rate = cfg.learning_rate;
    Image next = clamp_image(difference(current, unmasked_gradient(lg.plan)));
    r.trace.push_back(
        {lg.loss, static_cast<int>(pass.detections.size()), max_abs(difference(next, current))});
    current = std::move(next);
    ++r.iterations_used;
  }
  if (!r.success) r.failure_cause = "budget-exhausted";
  finish(r, current, detector, r.success ? std::optional(pass.detections) : std::nullopt);
  return r;
}

AttackResult run_attack(const Image& img, const Detector& detector, const AttackConfig& cfg) {
  if (cfg.variant == Variant::non_tar_all) return run_all_objects(img, detector, cfg);
  const int o_pick = select_object(detector.detect(img), strategy_of(cfg.variant));
  if (is_targeted(cfg.variant)) {
    cfg.validate();
    return run_targeted(img, detector, cfg, o_pick, *cfg.target_class);
  }
  return run_non_targeted(img, detector, cfg, o_pick);
}

std::vector<int> sample_target_classes(int num_classes, int o_pick, int count, std::uint64_t seed) {
  std::vector<int> pool;
  for (int c = 1; c < num_classes; ++c)
    if (c != o_pick) pool.push_back(c);
  if (count < 0 || static_cast<std::size_t>(count) > pool.size())
    throw Error("cannot draw " + std::to_string(count) + " distinct target classes");
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace maskstrike
