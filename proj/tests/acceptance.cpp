// End-to-end acceptance run on the bundled mini-detector. Prints one
// PASS/FAIL line per criterion and exits non-zero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "maskstrike/runner.hpp"
#include "support.hpp"

using namespace maskstrike;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string strf(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const VariantSummary* row(const MetricsReport& r, Variant v) {
  for (const VariantSummary& s : r.rows)
    if (s.variant == v) return &s;
  return nullptr;
}

double val(const std::optional<double>& v) { return v.value_or(std::nan("")); }

MiniDetector obtain_detector(const fs::path& weights) {
  if (fs::exists(weights)) {
    MiniDetectorWeights w = MiniDetectorWeights::load(weights);
    if (w.trained && w.metadata.heldout_map >= 0.80) {
      spdlog::info("reusing {}", weights.string());
      return MiniDetector(std::move(w));
    }
  }
  DatasetConfig data;
  data.seed = 7;
  TrainConfig train;
  train.verbose = true;
  spdlog::info("training the mini-detector ({} scenes)", data.n_scenes);
  try {
    MiniDetectorWeights w = train_mini_detector(data, train, 7);
    w.save(weights);
    return MiniDetector(std::move(w));
  } catch (const TrainingError& e) {
    std::printf("note: %s\n", e.what());
    return MiniDetector(e.weights());
  }
}

// ------------------------------------------------------------ oracles

bool oracle_suite(std::string& detail) {
  using namespace testsupport;
  Rng rng(2718);
  constexpr int kInstances = 60;
  int bad_delta = 0, bad_l2 = 0, bad_ssim = 0, bad_iou = 0, bad_nms = 0, bad_bleu = 0, bad_rouge = 0,
      bad_ext = 0;
  for (int t = 0; t < kInstances; ++t) {
    const int h = rng.uniform_int(11, 24), w = rng.uniform_int(11, 24);
    const Image a = random_image(h, w, rng);
    const Image b = lcg_noisy(a, 500 + t, rng.uniform_int(1, 120));
    const Box box{rng.uniform(0, w - 1.0), rng.uniform(0, h - 1.0), static_cast<double>(w),
                  static_cast<double>(h)};
    const BinaryMask m = rasterize_mask(std::vector<Box>{box}, h, w);
    long cells = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) cells += x + 1 > box.x1 && y + 1 > box.y1;
    const long double l2 = l2_direct(a, b);
    bad_delta += std::abs(delta(a, b, m) - static_cast<double>(l2 / cells)) > 1e-6;
    bad_l2 += std::abs(l2_per_image_size(a, b) - static_cast<double>(l2 / (h * w))) > 1e-6;
    bad_ssim += std::abs(ssim(a, b) - ssim_direct(a, b)) > 1e-6;

    auto hb = [&] {
      const double x = rng.uniform_int(0, 16) * 0.5, y = rng.uniform_int(0, 16) * 0.5;
      return Box{x, y, x + rng.uniform_int(1, 12) * 0.5, y + rng.uniform_int(1, 12) * 0.5};
    };
    const Box p = hb(), q = hb();
    bad_iou += std::abs(iou(p, q) - iou_by_counting(p, q)) > 1e-6;
    std::vector<ScoredBox> cands(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    for (ScoredBox& s : cands) s = {hb(), rng.uniform_int(0, 4) / 4.0};
    const double thr = rng.uniform_int(1, 9) / 10.0;
    bad_nms += nms(cands, thr) != nms_by_definition(cands, thr);

    std::vector<Words> cw, rw;
    for (int i = 0; i < 3; ++i) {
      cw.push_back(random_words(rng, 9, 4));
      rw.push_back(random_words(rng, 9, 4));
      if (rw.back().empty()) rw.back().push_back("w1");
    }
    for (int n = 1; n <= 4; ++n) bad_bleu += std::abs(bleu_n(cw, rw, n) - bleu_direct(cw, rw, n)) > 1e-6;
    bad_rouge += std::abs(rouge_l(cw[0], rw[0]) - rouge_l_brute(cw[0], rw[0])) > 1e-6;
  }
  for (const SsimFixture& f : kSsimFixtures) {
    const Image a = lcg_image(f.h, f.w, f.seed);
    bad_ext += std::abs(ssim(a, lcg_noisy(a, f.noise_seed, f.amplitude)) - f.value) > 1e-3;
  }
  bad_ext += std::abs(ssim(Image(32, 32, 100.0), Image(32, 32, 110.0)) - kSsimConstant100vs110) > 1e-3;
  detail = strf("%d instances; mismatches delta %d, l2 %d, ssim %d, iou %d, nms %d, bleu %d, rouge-l %d; "
               "external ssim mismatches %d",
               kInstances, bad_delta, bad_l2, bad_ssim, bad_iou, bad_nms, bad_bleu, bad_rouge, bad_ext);
  return bad_delta + bad_l2 + bad_ssim + bad_iou + bad_nms + bad_bleu + bad_rouge + bad_ext == 0;
}

ExperimentConfig eval_config(const fs::path& out, int scenes, int targets) {
  ExperimentConfig c;
  c.dataset.n_scenes = scenes;
  c.dataset.seed = 2026;
  c.controls.targets_per_image = targets;
  c.output_dir = out;
  c.seed = 11;
  c.save_images = false;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  fs::path work = "acceptance_work";
  int scenes = 100;
  app.add_option("--work-dir", work, "Cache and output directory");
  app.add_option("--scenes", scenes, "Evaluation scenes");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::info);
  fs::create_directories(work);
  const auto t0 = std::chrono::steady_clock::now();

  const MiniDetector detector = obtain_detector(work / "mini_detector.bin");
  const double heldout = detector.weights().metadata.heldout_map;
  std::printf("detector held-out mAP@0.5: %.4f\n", heldout);

  // 1, 3-7, 9 share one evaluation run.
  const ExperimentConfig cfg = eval_config(work / "eval", scenes, 10);
  const RunManifest manifest = run_experiment(cfg, detector);
  const std::vector<AttackRecord> records = read_records(manifest.records);
  const MetricsReport rep = aggregate_records(records, cfg.controls.resize_scales);
  std::printf("%s", slurp(manifest.metrics_csv).c_str());

  {
    int n = 0, leaks = 0;
    double worst = 0.0;
    for (const AttackRecord& r : records) {
      if (!is_pick_object(r.variant) || !r.measurements.attempted) continue;
      ++n;
      const double l = r.measurements.leak.value_or(std::nan(""));
      if (!(l == 0.0)) ++leaks;
      if (l > worst) worst = l;
    }
    report(1, n >= 500 && leaks == 0,
           strf("%d pick-object attacks, %d with nonzero change outside the mask (max %.3g)", n, leaks, worst));
  }

  {
    const testsupport::GradCheck g = testsupport::fd_check_roi_loss(detector, 314);
    MiniDetectorWeights init = MiniDetectorWeights::initialize(DetectorConfig{}, 3);
    init.trained = true;
    const testsupport::GradCheck g0 = testsupport::fd_check_roi_loss(MiniDetector(std::move(init)), 315);
    report(2, g.failed == 0 && g0.failed == 0 && g.checked > 0,
           strf("trained: %ld entries, %ld over 1e-3 (worst %.2e, %ld rechecked at a kink); "
                "initialized: %ld entries, %ld over (worst %.2e, %ld rechecked)",
                g.checked, g.failed, g.worst, g.refined, g0.checked, g0.failed, g0.worst, g0.refined));
  }

  const VariantSummary* ntf = row(rep, Variant::non_tar_frequent);
  const VariantSummary* ntc = row(rep, Variant::non_tar_confident);
  const VariantSummary* tf = row(rep, Variant::tar_frequent);
  const VariantSummary* tc = row(rep, Variant::tar_confident);
  const VariantSummary* nta = row(rep, Variant::non_tar_all);
  if (!ntf || !ntc || !tf || !tc || !nta) {
    std::printf("FAIL: a variant produced no attempted attacks\n");
    return 1;
  }

  report(3,
         heldout >= 0.80 && ntf->success_rate >= 90 && ntc->success_rate >= 90 &&
             tf->success_rate >= 60 && val(tc->success_rate_given_overlap) >= 60 &&
             nta->success_rate >= 60,
         strf("held-out mAP %.3f; SR NTF %.2f NTC %.2f TF %.2f TC|overlap %.2f (TC %.2f) NTA %.2f", heldout,
             ntf->success_rate, ntc->success_rate, tf->success_rate, val(tc->success_rate_given_overlap),
             tc->success_rate, nta->success_rate));

  report(4, val(ntf->map_outside) >= 85 && val(ntc->map_outside) >= 85 && val(nta->map_outside) <= 10,
         strf("map outside mask NTF %.2f NTC %.2f; NTA %.2f", val(ntf->map_outside), val(ntc->map_outside),
             val(nta->map_outside)));

  {
    bool ok = true;
    std::string d;
    for (const VariantSummary& s : rep.rows) {
      const double p = val(s.permutation_success_rate);
      ok = ok && p <= 5.0;
      d += strf("%s %.2f; ", to_string(s.variant).c_str(), p);
    }
    report(5, ok, "permuted SR " + d);
  }

  {
    bool ok = true;
    std::string d;
    for (const VariantSummary& s : rep.rows) {
      const auto lo = s.resize_success_rate.find(0.6), hi = s.resize_success_rate.find(1.4);
      const bool have = lo != s.resize_success_rate.end() && hi != s.resize_success_rate.end();
      ok = ok && have && hi->second > lo->second;
      if (have) d += strf("%s %.2f@1.4 vs %.2f@0.6; ", to_string(s.variant).c_str(), hi->second, lo->second);
    }
    report(6, ok, d);
  }

  {
    const double all = val(nta->ssim_mean);
    bool ok = all >= 90.0;
    std::string d = strf("NTA %.2f; ", all);
    for (const VariantSummary* s : {ntf, ntc, tf, tc}) {
      const double v = val(s->ssim_mean);
      ok = ok && v >= 90.0 && v > all;
      d += strf("%s %.2f; ", to_string(s->variant).c_str(), v);
    }
    report(7, ok, "mean SSIM x100 " + d);
  }

  {
    std::string detail;
    report(8, oracle_suite(detail), detail);
  }

  {
    const std::vector<CaptionScores> caps = caption_scores(records);
    auto find = [&](Variant v) -> const CaptionScores* {
      for (const CaptionScores& c : caps)
        if (c.variant == v) return &c;
      return nullptr;
    };
    const CaptionScores *cntf = find(Variant::non_tar_frequent), *cntc = find(Variant::non_tar_confident),
                        *ctf = find(Variant::tar_frequent), *ctc = find(Variant::tar_confident),
                        *cnta = find(Variant::non_tar_all);
    bool ok = cntf && cntc && ctf && ctc && cnta;
    std::string d;
    if (ok) {
      for (const CaptionScores* c : {cntf, cntc, ctf, ctc, cnta}) {
        ok = ok && c->pairs >= 50;
        d += strf("%s pairs %d B-1 %.4f KWR %.2f; ", to_string(c->variant).c_str(), c->pairs, c->bleu[0],
                 c->kwr.value_or(std::nan("")));
      }
      for (const CaptionScores* c : {cntf, cntc, ctf, ctc}) ok = ok && cnta->bleu[0] < c->bleu[0];
      ok = ok && ctf->kwr && cntf->kwr && *ctf->kwr >= *cntf->kwr;
      ok = ok && ctc->kwr && cntc->kwr && *ctc->kwr >= *cntc->kwr;
    }
    report(9, ok, d);
  }

  {
    const fs::path a = work / "determinism_a", b = work / "determinism_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const RunManifest ma = run_experiment(eval_config(a, 6, 2), detector);
    const RunManifest mb = run_experiment(eval_config(b, 6, 2), detector);
    const std::string ca = slurp(ma.metrics_csv), cb = slurp(mb.metrics_csv);
    report(10, !ca.empty() && ca == cb,
           strf("two 6-scene runs: metrics.csv %zu bytes each, identical: %s", ca.size(), ca == cb ? "yes" : "no"));
  }

  std::printf("acceptance finished in %.0f s, %d failing criteria\n",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), failures);
  return failures == 0 ? 0 : 1;
}
