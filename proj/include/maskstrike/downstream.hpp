#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskstrike/attack.hpp"
#include "maskstrike/detector.hpp"

namespace maskstrike {

using Tokens = std::vector<std::string>;

/// Lowercase, whitespace-separated.
Tokens tokenize(const std::string& text);
std::string join_tokens(const Tokens& tokens);

/// "a {c1} and a {c2} and a {c3} on a textured background" over the three
/// most confident detections, or "an empty scene".
Tokens generate_caption(const DetectionSet& dets);

/// Corpus BLEU over orders 1..n with brevity penalty and no smoothing.
double bleu_n(std::span<const Tokens> candidates, std::span<const Tokens> references, int n);

/// LCS F1 (β = 1). Two empty captions score 1.
double rouge_l(const Tokens& candidate, const Tokens& reference);
double corpus_rouge_l(std::span<const Tokens> candidates, std::span<const Tokens> references);

struct CaptionPair {
  Tokens original_caption;
  Tokens adversarial_caption;
  std::string o_pick_keyword;
};

/// Percent of pairs whose original caption has the keyword and whose
/// adversarial caption lost it; nullopt when no original has it.
std::optional<double> kwr(std::span<const CaptionPair> pairs);

CaptionPair caption_pair(const AttackResult& result);

struct CaptionScores {
  Variant variant = Variant::non_tar_frequent;
  int pairs = 0;
  double bleu[4] = {0, 0, 0, 0};
  double rouge_l = 0.0;
  std::optional<double> kwr;
};

CaptionScores score_captions(Variant variant, std::span<const CaptionPair> pairs);

/// variant,pairs,B-1,B-2,B-3,B-4,ROUGE-L,KWR
std::string caption_csv(std::span<const CaptionScores> rows);

}  // namespace maskstrike
