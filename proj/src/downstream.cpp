#include "maskstrike/downstream.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

namespace maskstrike {

Tokens tokenize(const std::string& text) {
  std::istringstream is(text);
  Tokens out;
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    out.push_back(std::move(w));
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Tokens generate_caption(const DetectionSet& dets) {
  if (dets.empty()) return {"an", "empty", "scene"};
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[a].confidence() > dets[b].confidence();
  });
  Tokens out;
  const std::size_t n = std::min<std::size_t>(3, order.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out.push_back("and");
    out.push_back("a");
    out.push_back(dets.class_vocab.at(dets[order[i]].predicted_class()));
  }
  for (const char* w : {"on", "a", "textured", "background"}) out.emplace_back(w);
  return out;
}

namespace {

std::map<Tokens, int> ngram_counts(const Tokens& t, int n) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

}  // namespace

double bleu_n(std::span<const Tokens> candidates, std::span<const Tokens> references, int n) {
  if (n < 1 || n > 4) throw Error("bleu: order must be in 1..4");
  if (candidates.empty()) throw Error("bleu: empty corpus");
  if (candidates.size() != references.size()) throw Error("bleu: corpus size mismatch");
  std::vector<long> matched(n, 0), total(n, 0);
  long cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<long>(candidates[i].size());
    ref_len += static_cast<long>(references[i].size());
    for (int k = 1; k <= n; ++k) {
      const auto c = ngram_counts(candidates[i], k);
      const auto r = ngram_counts(references[i], k);
      for (const auto& [gram, count] : c) {
        total[k - 1] += count;
        const auto it = r.find(gram);
        if (it != r.end()) matched[k - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (matched[k] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[k]) / total[k]);
  }
  const double bp =
      cand_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / cand_len);
  return bp * std::exp(log_sum / n);
}

double rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() && reference.empty()) return 1.0;
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t m = candidate.size(), n = reference.size();
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j)
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = prev[n];
  if (lcs == 0) return 0.0;
  const double p = lcs / m, r = lcs / n;
  return 2.0 * p * r / (p + r);
}

double corpus_rouge_l(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.empty()) throw Error("rouge: empty corpus");
  if (candidates.size() != references.size()) throw Error("rouge: corpus size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge_l(candidates[i], references[i]);
  return sum / static_cast<double>(candidates.size());
}

std::optional<double> kwr(std::span<const CaptionPair> pairs) {
  int eligible = 0, removed = 0;
  auto has = [](const Tokens& t, const std::string& w) {
    return std::find(t.begin(), t.end(), w) != t.end();
  };
  for (const CaptionPair& p : pairs) {
    if (!has(p.original_caption, p.o_pick_keyword)) continue;
    ++eligible;
    removed += !has(p.adversarial_caption, p.o_pick_keyword);
  }
  if (eligible == 0) return std::nullopt;
  return 100.0 * removed / eligible;
}

CaptionPair caption_pair(const AttackResult& result) {
  CaptionPair p;
  p.original_caption = generate_caption(result.original_detections);
  p.adversarial_caption = generate_caption(result.final_detections);
  if (result.o_pick >= 0)
    p.o_pick_keyword = result.original_detections.class_vocab.at(result.o_pick);
  return p;
}

CaptionScores score_captions(Variant variant, std::span<const CaptionPair> pairs) {
  CaptionScores s;
  s.variant = variant;
  s.pairs = static_cast<int>(pairs.size());
  if (pairs.empty()) return s;
  std::vector<Tokens> cand, ref;
  for (const CaptionPair& p : pairs) {
    cand.push_back(p.adversarial_caption);
    ref.push_back(p.original_caption);
  }
  for (int n = 1; n <= 4; ++n) s.bleu[n - 1] = bleu_n(cand, ref, n);
  s.rouge_l = corpus_rouge_l(cand, ref);
  std::vector<CaptionPair> keyed;
  for (const CaptionPair& p : pairs)
    if (!p.o_pick_keyword.empty()) keyed.push_back(p);
  s.kwr = kwr(keyed);
  return s;
}

std::string caption_csv(std::span<const CaptionScores> rows) {
  std::ostringstream os;
  os << "variant,pairs,B-1,B-2,B-3,B-4,ROUGE-L,KWR\n";
  char buf[64];
  for (const CaptionScores& r : rows) {
    os << to_string(r.variant) << ',' << r.pairs;
    for (double b : r.bleu) {
      std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * b);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * r.rouge_l);
    os << buf << ',';
    if (r.kwr) {
      std::snprintf(buf, sizeof buf, "%.2f", *r.kwr);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace maskstrike
