#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "maskstrike/downstream.hpp"
#include "maskstrike/scenedata.hpp"
#include "support.hpp"

using namespace maskstrike;
using testsupport::Words;

namespace {

Detection labelled(int label, double p, double obj = 1.0) {
  std::vector<double> probs(13, (1.0 - p) / 12);
  probs[label] = p;
  return {{0, 0, 10, 10}, probs, obj};
}

DetectionSet set_of(std::vector<Detection> d) {
  DetectionSet s;
  s.detections = std::move(d);
  s.class_vocab = class_vocabulary();
  return s;
}

const int kRedCircle = class_index("red-circle");
const int kBlueSquare = class_index("blue-square");
const int kGreenTriangle = class_index("green-triangle");
const int kYellowCircle = class_index("yellow-circle");

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("  A Red-Circle\ton\n a  ") == Tokens{"a", "red-circle", "on", "a"});
  CHECK(tokenize("").empty());
  CHECK(join_tokens({"a", "b"}) == "a b");
}

TEST_CASE("template captions") {
  CHECK(join_tokens(generate_caption(set_of({labelled(kRedCircle, 0.9)}))) ==
        "a red-circle on a textured background");
  CHECK(join_tokens(generate_caption(set_of({}))) == "an empty scene");
  const DetectionSet four = set_of({labelled(kRedCircle, 0.5), labelled(kBlueSquare, 0.9),
                                    labelled(kGreenTriangle, 0.7), labelled(kYellowCircle, 0.6)});
  CHECK(join_tokens(generate_caption(four)) ==
        "a blue-square and a green-triangle and a yellow-circle on a textured background");
  CHECK(generate_caption(four) == generate_caption(four));
  // ties keep detection order
  const DetectionSet tie = set_of({labelled(kYellowCircle, 0.8), labelled(kRedCircle, 0.8)});
  CHECK(join_tokens(generate_caption(tie)) == "a yellow-circle and a red-circle on a textured background");
}

TEST_CASE("bleu examples") {
  const std::vector<Tokens> c{{"a", "b", "c", "d"}, {"e", "f", "g"}};
  for (int n = 1; n <= 4; ++n) CHECK(bleu_n(c, c, n) == 1.0);
  const std::vector<Tokens> other{{"x", "y", "z", "w"}, {"u", "v", "t"}};
  CHECK(bleu_n(other, c, 1) == 0.0);
  const std::vector<Tokens> with_empty{{}, {"e", "f", "g"}};
  const std::vector<Tokens> refs{{"e"}, {"e", "f", "g"}};
  CHECK(bleu_n(with_empty, refs, 1) == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)));
  CHECK_THROWS_AS(bleu_n(c, c, 0), Error);
  CHECK_THROWS_AS(bleu_n(c, c, 5), Error);
  CHECK_THROWS_AS(bleu_n(std::vector<Tokens>{}, std::vector<Tokens>{}, 1), Error);
  CHECK_THROWS_AS(bleu_n(c, std::vector<Tokens>{{"a"}, {"b"}, {"c"}}, 1), Error);
}

TEST_CASE("bleu matches the by-definition oracle") {
  Rng rng(51);
  for (int t = 0; t < 80; ++t) {
    const std::size_t n_pairs = 1 + rng.uniform_index(4);
    std::vector<Words> cands, refs;
    for (std::size_t i = 0; i < n_pairs; ++i) {
      cands.push_back(testsupport::random_words(rng, 10, 4));
      refs.push_back(testsupport::random_words(rng, 10, 4));
      if (refs.back().empty()) refs.back().push_back("w0");
    }
    for (int n = 1; n <= 4; ++n)
      CHECK(std::abs(bleu_n(cands, refs, n) - testsupport::bleu_direct(cands, refs, n)) <= 1e-6);
    // corpus order does not matter
    std::reverse(cands.begin(), cands.end());
    std::reverse(refs.begin(), refs.end());
    CHECK(std::abs(bleu_n(cands, refs, 2) - testsupport::bleu_direct(cands, refs, 2)) <= 1e-6);
  }
}

TEST_CASE("bleu matches frozen external reference values") {
  const std::vector<Tokens> cands{
      {"a", "red-circle", "and", "a", "blue-square", "on", "a", "textured", "background"},
      {"a", "green-triangle", "on", "a", "textured", "background"},
      {"an", "empty", "scene"}};
  const std::vector<Tokens> refs{
      {"a", "red-circle", "and", "a", "red-square", "on", "a", "textured", "background"},
      {"a", "green-triangle", "and", "a", "yellow-circle", "on", "a", "textured", "background"},
      {"a", "blue-circle", "on", "a", "textured", "background"}};
  const double expected[] = {0.557302130446, 0.515961514013, 0.456891695810};
  for (int n = 1; n <= 3; ++n) CHECK(std::abs(bleu_n(cands, refs, n) - expected[n - 1]) <= 1e-9);
  // every candidate long enough for 4-grams
  std::vector<Tokens> longer = cands;
  longer[2] = {"a", "blue-circle", "on", "a", "plain", "background"};
  const double expected_long[] = {0.784318099774, 0.700745807134, 0.610041281817, 0.506090969300};
  for (int n = 1; n <= 4; ++n) CHECK(std::abs(bleu_n(longer, refs, n) - expected_long[n - 1]) <= 1e-9);
}

TEST_CASE("rouge-l") {
  CHECK(rouge_l({"a", "cat", "sat"}, {"a", "cat"}) == doctest::Approx(0.8));
  CHECK(rouge_l({"a", "b"}, {"a", "b"}) == 1.0);
  CHECK(rouge_l({"a", "b"}, {"c", "d"}) == 0.0);
  CHECK(rouge_l({}, {}) == 1.0);
  CHECK(rouge_l({}, {"a"}) == 0.0);
  Rng rng(52);
  for (int t = 0; t < 100; ++t) {
    const Words a = testsupport::random_words(rng, 12, 5), b = testsupport::random_words(rng, 12, 5);
    CHECK(std::abs(rouge_l(a, b) - testsupport::rouge_l_brute(a, b)) <= 1e-6);
    CHECK(rouge_l(a, b) == doctest::Approx(rouge_l(b, a)));
  }
  const std::vector<Tokens> c{{"a", "cat", "sat"}, {"x"}};
  const std::vector<Tokens> r{{"a", "cat"}, {"x"}};
  CHECK(corpus_rouge_l(c, r) == doctest::Approx(0.9));
  CHECK(corpus_rouge_l(c, c) == 1.0);
}

TEST_CASE("keyword removal rate") {
  auto pair = [](Tokens orig, Tokens adv) { return CaptionPair{orig, adv, "red-circle"}; };
  const Tokens with{"a", "red-circle"}, without{"a", "blue-square"};
  const std::vector<CaptionPair> p{pair(with, without), pair(with, without), pair(with, with),
                                   pair(with, without), pair(without, without)};
  CHECK(kwr(p).value() == 75.0);
  CHECK_FALSE(kwr(std::vector<CaptionPair>{pair(without, with)}).has_value());
}

TEST_CASE("caption pairs and scores") {
  AttackResult r;
  r.variant = Variant::non_tar_confident;
  r.o_pick = kRedCircle;
  r.original_detections = set_of({labelled(kRedCircle, 0.9), labelled(kBlueSquare, 0.8)});
  r.final_detections = set_of({labelled(kYellowCircle, 0.6), labelled(kBlueSquare, 0.8)});
  const CaptionPair p = caption_pair(r);
  CHECK(p.o_pick_keyword == "red-circle");
  CHECK(join_tokens(p.adversarial_caption) ==
        "a blue-square and a yellow-circle on a textured background");

  const std::vector<CaptionPair> pairs{p, p};
  const CaptionScores s = score_captions(r.variant, pairs);
  CHECK(s.pairs == 2);
  CHECK(s.kwr.value() == 100.0);
  CHECK(s.bleu[0] == doctest::Approx(bleu_n(std::vector<Tokens>{p.adversarial_caption},
                                            std::vector<Tokens>{p.original_caption}, 1)));
  const std::string csv = caption_csv(std::vector<CaptionScores>{s});
  CHECK(csv.rfind("variant,pairs,B-1,B-2,B-3,B-4,ROUGE-L,KWR\n", 0) == 0);
  CHECK(csv.find("non_tar_confident,2,") != std::string::npos);
  CHECK(csv.find(",100.00\n") != std::string::npos);

  AttackResult all = r;
  all.variant = Variant::non_tar_all;
  all.o_pick = -1;
  CHECK(caption_pair(all).o_pick_keyword.empty());
  CHECK_FALSE(score_captions(all.variant, std::vector<CaptionPair>{caption_pair(all)}).kwr);
}
