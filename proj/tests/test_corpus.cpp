#include "doctest.h"

#include <cmath>
#include <map>

#include "smoltolk/corpus.hpp"

using namespace smoltolk;

namespace {

GrammarConfig toy_grammar() {
  GrammarConfig g;
  g.lexicon_seed = 11;
  g.lexicon_size = 64;
  g.min_sentences = 3;
  g.max_sentences = 6;
  return g;
}

CorpusConfig toy_corpus_config(i32 stories = 64) {
  CorpusConfig c;
  c.seed = 5;
  c.grammar = toy_grammar();
  c.num_stories = stories;
  c.speech_size = 48;
  return c;
}

// Wilson-Hilferty approximation of the chi-squared quantile.
double chi2_quantile(double p, double df) {
  // inverse normal via Acklam-style rational approximation is overkill here;
  // p = 0.99 is the only use, z_{0.99} = 2.3263478740
  const double z = 2.3263478740;
  (void)p;
  const double a = 2.0 / (9.0 * df);
  const double v = 1.0 - a + z * std::sqrt(a);
  return df * v * v * v;
}

}  // namespace

TEST_CASE("stories are deterministic per seed and differ across seeds") {
  Grammar g(toy_grammar());
  auto a = g.generate_story(3);
  auto b = g.generate_story(3);
  auto c = g.generate_story(4);
  CHECK(a.words == b.words);
  CHECK(a.sentence_end == b.sentence_end);
  CHECK(a.words != c.words);
  CHECK(!a.words.empty());
  // sentence_end closes the story
  CHECK(a.sentence_end.back() == 1);
}

TEST_CASE("empty or undersized lexicon is a config error") {
  GrammarConfig g = toy_grammar();
  g.lexicon_size = 3;
  CHECK_THROWS_AS(Grammar{g}, ConfigError);
}

TEST_CASE("unigram distribution matches the analytic grammar marginal") {
  Grammar g(toy_grammar());
  const auto expect = g.unigram_marginal();
  double psum = 0;
  for (double p : expect) psum += p;
  CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));

  std::map<std::string, i64> counts;
  i64 total = 0;
  for (u64 s = 0; s < 10000; ++s) {
    const Story st = g.generate_story(s);
    for (const auto& w : st.words) ++counts[w];
    total += static_cast<i64>(st.words.size());
  }
  double tv = 0;
  const auto& lex = g.lexicon();
  for (size_t i = 0; i < lex.size(); ++i) {
    const double emp = static_cast<double>(counts[lex[i]]) / static_cast<double>(total);
    tv += std::abs(emp - expect[i]);
  }
  tv /= 2.0;
  CHECK(tv < 0.02);
}

TEST_CASE("plan_spans covers words with alternating spans in bounds") {
  Rng rng(7);
  SpanBounds tb{10, 30}, sb{5, 15};

  SUBCASE("single-span plan is possible at num_words=12") {
    bool seen_single = false;
    for (int trial = 0; trial < 200; ++trial) {
      auto plan = plan_spans(12, rng, tb, sb);
      CHECK(plan.total_words() == 12);
      for (size_t i = 1; i < plan.spans.size(); ++i)
        CHECK(plan.spans[i].first != plan.spans[i - 1].first);
      if (plan.spans.size() == 1) seen_single = true;
    }
    CHECK(seen_single);
  }

  SUBCASE("non-final span lengths are within bounds") {
    for (int trial = 0; trial < 100; ++trial) {
      auto plan = plan_spans(500, rng, tb, sb);
      for (size_t i = 0; i + 1 < plan.spans.size(); ++i) {
        const auto [m, len] = plan.spans[i];
        const SpanBounds& b = m == Modality::Text ? tb : sb;
        CHECK(len >= b.lo);
        CHECK(len <= b.hi);
      }
    }
  }

  SUBCASE("precondition violation throws") {
    CHECK_THROWS_AS(plan_spans(5, rng, tb, sb), ValueError);
  }
}

TEST_CASE("span lengths are uniform over bounds (chi-squared at p > 0.01)") {
  Rng rng(13);
  SpanBounds tb{10, 30}, sb{5, 15};
  std::map<i32, i64> text_counts, speech_counts;
  i64 text_n = 0, speech_n = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    auto plan = plan_spans(4000, rng, tb, sb);
    for (size_t i = 0; i + 1 < plan.spans.size(); ++i) {  // final span may be truncated
      const auto [m, len] = plan.spans[i];
      if (m == Modality::Text) {
        ++text_counts[len];
        ++text_n;
      } else {
        ++speech_counts[len];
        ++speech_n;
      }
    }
    if (text_n > 40000) break;
  }
  auto chi2 = [](const std::map<i32, i64>& counts, i64 n, const SpanBounds& b) {
    const double k = static_cast<double>(b.hi - b.lo + 1);
    const double expect = static_cast<double>(n) / k;
    double stat = 0;
    for (i32 len = b.lo; len <= b.hi; ++len) {
      auto it = counts.find(len);
      const double obs = it == counts.end() ? 0.0 : static_cast<double>(it->second);
      stat += (obs - expect) * (obs - expect) / expect;
    }
    return stat;
  };
  CHECK(chi2(text_counts, text_n, tb) < chi2_quantile(0.99, 20));
  CHECK(chi2(speech_counts, speech_n, sb) < chi2_quantile(0.99, 10));
}

TEST_CASE("expected text:speech token ratio matches the analytic value") {
  // Mean text span 20 words at 1 token each; mean speech span 10 words at 4
  // tokens each (base count uniform over 2..6) => text fraction 1/3.
  Rng rng(17);
  SpanBounds tb{10, 30}, sb{5, 15};
  Vocab v{.text_size = 100, .speech_size = 500};
  double text_tokens = 0, speech_tokens = 0;
  Rng wordgen(3);
  for (int trial = 0; trial < 2000; ++trial) {
    auto plan = plan_spans(45, rng, tb, sb);
    i32 w = 0;
    for (size_t i = 0; i < plan.spans.size(); ++i) {
      auto [m, len] = plan.spans[i];
      for (i32 j = 0; j < len; ++j, ++w) {
        if (m == Modality::Text) {
          text_tokens += 1;
        } else {
          std::string word = "w" + std::to_string(wordgen.below(4096));
          speech_tokens += static_cast<double>(phonemize(word, v, 99, 0.0).size());
        }
      }
    }
  }
  const double frac = text_tokens / (text_tokens + speech_tokens);
  CHECK(frac == doctest::Approx(1.0 / 3.0).epsilon(0.06));
  CHECK(frac > 0.2);
  CHECK(frac < 0.5);
}

TEST_CASE("corpus builds deterministically and round-trips byte-identically") {
  auto cfg = toy_corpus_config();
  StoryCorpus a = StoryCorpus::build(cfg);
  StoryCorpus b = StoryCorpus::build(cfg);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.fingerprint() == b.fingerprint());

  const std::string bytes = a.serialize();
  StoryCorpus c = StoryCorpus::deserialize(std::span<const char>(bytes.data(), bytes.size()));
  CHECK(c.serialize() == bytes);
  CHECK(c.lexicon().manifest() == a.lexicon().manifest());
  CHECK(c.num_stories() == a.num_stories());
}

TEST_CASE("rendered speech word boundaries are consistent with phonemize") {
  auto corpus = StoryCorpus::build(toy_corpus_config(8));
  for (i64 s = 0; s < corpus.num_stories(); ++s) {
    auto seq = corpus.render_speech(s);
    validate(seq, corpus.vocab());
    const StoryTokens& st = corpus.story(s);
    for (i32 w = 0; w < st.words(); ++w) {
      const auto& span = seq.source_words[size_t(w)];
      const std::string& word = corpus.lexicon().word(st.word_ids[size_t(w)]);
      const u64 salt = static_cast<u64>(s) * 0x100000ull + static_cast<u64>(w);
      auto expect = phonemize(word, corpus.vocab(), corpus.config().seed, corpus.config().noise_p, salt);
      REQUIRE(span.end - span.begin == i32(expect.size()));
      CHECK(seq.word_end[size_t(span.end - 1)] == 1);
    }
  }
}

TEST_CASE("head assignment follows the target-modality rule") {
  auto corpus = StoryCorpus::build(toy_corpus_config(4));
  const Vocab& v = corpus.vocab();
  SpanPlan plan{{{Modality::Text, 4}, {Modality::Speech, 5}, {Modality::Text, 3}}};
  auto story_words = corpus.story(0).words();
  REQUIRE(story_words >= 12);
  SpanPlan fitted{{{Modality::Text, 4}, {Modality::Speech, 5}, {Modality::Text, story_words - 9}}};
  auto seq = corpus.render_interleaved(0, fitted);
  std::vector<i32> targets;
  std::vector<Head> heads;
  assign_heads(seq, v, targets, heads);
  REQUIRE(targets.size() == size_t(seq.size()));
  for (i64 i = 0; i + 1 < seq.size(); ++i) {
    const i32 t = targets[size_t(i)];
    REQUIRE(t == seq.ids[size_t(i + 1)]);
    if (v.is_text(t)) {
      CHECK(heads[size_t(i)] == Head::Text);
    } else if (v.is_speech(t)) {
      CHECK(heads[size_t(i)] == Head::Speech);
    } else {
      // switch is predicted by the head of the modality being exited
      CHECK(heads[size_t(i)] ==
            (seq.modality[size_t(i)] == Modality::Speech ? Head::Speech : Head::Text));
    }
  }
  CHECK(heads.back() == Head::None);
  CHECK(targets.back() == -1);
}

TEST_CASE("batch mixture proportions are within one sequence of the ratios") {
  auto corpus = StoryCorpus::build(toy_corpus_config(64));
  BatchConfig bc;
  bc.batch_tokens = 300 * 32;
  bc.context_len = 32;
  bc.text_spans = {4, 10};
  bc.speech_spans = {3, 8};
  BatchSampler sampler(corpus, bc, 1);
  Batch batch = sampler.next();
  REQUIRE(batch.rows == 300);
  i64 counts[3] = {0, 0, 0};
  for (auto t : batch.tags) ++counts[static_cast<int>(t)];
  for (i64 c : counts) {
    CHECK(c >= 99);
    CHECK(c <= 101);
  }
}

TEST_CASE("degenerate mixture produces an all-speech batch") {
  auto corpus = StoryCorpus::build(toy_corpus_config(16));
  BatchConfig bc;
  bc.batch_tokens = 8 * 64;
  bc.context_len = 64;
  bc.ratio_speech = 1.0;
  bc.ratio_text = 0.0;
  bc.ratio_interleaved = 0.0;
  BatchSampler sampler(corpus, bc, 2);
  Batch batch = sampler.next();
  for (auto t : batch.tags) CHECK(t == MixtureTag::Speech);
  for (i64 i = 0; i < batch.n(); ++i) {
    if (batch.heads[size_t(i)] != Head::None) CHECK(batch.heads[size_t(i)] == Head::Speech);
    if (batch.modality[size_t(i)] == Modality::Speech) CHECK(corpus.vocab().is_speech(batch.ids[size_t(i)]));
  }
}

TEST_CASE("every scored batch position has a head matching its target") {
  auto corpus = StoryCorpus::build(toy_corpus_config(32));
  BatchConfig bc;
  bc.batch_tokens = 16 * 48;
  bc.context_len = 48;
  bc.text_spans = {4, 10};
  bc.speech_spans = {3, 8};
  BatchSampler sampler(corpus, bc, 3);
  const Vocab& v = corpus.vocab();
  for (int step = 0; step < 5; ++step) {
    Batch batch = sampler.next();
    for (i64 i = 0; i < batch.n(); ++i) {
      const i32 t = batch.targets[size_t(i)];
      const Head h = batch.heads[size_t(i)];
      if (t < 0) {
        CHECK(h == Head::None);
        continue;
      }
      REQUIRE(h != Head::None);
      if (v.is_text(t)) CHECK(h == Head::Text);
      if (v.is_speech(t)) CHECK(h == Head::Speech);
      if (v.is_swt(t))
        CHECK(h == (batch.modality[size_t(i)] == Modality::Speech ? Head::Speech : Head::Text));
    }
    // segments tile rows without overlap and positions restart per segment
    for (auto [b, e] : batch.segments) {
      CHECK(batch.positions[size_t(b)] == 0);
      for (i64 i = b; i < e; ++i) CHECK(batch.positions[size_t(i)] == i - b);
    }
  }
}

TEST_CASE("sampler config errors") {
  auto corpus = StoryCorpus::build(toy_corpus_config(8));
  BatchConfig bc;
  bc.ratio_speech = 0.5;
  bc.ratio_text = 0.5;
  bc.ratio_interleaved = 0.5;
  CHECK_THROWS_AS(BatchSampler(corpus, bc, 1), ConfigError);
  BatchConfig bc2;
  bc2.context_len = 4;
  CHECK_THROWS_AS(BatchSampler(corpus, bc2, 1), ConfigError);
}

TEST_CASE("benchmark items are length-controlled with distinct continuations") {
  auto corpus = StoryCorpus::build(toy_corpus_config(48));
  auto items = make_benchmark(corpus, 7, 50);
  REQUIRE(items.size() == 50);
  for (const auto& it : items) {
    CHECK(it.correct_words.size() == it.distractor_words.size());
    CHECK(it.correct_words != it.distractor_words);
    CHECK(!it.context_words.empty());
  }
  // serialization round-trip
  const std::string text = serialize_benchmark(items);
  auto back = parse_benchmark(text);
  REQUIRE(back.size() == items.size());
  CHECK(back[3].context_words == items[3].context_words);
  CHECK(back[7].distractor_words == items[7].distractor_words);
  CHECK(serialize_benchmark(back) == text);
  CHECK_THROWS_AS(parse_benchmark("bogus\n1 2\t3\t4\n"), IoError);
}

TEST_CASE("T->S instances are text context, speech continuation, one switch") {
  auto corpus = StoryCorpus::build(toy_corpus_config(48));
  auto items = make_benchmark(corpus, 9, 10);
  const Vocab& v = corpus.vocab();
  for (const auto& item : items) {
    auto inst = instantiate(item, true, Setting::TS, corpus.lexicon(), corpus.config().seed);
    validate(inst.seq, v);
    CHECK(std::count(inst.seq.ids.begin(), inst.seq.ids.end(), v.swt_id()) == 1);
    for (i64 i = 0; i < inst.seq.size(); ++i) {
      if (i < inst.cont_begin - 1) CHECK(inst.seq.modality[size_t(i)] == Modality::Text);
      if (i == inst.cont_begin - 1) CHECK(inst.seq.modality[size_t(i)] == Modality::Switch);
      if (i >= inst.cont_begin) CHECK(inst.seq.modality[size_t(i)] == Modality::Speech);
    }
    // continuation length and content differ between the two candidates only
    auto wrong = instantiate(item, false, Setting::TS, corpus.lexicon(), corpus.config().seed);
    CHECK(wrong.cont_begin == inst.cont_begin);
  }
}
