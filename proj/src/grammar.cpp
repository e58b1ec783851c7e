#include "smoltolk/grammar.hpp"

#include <algorithm>
#include <set>

namespace smoltolk {

namespace {

// Pronounceable CV(C) pseudo-words, unique within the lexicon.
std::string make_word(Rng& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                 "br", "dr", "fl", "gr", "kl", "pr", "st", "tr"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  static const char* codas[] = {"", "", "n", "m", "s", "k", "l"};
  const int sylls = 1 + static_cast<int>(rng.below(2));
  std::string w;
  for (int s = 0; s < sylls; ++s) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
  }
  w += codas[rng.below(std::size(codas))];
  return w;
}

// Zipf-like within-category weights: weight of rank r is 1/(r+1).
std::vector<double> zipf_weights(i32 n) {
  std::vector<double> w(static_cast<size_t>(n));
  double total = 0;
  for (i32 i = 0; i < n; ++i) {
    w[static_cast<size_t>(i)] = 1.0 / static_cast<double>(i + 1);
    total += w[static_cast<size_t>(i)];
  }
  for (auto& x : w) x /= total;
  return w;
}

}  // namespace

Grammar::Grammar(const GrammarConfig& cfg) : cfg_(cfg) {
  if (cfg_.lexicon_size < 24) throw ConfigError("grammar: lexicon_size must be at least 24");
  if (cfg_.min_sentences < 1 || cfg_.max_sentences < cfg_.min_sentences)
    throw ConfigError("grammar: bad sentence count bounds");

  // Unique surfaces, deterministic for the seed.
  Rng rng(cfg_.lexicon_seed ^ 0x7c1592a5bdf3a1full);
  std::set<std::string> seen;
  while (static_cast<i32>(lexicon_.size()) < cfg_.lexicon_size) {
    std::string w = make_word(rng);
    if (seen.insert(w).second) lexicon_.push_back(w);
  }

  // Category id ranges partition the lexicon.
  const i32 det = 4;
  const i32 rest = cfg_.lexicon_size - det;
  const i32 noun = rest * 45 / 100;
  const i32 verb = rest * 25 / 100;
  const i32 adj = rest * 20 / 100;
  const i32 adv = rest - noun - verb - adj;
  i32 at = 0;
  auto add_cat = [&](const std::string& name, i32 count) {
    Category c;
    c.name = name;
    c.begin = at;
    c.end = at + count;
    c.weights = zipf_weights(count);
    at += count;
    categories_.push_back(std::move(c));
  };
  add_cat("det", det);
  add_cat("noun", noun);
  add_cat("verb", verb);
  add_cat("adj", adj);
  add_cat("adv", adv);

  auto idx = [&](const char* name) {
    for (size_t i = 0; i < categories_.size(); ++i)
      if (categories_[i].name == name) return static_cast<i32>(i);
    throw ConfigError("grammar: unknown category");
  };
  const i32 D = idx("det"), N = idx("noun"), V = idx("verb"), A = idx("adj"), R = idx("adv");
  templates_ = {
      {{D, N, V, D, N}, 3.0},
      {{D, A, N, V, D, N}, 2.0},
      {{D, N, V, R}, 2.0},
      {{D, N, V, D, A, N}, 2.0},
      {{D, A, N, V, R}, 1.0},
  };
}

const Grammar::Category& Grammar::category(const std::string& name) const {
  for (const auto& c : categories_)
    if (c.name == name) return c;
  throw ConfigError("grammar: unknown category " + name);
}

i32 Grammar::sample_word(const Category& cat, Rng& rng) const {
  double u = rng.uniform();
  double acc = 0;
  const i32 n = cat.end - cat.begin;
  for (i32 i = 0; i < n; ++i) {
    acc += cat.weights[static_cast<size_t>(i)];
    if (u < acc) return cat.begin + i;
  }
  return cat.end - 1;
}

Story Grammar::generate_story(u64 seed) const {
  Rng rng(fnv1a64("story", seed ^ cfg_.lexicon_seed * 0x9e3779b97f4a7c15ull));
  const i32 sentences =
      cfg_.min_sentences + static_cast<i32>(rng.below(
                               static_cast<u64>(cfg_.max_sentences - cfg_.min_sentences + 1)));
  Story story;
  double wsum = 0;
  for (const auto& [slots, w] : templates_) wsum += w;
  for (i32 s = 0; s < sentences; ++s) {
    double u = rng.uniform() * wsum;
    size_t ti = 0;
    for (; ti + 1 < templates_.size(); ++ti) {
      if (u < templates_[ti].second) break;
      u -= templates_[ti].second;
    }
    const auto& slots = templates_[ti].first;
    for (size_t k = 0; k < slots.size(); ++k) {
      const i32 wid = sample_word(categories_[static_cast<size_t>(slots[k])], rng);
      story.words.push_back(lexicon_[static_cast<size_t>(wid)]);
      story.sentence_end.push_back(k + 1 == slots.size() ? 1 : 0);
    }
  }
  return story;
}

std::vector<double> Grammar::unigram_marginal() const {
  std::vector<double> expect(static_cast<size_t>(cfg_.lexicon_size), 0.0);
  double wsum = 0, len_mean = 0;
  for (const auto& [slots, w] : templates_) wsum += w;
  for (const auto& [slots, w] : templates_) {
    const double pt = w / wsum;
    len_mean += pt * static_cast<double>(slots.size());
    for (i32 ci : slots) {
      const auto& cat = categories_[static_cast<size_t>(ci)];
      for (i32 i = cat.begin; i < cat.end; ++i)
        expect[static_cast<size_t>(i)] += pt * cat.weights[static_cast<size_t>(i - cat.begin)];
    }
  }
  for (auto& e : expect) e /= len_mean;
  return expect;
}

double Grammar::mean_sentence_length() const {
  double wsum = 0, len = 0;
  for (const auto& [slots, w] : templates_) wsum += w;
  for (const auto& [slots, w] : templates_) len += (w / wsum) * static_cast<double>(slots.size());
  return len;
}

}  // namespace smoltolk
