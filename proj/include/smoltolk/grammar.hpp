#pragma once

#include <string>

#include "smoltolk/common.hpp"
#include "smoltolk/rng.hpp"

namespace smoltolk {

// Weighted template grammar over a closed synthetic lexicon. Sentences are
// drawn from a fixed template set whose slots are filled from weighted word
// categories, which keeps the unigram marginal analytically computable.
struct GrammarConfig {
  u64 lexicon_seed = 1;
  i32 lexicon_size = 512;
  i32 min_sentences = 3;   // per story
  i32 max_sentences = 8;
};

struct Story {
  std::vector<std::string> words;
  std::vector<u8> sentence_end;  // true at the final word of each sentence
};

class Grammar {
 public:
  explicit Grammar(const GrammarConfig& cfg);

  const GrammarConfig& config() const { return cfg_; }
  const std::vector<std::string>& lexicon() const { return lexicon_; }

  Story generate_story(u64 seed) const;

  // Expected long-run word frequencies under the grammar, indexed like the
  // lexicon; sums to 1.
  std::vector<double> unigram_marginal() const;

  double mean_sentence_length() const;

 private:
  struct Category {
    std::string name;
    i32 begin = 0;  // lexicon id range [begin, end)
    i32 end = 0;
    std::vector<double> weights;  // per word, normalized
  };

  const Category& category(const std::string& name) const;
  i32 sample_word(const Category& cat, Rng& rng) const;

  GrammarConfig cfg_;
  std::vector<std::string> lexicon_;
  std::vector<Category> categories_;
  std::vector<std::pair<std::vector<i32>, double>> templates_;  // (category indices, weight)
};

}  // namespace smoltolk
