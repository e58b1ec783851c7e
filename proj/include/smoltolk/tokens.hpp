#pragma once

#include <string>
#include <unordered_map>

#include "smoltolk/common.hpp"
#include "smoltolk/rng.hpp"

namespace smoltolk {

// Joint vocabulary layout: text ids [0, text_size), speech ids
// [text_size, text_size + speech_size), and one modality-switch token last.
struct Vocab {
  i32 text_size = 0;
  i32 speech_size = 500;

  i32 speech_begin() const { return text_size; }
  i32 swt_id() const { return text_size + speech_size; }
  i32 total() const { return text_size + speech_size + 1; }

  bool is_text(i32 id) const { return id >= 0 && id < text_size; }
  bool is_speech(i32 id) const { return id >= text_size && id < text_size + speech_size; }
  bool is_swt(i32 id) const { return id == swt_id(); }
};

enum class Modality : u8 { Text = 0, Speech = 1, Switch = 2 };

struct WordSpan {
  i32 word_index;
  i32 begin;  // token offsets, [begin, end)
  i32 end;
};

struct TokenSequence {
  std::vector<i32> ids;
  std::vector<Modality> modality;
  std::vector<u8> word_end;  // true at the last token of each word
  std::vector<WordSpan> source_words;

  i64 size() const { return static_cast<i64>(ids.size()); }
  void push(i32 id, Modality m, bool we) {
    ids.push_back(id);
    modality.push_back(m);
    word_end.push_back(we ? 1 : 0);
  }
  void append(const TokenSequence& other);
};

// Throws ValueError when the invariants of the type are broken; used by
// tests and by loaders of external files.
void validate(const TokenSequence& seq, const Vocab& vocab);

// Closed word-level text lexicon. Ids are assigned in word order and are
// stable for a fixed word list.
class Lexicon {
 public:
  Lexicon() = default;
  Lexicon(std::vector<std::string> words, i32 speech_size);

  const Vocab& vocab() const { return vocab_; }
  i32 size() const { return static_cast<i32>(words_.size()); }
  const std::string& word(i32 id) const { return words_[static_cast<size_t>(id)]; }
  const std::vector<std::string>& words() const { return words_; }

  // Text token id for a surface form; throws ValueError if out of vocabulary.
  i32 id_of(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  // Manifest: one line per id, `<id>\t<kind>\t<surface>`.
  std::string manifest() const;
  static Lexicon from_manifest(const std::string& text);
  u64 fingerprint() const { return fnv1a64(manifest()); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, i32> index_;
  Vocab vocab_;
};

// Merge adjacent equal speech tokens. All ids must be in the speech range.
std::vector<i32> collapse_repetitions(const std::vector<i32>& raw, const Vocab& vocab);

// Deterministic pseudo-phonemization standing in for a learned speech
// tokenizer: a hash of the word picks 2-6 base speech tokens, each repeated
// 1-3 times as if emitted at frame rate, then collapsed. noise_p substitutes
// each post-collapse token with a uniform random speech token; `salt` varies
// the noise stream between occurrences of the same word.
std::vector<i32> phonemize(const std::string& word, const Vocab& vocab, u64 corpus_seed,
                           double noise_p, u64 salt = 0);

// Alternating-modality span plan over a word sequence.
struct SpanPlan {
  std::vector<std::pair<Modality, i32>> spans;  // (Text|Speech, word count)
  i32 total_words() const;
};

// Render words through a span plan: text spans emit per-word text ids,
// speech spans emit phonemized ids, and one switch token separates adjacent
// spans. The sequence never starts with a switch token.
TokenSequence encode_interleaved(const std::vector<std::string>& words, const SpanPlan& plan,
                                 const Lexicon& lexicon, u64 seed, double noise_p = 0.0);

TokenSequence encode_text(const std::vector<std::string>& words, const Lexicon& lexicon);
TokenSequence encode_speech(const std::vector<std::string>& words, const Lexicon& lexicon, u64 seed,
                            double noise_p = 0.0);

}  // namespace smoltolk
