#pragma once

#include "smoltolk/grammar.hpp"
#include "smoltolk/tensor.hpp"
#include "smoltolk/tokens.hpp"

namespace smoltolk {

// ---------------------------------------------------------------------------
// Span planning
// ---------------------------------------------------------------------------

struct SpanBounds {
  i32 lo = 0;
  i32 hi = 0;
};

// Alternating text/speech spans with uniformly sampled lengths; the first
// span's modality is chosen uniformly and the final span may be truncated.
SpanPlan plan_spans(i32 num_words, Rng& rng, const SpanBounds& text_bounds,
                    const SpanBounds& speech_bounds);

// ---------------------------------------------------------------------------
// Story corpus: paired word-aligned text/speech token data
// ---------------------------------------------------------------------------

struct CorpusConfig {
  u64 seed = 1;
  GrammarConfig grammar;
  i32 num_stories = 2000;
  i32 speech_size = 500;
  double noise_p = 0.0;
};

struct StoryTokens {
  std::vector<i32> word_ids;    // one text id per word
  std::vector<i32> speech_ids;  // concatenation of per-word speech chunks
  std::vector<i32> chunk_end;   // per word: end offset into speech_ids
  i32 words() const { return static_cast<i32>(word_ids.size()); }
};

class StoryCorpus {
 public:
  StoryCorpus() = default;

  static StoryCorpus build(const CorpusConfig& cfg);

  const CorpusConfig& config() const { return cfg_; }
  const Lexicon& lexicon() const { return lexicon_; }
  const Vocab& vocab() const { return lexicon_.vocab(); }
  i64 num_stories() const { return static_cast<i64>(stories_.size()); }
  const StoryTokens& story(i64 i) const { return stories_[static_cast<size_t>(i)]; }

  TokenSequence render_text(i64 story) const;
  TokenSequence render_speech(i64 story) const;
  TokenSequence render_interleaved(i64 story, const SpanPlan& plan) const;

  // Length-prefixed binary records behind a magic + version header;
  // byte-identical for a fixed config.
  std::string serialize() const;
  static StoryCorpus deserialize(std::span<const char> bytes);
  void save(const std::filesystem::path& path) const;
  static StoryCorpus load(const std::filesystem::path& path);
  u64 fingerprint() const;

 private:
  CorpusConfig cfg_;
  Lexicon lexicon_;
  std::vector<StoryTokens> stories_;
};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

enum class MixtureTag : u8 { Speech = 0, Text = 1, Interleaved = 2 };
enum class Head : u8 { None = 0, Text = 1, Speech = 2 };

// Per-position next-token targets and scoring heads for one document.
// Targets of the switch token are scored by the head of the modality being
// exited (the modality of the current position).
void assign_heads(const TokenSequence& seq, const Vocab& vocab, std::vector<i32>& targets,
                  std::vector<Head>& heads);

struct BatchConfig {
  i64 batch_tokens = 16384;
  i32 context_len = 256;
  double ratio_speech = 1.0 / 3.0;
  double ratio_text = 1.0 / 3.0;
  double ratio_interleaved = 1.0 / 3.0;
  SpanBounds text_spans{10, 30};
  SpanBounds speech_spans{5, 15};
};

// Packed batch, flattened row-major over (rows, cols). Documents never share
// attention: `segments` confines each one, and rotary positions restart at
// document starts. Unscored and pad positions carry target -1 / Head::None.
struct Batch {
  i32 rows = 0;
  i32 cols = 0;
  std::vector<i32> ids;
  std::vector<Modality> modality;
  std::vector<i32> positions;
  Segments segments;
  std::vector<i32> targets;
  std::vector<Head> heads;
  std::vector<u8> word_end;
  std::vector<MixtureTag> tags;  // per row

  i64 n() const { return static_cast<i64>(rows) * cols; }
  i64 scored(Head h) const;
};

// Single-consumer sampler with an internal deterministic stream.
class BatchSampler {
 public:
  BatchSampler(const StoryCorpus& corpus, BatchConfig cfg, u64 seed);

  Batch next(bool interleaved_only = false);

  std::array<u64, 4> rng_state() const { return rng_.state(); }
  void set_rng_state(const std::array<u64, 4>& s) { rng_.set_state(s); }

 private:
  const StoryCorpus* corpus_;
  BatchConfig cfg_;
  Rng rng_;
};

// Build target/head/segment fields for a standalone sequence (one document),
// as a single-row batch. Used by evaluation paths.
Batch batch_from_sequence(const TokenSequence& seq, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Benchmarks: length-controlled continuation pairs in four settings
// ---------------------------------------------------------------------------

enum class Setting : u8 { T = 0, S = 1, TS = 2, ST = 3 };

const char* setting_name(Setting s);
Setting setting_from_name(const std::string& name);

struct BenchmarkItem {
  std::vector<i32> context_words;  // lexicon ids
  std::vector<i32> correct_words;
  std::vector<i32> distractor_words;
};

std::vector<BenchmarkItem> make_benchmark(const StoryCorpus& corpus, u64 seed, i32 n_items);

std::string serialize_benchmark(const std::vector<BenchmarkItem>& items);
std::vector<BenchmarkItem> parse_benchmark(const std::string& text);

// A scoring instance: the rendered sequence plus the token offset where the
// continuation begins. Positions whose target lies at or after cont_begin
// form the continuation NLL.
struct ScoringInstance {
  TokenSequence seq;
  i64 cont_begin = 0;
};

ScoringInstance instantiate(const BenchmarkItem& item, bool use_correct, Setting setting,
                            const Lexicon& lexicon, u64 phoneme_seed);

}  // namespace smoltolk
