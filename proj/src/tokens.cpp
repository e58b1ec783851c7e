#include "smoltolk/tokens.hpp"

#include <sstream>

namespace smoltolk {

void TokenSequence::append(const TokenSequence& other) {
  const i32 tok_off = static_cast<i32>(ids.size());
  const i32 word_off = source_words.empty() ? 0 : source_words.back().word_index + 1;
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
  modality.insert(modality.end(), other.modality.begin(), other.modality.end());
  word_end.insert(word_end.end(), other.word_end.begin(), other.word_end.end());
  for (const auto& w : other.source_words)
    source_words.push_back({w.word_index + word_off, w.begin + tok_off, w.end + tok_off});
}

void validate(const TokenSequence& seq, const Vocab& vocab) {
  const i64 n = seq.size();
  if (static_cast<i64>(seq.modality.size()) != n || static_cast<i64>(seq.word_end.size()) != n)
    throw ValueError("token sequence: ragged field lengths");
  for (i64 i = 0; i < n; ++i) {
    const i32 id = seq.ids[static_cast<size_t>(i)];
    if (id < 0 || id >= vocab.total()) throw ValueError("token sequence: id out of vocab range");
    const Modality m = seq.modality[static_cast<size_t>(i)];
    if ((m == Modality::Switch) != vocab.is_swt(id))
      throw ValueError("token sequence: switch label inconsistent with swt id");
    if (m == Modality::Text && !vocab.is_text(id))
      throw ValueError("token sequence: text label on non-text id");
    if (m == Modality::Speech && !vocab.is_speech(id))
      throw ValueError("token sequence: speech label on non-speech id");
  }
  for (const auto& w : seq.source_words) {
    if (w.begin < 0 || w.end > n || w.begin >= w.end)
      throw ValueError("token sequence: bad word span");
    bool any_end = false;
    for (i32 i = w.begin; i < w.end; ++i) any_end = any_end || seq.word_end[static_cast<size_t>(i)];
    if (!any_end) throw ValueError("token sequence: word span without word_end flag");
  }
}

Lexicon::Lexicon(std::vector<std::string> words, i32 speech_size) : words_(std::move(words)) {
  vocab_.text_size = static_cast<i32>(words_.size());
  vocab_.speech_size = speech_size;
  for (i32 i = 0; i < vocab_.text_size; ++i) {
    if (!index_.emplace(words_[static_cast<size_t>(i)], i).second)
      throw ValueError("lexicon: duplicate word '" + words_[static_cast<size_t>(i)] + "'");
  }
}

i32 Lexicon::id_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw ValueError("out of vocabulary: '" + word + "'");
  return it->second;
}

std::string Lexicon::manifest() const {
  std::ostringstream os;
  for (i32 i = 0; i < vocab_.text_size; ++i)
    os << i << "\ttext\t" << words_[static_cast<size_t>(i)] << "\n";
  for (i32 k = 0; k < vocab_.speech_size; ++k)
    os << vocab_.speech_begin() + k << "\tspeech\tS" << k << "\n";
  os << vocab_.swt_id() << "\tswitch\t[swt]\n";
  return os.str();
}

Lexicon Lexicon::from_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> words;
  i32 speech = 0;
  i64 lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id_s, kind, surface;
    if (!std::getline(ls, id_s, '\t') || !std::getline(ls, kind, '\t') || !std::getline(ls, surface))
      throw IoError("manifest line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    if (kind == "text") {
      if (std::stoi(id_s) != static_cast<i32>(words.size()))
        throw IoError("manifest line " + std::to_string(lineno) + ": non-contiguous text id");
      words.push_back(surface);
    } else if (kind == "speech") {
      ++speech;
    } else if (kind != "switch") {
      throw IoError("manifest line " + std::to_string(lineno) + ": unknown kind '" + kind + "'");
    }
  }
  return Lexicon(std::move(words), speech);
}

std::vector<i32> collapse_repetitions(const std::vector<i32>& raw, const Vocab& vocab) {
  std::vector<i32> out;
  out.reserve(raw.size());
  for (i32 id : raw) {
    if (!vocab.is_speech(id))
      throw ValueError("collapse_repetitions: id " + std::to_string(id) + " is not a speech token");
    if (out.empty() || out.back() != id) out.push_back(id);
  }
  return out;
}

std::vector<i32> phonemize(const std::string& word, const Vocab& vocab, u64 corpus_seed,
                           double noise_p, u64 salt) {
  if (word.empty()) throw ValueError("phonemize: empty word");
  if (noise_p < 0.0 || noise_p >= 0.5) throw ValueError("phonemize: noise_p must be in [0, 0.5)");

  const u64 h = fnv1a64(word, corpus_seed ^ 0xa0761d6478bd642full);
  Rng rng(h);
  const int n_base = 2 + static_cast<int>(rng.below(5));

  // Base tokens with no adjacent equals, each emitted 1-3 times to mimic
  // frame-rate duplication, then collapsed back down.
  std::vector<i32> frames;
  i32 prev = -1;
  for (int b = 0; b < n_base; ++b) {
    i32 tok;
    do {
      tok = vocab.speech_begin() + static_cast<i32>(rng.below(static_cast<u64>(vocab.speech_size)));
    } while (tok == prev);
    prev = tok;
    const int reps = 1 + static_cast<int>(rng.below(3));
    for (int r = 0; r < reps; ++r) frames.push_back(tok);
  }
  std::vector<i32> toks = collapse_repetitions(frames, vocab);

  if (noise_p > 0.0) {
    Rng noise(h ^ fnv1a64("noise", salt * 0x9e3779b97f4a7c15ull + 1));
    for (auto& t : toks)
      if (noise.uniform() < noise_p)
        t = vocab.speech_begin() + static_cast<i32>(noise.below(static_cast<u64>(vocab.speech_size)));
  }
  return toks;
}

i32 SpanPlan::total_words() const {
  i32 n = 0;
  for (const auto& [m, c] : spans) n += c;
  return n;
}

TokenSequence encode_interleaved(const std::vector<std::string>& words, const SpanPlan& plan,
                                 const Lexicon& lexicon, u64 seed, double noise_p) {
  if (plan.total_words() != static_cast<i32>(words.size()))
    throw ValueError("encode_interleaved: plan covers " + std::to_string(plan.total_words()) +
                     " words, got " + std::to_string(words.size()));
  for (size_t s = 1; s < plan.spans.size(); ++s)
    if (plan.spans[s].first == plan.spans[s - 1].first)
      throw ValueError("encode_interleaved: plan modalities must alternate");

  const Vocab& vocab = lexicon.vocab();
  TokenSequence seq;
  i32 w = 0;
  for (size_t s = 0; s < plan.spans.size(); ++s) {
    const auto [m, count] = plan.spans[s];
    if (s > 0) seq.push(vocab.swt_id(), Modality::Switch, false);
    for (i32 k = 0; k < count; ++k, ++w) {
      const std::string& word = words[static_cast<size_t>(w)];
      const i32 begin = static_cast<i32>(seq.size());
      if (m == Modality::Text) {
        seq.push(lexicon.id_of(word), Modality::Text, true);
      } else {
        for (i32 tok : phonemize(word, vocab, seed, noise_p, static_cast<u64>(w)))
          seq.push(tok, Modality::Speech, false);
        seq.word_end.back() = 1;
      }
      seq.source_words.push_back({w, begin, static_cast<i32>(seq.size())});
    }
  }
  return seq;
}

TokenSequence encode_text(const std::vector<std::string>& words, const Lexicon& lexicon) {
  SpanPlan plan;
  plan.spans = {{Modality::Text, static_cast<i32>(words.size())}};
  return encode_interleaved(words, plan, lexicon, 0, 0.0);
}

TokenSequence encode_speech(const std::vector<std::string>& words, const Lexicon& lexicon, u64 seed,
                            double noise_p) {
  SpanPlan plan;
  plan.spans = {{Modality::Speech, static_cast<i32>(words.size())}};
  return encode_interleaved(words, plan, lexicon, seed, noise_p);
}

}  // namespace smoltolk
