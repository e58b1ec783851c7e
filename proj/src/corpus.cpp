#include "smoltolk/corpus.hpp"

#include <algorithm>

namespace smoltolk {

SpanPlan plan_spans(i32 num_words, Rng& rng, const SpanBounds& text_bounds,
                    const SpanBounds& speech_bounds) {
  if (num_words < text_bounds.lo)
    throw ValueError("plan_spans: num_words " + std::to_string(num_words) +
                     " below minimum text span " + std::to_string(text_bounds.lo));
  if (text_bounds.lo < 1 || text_bounds.hi < text_bounds.lo || speech_bounds.lo < 1 ||
      speech_bounds.hi < speech_bounds.lo)
    throw ConfigError("plan_spans: bad span bounds");

  SpanPlan plan;
  Modality m = rng.below(2) == 0 ? Modality::Text : Modality::Speech;
  i32 remaining = num_words;
  while (remaining > 0) {
    const SpanBounds& b = m == Modality::Text ? text_bounds : speech_bounds;
    i32 len = static_cast<i32>(rng.range(b.lo, b.hi));
    len = std::min(len, remaining);  // truncated final span allowed
    plan.spans.push_back({m, len});
    remaining -= len;
    m = m == Modality::Text ? Modality::Speech : Modality::Text;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// StoryCorpus
// ---------------------------------------------------------------------------

StoryCorpus StoryCorpus::build(const CorpusConfig& cfg) {
  StoryCorpus corpus;
  corpus.cfg_ = cfg;
  Grammar grammar(cfg.grammar);
  corpus.lexicon_ = Lexicon(grammar.lexicon(), cfg.speech_size);

  const Vocab& vocab = corpus.lexicon_.vocab();
  corpus.stories_.reserve(static_cast<size_t>(cfg.num_stories));
  for (i32 s = 0; s < cfg.num_stories; ++s) {
    Story story = grammar.generate_story(cfg.seed * 0x51d2f149ull + static_cast<u64>(s));
    StoryTokens st;
    st.word_ids.reserve(story.words.size());
    for (size_t w = 0; w < story.words.size(); ++w) {
      st.word_ids.push_back(corpus.lexicon_.id_of(story.words[w]));
      const u64 salt = static_cast<u64>(s) * 0x100000ull + static_cast<u64>(w);
      for (i32 tok : phonemize(story.words[w], vocab, cfg.seed, cfg.noise_p, salt))
        st.speech_ids.push_back(tok);
      st.chunk_end.push_back(static_cast<i32>(st.speech_ids.size()));
    }
    corpus.stories_.push_back(std::move(st));
  }
  return corpus;
}

TokenSequence StoryCorpus::render_text(i64 story) const {
  const StoryTokens& st = stories_[static_cast<size_t>(story)];
  TokenSequence seq;
  for (i32 w = 0; w < st.words(); ++w) {
    seq.push(st.word_ids[static_cast<size_t>(w)], Modality::Text, true);
    seq.source_words.push_back({w, w, w + 1});
  }
  return seq;
}

TokenSequence StoryCorpus::render_speech(i64 story) const {
  const StoryTokens& st = stories_[static_cast<size_t>(story)];
  TokenSequence seq;
  i32 begin = 0;
  for (i32 w = 0; w < st.words(); ++w) {
    const i32 end = st.chunk_end[static_cast<size_t>(w)];
    const i32 out_begin = static_cast<i32>(seq.size());
    for (i32 i = begin; i < end; ++i) seq.push(st.speech_ids[static_cast<size_t>(i)], Modality::Speech, false);
    seq.word_end.back() = 1;
    seq.source_words.push_back({w, out_begin, static_cast<i32>(seq.size())});
    begin = end;
  }
  return seq;
}

TokenSequence StoryCorpus::render_interleaved(i64 story, const SpanPlan& plan) const {
  const StoryTokens& st = stories_[static_cast<size_t>(story)];
  if (plan.total_words() != st.words())
    throw ValueError("render_interleaved: plan does not cover the story");
  const Vocab& vb = vocab();
  TokenSequence seq;
  i32 w = 0;
  for (size_t s = 0; s < plan.spans.size(); ++s) {
    const auto [m, count] = plan.spans[s];
    if (s > 0) seq.push(vb.swt_id(), Modality::Switch, false);
    for (i32 k = 0; k < count; ++k, ++w) {
      const i32 out_begin = static_cast<i32>(seq.size());
      if (m == Modality::Text) {
        seq.push(st.word_ids[static_cast<size_t>(w)], Modality::Text, true);
      } else {
        const i32 cb = w == 0 ? 0 : st.chunk_end[static_cast<size_t>(w - 1)];
        const i32 ce = st.chunk_end[static_cast<size_t>(w)];
        for (i32 i = cb; i < ce; ++i) seq.push(st.speech_ids[static_cast<size_t>(i)], Modality::Speech, false);
        seq.word_end.back() = 1;
      }
      seq.source_words.push_back({w, out_begin, static_cast<i32>(seq.size())});
    }
  }
  return seq;
}

namespace {
constexpr char kCorpusMagic[4] = {'S', 'T', 'C', 'P'};
constexpr u32 kCorpusVersion = 1;
}  // namespace

std::string StoryCorpus::serialize() const {
  BinWriter w;
  w.raw(kCorpusMagic, 4);
  w.pod(kCorpusVersion);
  w.pod(cfg_.seed);
  w.pod(cfg_.noise_p);
  w.pod(cfg_.grammar.lexicon_seed);
  w.pod(cfg_.grammar.lexicon_size);
  w.pod(cfg_.grammar.min_sentences);
  w.pod(cfg_.grammar.max_sentences);
  w.pod(cfg_.speech_size);
  w.pod(static_cast<u32>(stories_.size()));
  w.pod(static_cast<u32>(lexicon_.size()));
  for (i32 i = 0; i < lexicon_.size(); ++i) w.str(lexicon_.word(i));
  for (const auto& st : stories_) {
    w.pod(static_cast<u32>(st.word_ids.size()));
    w.raw(st.word_ids.data(), st.word_ids.size() * sizeof(i32));
    w.pod(static_cast<u32>(st.speech_ids.size()));
    w.raw(st.speech_ids.data(), st.speech_ids.size() * sizeof(i32));
    w.raw(st.chunk_end.data(), st.chunk_end.size() * sizeof(i32));
  }
  return std::move(w.buf);
}

StoryCorpus StoryCorpus::deserialize(std::span<const char> bytes) {
  BinReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCorpusMagic, 4) != 0) throw IoError("corpus file: bad magic");
  const u32 version = r.pod<u32>();
  if (version != kCorpusVersion)
    throw IoError("corpus file: unsupported version " + std::to_string(version));
  StoryCorpus c;
  c.cfg_.seed = r.pod<u64>();
  c.cfg_.noise_p = r.pod<double>();
  c.cfg_.grammar.lexicon_seed = r.pod<u64>();
  c.cfg_.grammar.lexicon_size = r.pod<i32>();
  c.cfg_.grammar.min_sentences = r.pod<i32>();
  c.cfg_.grammar.max_sentences = r.pod<i32>();
  c.cfg_.speech_size = r.pod<i32>();
  const u32 n_stories = r.pod<u32>();
  const u32 n_words = r.pod<u32>();
  std::vector<std::string> words;
  words.reserve(n_words);
  for (u32 i = 0; i < n_words; ++i) words.push_back(r.str());
  c.lexicon_ = Lexicon(std::move(words), c.cfg_.speech_size);
  c.stories_.resize(n_stories);
  for (auto& st : c.stories_) {
    const u32 nw = r.pod<u32>();
    st.word_ids.resize(nw);
    r.raw(st.word_ids.data(), nw * sizeof(i32));
    const u32 ns = r.pod<u32>();
    st.speech_ids.resize(ns);
    r.raw(st.speech_ids.data(), ns * sizeof(i32));
    st.chunk_end.resize(nw);
    r.raw(st.chunk_end.data(), nw * sizeof(i32));
  }
  c.cfg_.num_stories = static_cast<i32>(n_stories);
  return c;
}

void StoryCorpus::save(const std::filesystem::path& path) const {
  atomic_write_file(path, serialize());
}

StoryCorpus StoryCorpus::load(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return deserialize(std::span<const char>(bytes.data(), bytes.size()));
}

u64 StoryCorpus::fingerprint() const {
  const std::string bytes = serialize();
  return fnv1a64(bytes);
}

// ---------------------------------------------------------------------------
// Head assignment and batching
// ---------------------------------------------------------------------------

void assign_heads(const TokenSequence& seq, const Vocab& vocab, std::vector<i32>& targets,
                  std::vector<Head>& heads) {
  const i64 n = seq.size();
  targets.assign(static_cast<size_t>(n), -1);
  heads.assign(static_cast<size_t>(n), Head::None);
  for (i64 i = 0; i + 1 < n; ++i) {
    const i32 target = seq.ids[static_cast<size_t>(i + 1)];
    targets[static_cast<size_t>(i)] = target;
    if (vocab.is_text(target)) {
      heads[static_cast<size_t>(i)] = Head::Text;
    } else if (vocab.is_speech(target)) {
      heads[static_cast<size_t>(i)] = Head::Speech;
    } else {  // switch token: scored by the head of the modality being exited
      heads[static_cast<size_t>(i)] =
          seq.modality[static_cast<size_t>(i)] == Modality::Speech ? Head::Speech : Head::Text;
    }
  }
}

i64 Batch::scored(Head h) const {
  i64 count = 0;
  for (Head x : heads) count += x == h ? 1 : 0;
  return count;
}

BatchSampler::BatchSampler(const StoryCorpus& corpus, BatchConfig cfg, u64 seed)
    : corpus_(&corpus), cfg_(cfg), rng_(fnv1a64("batch-sampler", seed)) {
  const double rsum = cfg_.ratio_speech + cfg_.ratio_text + cfg_.ratio_interleaved;
  if (std::abs(rsum - 1.0) > 1e-9) throw ConfigError("batch sampler: mixture ratios must sum to 1");
  if (cfg_.context_len < 8) throw ConfigError("batch sampler: context_len below minimum sequence");
  if (corpus.num_stories() == 0) throw ConfigError("batch sampler: empty corpus");
  const i32 min_story = corpus.config().grammar.min_sentences * 4;
  if (min_story < cfg_.text_spans.lo)
    throw ConfigError("batch sampler: stories may be shorter than the minimum text span");
}

Batch BatchSampler::next(bool interleaved_only) {
  Batch batch;
  batch.rows = static_cast<i32>(std::max<i64>(1, cfg_.batch_tokens / cfg_.context_len));
  batch.cols = cfg_.context_len;
  const i64 n = batch.n();
  batch.ids.assign(static_cast<size_t>(n), 0);
  batch.modality.assign(static_cast<size_t>(n), Modality::Text);
  batch.positions.assign(static_cast<size_t>(n), 0);
  batch.targets.assign(static_cast<size_t>(n), -1);
  batch.heads.assign(static_cast<size_t>(n), Head::None);
  batch.word_end.assign(static_cast<size_t>(n), 0);

  // Largest-remainder apportionment of rows across mixture tags.
  batch.tags.assign(static_cast<size_t>(batch.rows), MixtureTag::Interleaved);
  if (!interleaved_only) {
    const double ratios[3] = {cfg_.ratio_speech, cfg_.ratio_text, cfg_.ratio_interleaved};
    i32 counts[3];
    double fracs[3];
    i32 assigned = 0;
    for (int t = 0; t < 3; ++t) {
      const double exact = ratios[t] * batch.rows;
      counts[t] = static_cast<i32>(exact);
      fracs[t] = exact - counts[t];
      assigned += counts[t];
    }
    while (assigned < batch.rows) {
      int best = 0;
      for (int t = 1; t < 3; ++t)
        if (fracs[t] > fracs[best]) best = t;
      ++counts[best];
      fracs[best] = -1;
      ++assigned;
    }
    i32 row = 0;
    for (int t = 0; t < 3; ++t)
      for (i32 k = 0; k < counts[t]; ++k) batch.tags[static_cast<size_t>(row++)] = static_cast<MixtureTag>(t);
  }

  std::vector<i32> targets;
  std::vector<Head> heads;
  for (i32 r = 0; r < batch.rows; ++r) {
    const MixtureTag tag = batch.tags[static_cast<size_t>(r)];
    i32 filled = 0;
    while (batch.cols - filled >= 8) {
      const i64 story = static_cast<i64>(rng_.below(static_cast<u64>(corpus_->num_stories())));
      TokenSequence seq;
      switch (tag) {
        case MixtureTag::Text:
          seq = corpus_->render_text(story);
          break;
        case MixtureTag::Speech:
          seq = corpus_->render_speech(story);
          break;
        case MixtureTag::Interleaved: {
          SpanPlan plan =
              plan_spans(corpus_->story(story).words(), rng_, cfg_.text_spans, cfg_.speech_spans);
          seq = corpus_->render_interleaved(story, plan);
          break;
        }
      }
      assign_heads(seq, corpus_->vocab(), targets, heads);
      const i32 take = std::min<i32>(static_cast<i32>(seq.size()), batch.cols - filled);
      const i64 off = static_cast<i64>(r) * batch.cols + filled;
      for (i32 i = 0; i < take; ++i) {
        batch.ids[static_cast<size_t>(off + i)] = seq.ids[static_cast<size_t>(i)];
        batch.modality[static_cast<size_t>(off + i)] = seq.modality[static_cast<size_t>(i)];
        batch.positions[static_cast<size_t>(off + i)] = i;
        batch.word_end[static_cast<size_t>(off + i)] = seq.word_end[static_cast<size_t>(i)];
        if (i + 1 < take) {
          batch.targets[static_cast<size_t>(off + i)] = targets[static_cast<size_t>(i)];
          batch.heads[static_cast<size_t>(off + i)] = heads[static_cast<size_t>(i)];
        }
      }
      batch.segments.push_back({off, off + take});
      filled += take;
    }
  }
  return batch;
}

Batch batch_from_sequence(const TokenSequence& seq, const Vocab& vocab) {
  Batch b;
  b.rows = 1;
  b.cols = static_cast<i32>(seq.size());
  b.ids = seq.ids;
  b.modality = seq.modality;
  b.word_end = seq.word_end;
  b.positions.resize(static_cast<size_t>(b.cols));
  for (i32 i = 0; i < b.cols; ++i) b.positions[static_cast<size_t>(i)] = i;
  b.segments = {{0, b.cols}};
  assign_heads(seq, vocab, b.targets, b.heads);
  b.tags = {MixtureTag::Interleaved};
  return b;
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::T: return "T";
    case Setting::S: return "S";
    case Setting::TS: return "T->S";
    case Setting::ST: return "S->T";
  }
  return "?";
}

Setting setting_from_name(const std::string& name) {
  if (name == "T") return Setting::T;
  if (name == "S") return Setting::S;
  if (name == "T->S" || name == "TS") return Setting::TS;
  if (name == "S->T" || name == "ST") return Setting::ST;
  throw ConfigError("unknown setting '" + name + "'");
}

std::vector<BenchmarkItem> make_benchmark(const StoryCorpus& corpus, u64 seed, i32 n_items) {
  if (n_items <= 0) throw ConfigError("make_benchmark: n_items must be positive");
  if (corpus.num_stories() < 2) throw ConfigError("make_benchmark: need at least two stories");
  Rng rng(fnv1a64("benchmark", seed));
  std::vector<BenchmarkItem> items;
  items.reserve(static_cast<size_t>(n_items));
  while (static_cast<i32>(items.size()) < n_items) {
    const i64 s1 = static_cast<i64>(rng.below(static_cast<u64>(corpus.num_stories())));
    const StoryTokens& st = corpus.story(s1);
    const i32 ctx_len = static_cast<i32>(rng.range(6, 10));
    const i32 cont_len = static_cast<i32>(rng.range(4, 6));
    if (st.words() < ctx_len + cont_len) continue;
    BenchmarkItem item;
    item.context_words.assign(st.word_ids.begin(), st.word_ids.begin() + ctx_len);
    item.correct_words.assign(st.word_ids.begin() + ctx_len, st.word_ids.begin() + ctx_len + cont_len);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const i64 s2 = static_cast<i64>(rng.below(static_cast<u64>(corpus.num_stories())));
      if (s2 == s1) continue;
      const StoryTokens& other = corpus.story(s2);
      if (other.words() < cont_len) continue;
      const i32 at = static_cast<i32>(rng.below(static_cast<u64>(other.words() - cont_len + 1)));
      item.distractor_words.assign(other.word_ids.begin() + at, other.word_ids.begin() + at + cont_len);
      if (item.distractor_words != item.correct_words) break;
      item.distractor_words.clear();
    }
    if (item.distractor_words.empty()) continue;
    items.push_back(std::move(item));
  }
  return items;
}

namespace {
constexpr const char* kBenchHeader = "STBM 1";

void write_ids(std::ostringstream& os, const std::vector<i32>& ids) {
  for (size_t i = 0; i < ids.size(); ++i) os << (i ? " " : "") << ids[i];
}

std::vector<i32> read_ids(const std::string& field) {
  std::istringstream is(field);
  std::vector<i32> ids;
  i32 v;
  while (is >> v) ids.push_back(v);
  return ids;
}
}  // namespace

std::string serialize_benchmark(const std::vector<BenchmarkItem>& items) {
  std::ostringstream os;
  os << kBenchHeader << "\n";
  for (const auto& it : items) {
    write_ids(os, it.context_words);
    os << "\t";
    write_ids(os, it.correct_words);
    os << "\t";
    write_ids(os, it.distractor_words);
    os << "\n";
  }
  return os.str();
}

std::vector<BenchmarkItem> parse_benchmark(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kBenchHeader)
    throw IoError("benchmark file: bad header (expected '" + std::string(kBenchHeader) + "')");
  std::vector<BenchmarkItem> items;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string ctx, cor, dis;
    if (!std::getline(ls, ctx, '\t') || !std::getline(ls, cor, '\t') || !std::getline(ls, dis))
      throw IoError("benchmark file: expected 3 tab-separated fields");
    items.push_back({read_ids(ctx), read_ids(cor), read_ids(dis)});
  }
  return items;
}

ScoringInstance instantiate(const BenchmarkItem& item, bool use_correct, Setting setting,
                            const Lexicon& lexicon, u64 phoneme_seed) {
  const std::vector<i32>& cont = use_correct ? item.correct_words : item.distractor_words;
  std::vector<std::string> words;
  words.reserve(item.context_words.size() + cont.size());
  for (i32 id : item.context_words) words.push_back(lexicon.word(id));
  for (i32 id : cont) words.push_back(lexicon.word(id));

  const i32 nc = static_cast<i32>(item.context_words.size());
  const i32 nt = static_cast<i32>(cont.size());
  SpanPlan plan;
  switch (setting) {
    case Setting::T: plan.spans = {{Modality::Text, nc + nt}}; break;
    case Setting::S: plan.spans = {{Modality::Speech, nc + nt}}; break;
    case Setting::TS: plan.spans = {{Modality::Text, nc}, {Modality::Speech, nt}}; break;
    case Setting::ST: plan.spans = {{Modality::Speech, nc}, {Modality::Text, nt}}; break;
  }
  ScoringInstance inst;
  inst.seq = encode_interleaved(words, plan, lexicon, phoneme_seed, 0.0);
  // First token emitted for the first continuation word (switch tokens are
  // context scaffold, not continuation).
  inst.cont_begin = inst.seq.source_words[static_cast<size_t>(nc)].begin;
  return inst;
}

}  // namespace smoltolk
