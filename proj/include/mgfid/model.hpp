#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mgfid/adam.hpp"
#include "mgfid/errors.hpp"
#include "mgfid/rng.hpp"
#include "mgfid/tape.hpp"
#include "mgfid/tensor.hpp"
#include "mgfid/tokens.hpp"

namespace mgfid {

struct ModelConfig {
  int d_model = 64;
  int num_heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int ff_width = 128;
  int max_len = 32;       // L: tokens per question-passage pair
  int num_passages = 4;   // K: retrieved passages per question
  int vocab_size = 120;
  int max_target_len = 8;

  void validate() const {
    if (d_model <= 0 || num_heads <= 0 || d_model % num_heads != 0) {
      throw ShapeError("model config: d_model " + std::to_string(d_model) +
                       " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (max_len < 2) throw ShapeError("model config: max_len must be >= 2");
    if (enc_layers <= 0 || dec_layers <= 0 || ff_width <= 0 || num_passages <= 0 ||
        max_target_len <= 0) {
      throw ShapeError("model config: layer counts and widths must be positive");
    }
    if (vocab_size <= kNumSpecialTokens) {
      throw ShapeError("model config: vocab_size must exceed the reserved tokens");
    }
  }

  std::string to_kv_text() const {
    std::ostringstream os;
    os << "d_model=" << d_model << "\n"
       << "num_heads=" << num_heads << "\n"
       << "enc_layers=" << enc_layers << "\n"
       << "dec_layers=" << dec_layers << "\n"
       << "ff_width=" << ff_width << "\n"
       << "max_len=" << max_len << "\n"
       << "num_passages=" << num_passages << "\n"
       << "vocab_size=" << vocab_size << "\n"
       << "max_target_len=" << max_target_len << "\n";
    return os.str();
  }

  static ModelConfig from_kv_text(const std::string& text) {
    ModelConfig cfg;
    std::map<std::string, int*> fields{
        {"d_model", &cfg.d_model},           {"num_heads", &cfg.num_heads},
        {"enc_layers", &cfg.enc_layers},     {"dec_layers", &cfg.dec_layers},
        {"ff_width", &cfg.ff_width},         {"max_len", &cfg.max_len},
        {"num_passages", &cfg.num_passages}, {"vocab_size", &cfg.vocab_size},
        {"max_target_len", &cfg.max_target_len}};
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("model config: bad header line '" + line + "'");
      auto it = fields.find(line.substr(0, eq));
      if (it == fields.end()) {
        throw DataError("model config: unknown key '" + line.substr(0, eq) + "'");
      }
      *it->second = std::stoi(line.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Tokenized inputs for one question. Sentence spans are inclusive [a, b]
// token index ranges inside the encoded pair (question prepended).
struct PassageTokens {
  std::vector<int> ids;
  std::vector<std::pair<int, int>> spans;
};

struct QuestionTokens {
  std::vector<int> question;
  std::vector<PassageTokens> passages;
};

template <typename T>
struct EncoderOut {
  Var h;          // [L x d]
  int valid_len;  // non-padding tokens
};

template <typename T>
struct ConcatMatrix {
  Var v;                        // [(blocks * L) x d]
  int block_len = 0;            // L
  std::vector<int> block_ids;   // original passage index per block
  std::vector<int> valid_lens;  // per block

  int blocks() const { return static_cast<int>(block_ids.size()); }

  std::vector<uint8_t> kv_valid() const {
    std::vector<uint8_t> mask(static_cast<size_t>(blocks()) * block_len, 0);
    for (int b = 0; b < blocks(); ++b) {
      std::fill_n(mask.begin() + static_cast<size_t>(b) * block_len, valid_lens[b], uint8_t(1));
    }
    return mask;
  }
};

template <typename T>
struct PassageScores {
  Var evidence;  // [K x d]
  Var logits;    // [K x 1]
  Var probs;     // [1 x K]
  std::vector<double> prob_values;
};

template <typename T>
struct SentenceBatch {
  int passage_index = -1;
  int count = 0;
  std::vector<std::pair<int, int>> spans;
  Var embeds;                    // [N x d], invalid when count == 0
  Var logits;                    // [N x 2]
  std::vector<int> predictions;  // 1 iff logit[1] > logit[0]
};

template <typename T>
struct Anchor {
  Var vec;            // [1 x d]
  bool empty = true;  // true -> vec is the zero vector
};

template <typename T>
struct DecodeResult {
  Var logits;                        // [T x vocab]
  std::vector<Var> cross_attention;  // one attention node per decoder layer
};

struct GenerateOptions {
  double tau = 0.0;  // threshold pruning; 0 keeps everything
  int top_n = 0;     // > 0: keep the n highest-probability passages instead
  bool use_anchor = true;
};

struct GenerateResult {
  std::vector<int> output_ids;               // generated answer, no BOS/EOS
  std::vector<double> attention_by_passage;  // summed cross-attention per original passage
  std::vector<double> passage_probs;         // re-ranker p_i
  std::vector<int> kept;                     // passage indices passed to the decoder
  std::vector<std::vector<int>> sentence_predictions;  // per passage, per sentence
  std::vector<std::vector<double>> sentence_scores;    // per passage, P(sentence is positive)
};

// ---- pruning (keep block i iff p_i > tau; argmax fallback) ----

inline std::vector<int> prune_by_threshold(std::span<const double> probs, double tau) {
  if (tau < 0.0 || tau > 1.0) {
    throw ShapeError("prune: tau " + std::to_string(tau) + " outside [0, 1]");
  }
  if (probs.empty()) throw ShapeError("prune: empty probability list");
  std::vector<int> kept;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > tau) kept.push_back(static_cast<int>(i));
  }
  if (kept.empty()) {
    int best = 0;
    for (size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[best]) best = static_cast<int>(i);
    }
    kept.push_back(best);
  }
  return kept;
}

inline std::vector<int> prune_top_n(std::span<const double> probs, int n) {
  if (n <= 0) throw ShapeError("prune_top_n: n must be positive");
  if (probs.empty()) throw ShapeError("prune: empty probability list");
  std::vector<int> order(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  order.resize(std::min(static_cast<size_t>(n), order.size()));
  std::sort(order.begin(), order.end());  // original passage order
  return order;
}

// The FiD encoder-decoder plus the MGFiD heads: shared projection W_p,
// passage scorer W_r, sentence classifier W_s.
template <typename T>
class MgfidModel {
 public:
  MgfidModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    build_params(&rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // ---- encoding ----

  // One fused pass over the K pairs of a question; attention stays inside
  // each pair via segments, so block i of the result equals the standalone
  // encoding of pair i.
  std::vector<EncoderOut<T>> encode_question(Tape<T>& tape, std::span<const int> question,
                                             std::span<const std::vector<int>> passages) const {
    if (question.empty()) throw ShapeError("encode: empty question");
    if (passages.empty()) throw ShapeError("encode: no passages");
    auto p = binder(tape);
    const int L = cfg_.max_len;
    const int k = static_cast<int>(passages.size());
    std::vector<int> ids(static_cast<size_t>(k) * L, kPadId);
    std::vector<int> pos(static_cast<size_t>(k) * L);
    std::vector<uint8_t> valid(static_cast<size_t>(k) * L, 0);
    std::vector<int> valid_lens(k);
    std::vector<AttnSegment> segs(k);
    for (int i = 0; i < k; ++i) {
      std::vector<int> pair;
      pair.reserve(L);
      for (int t : question) pair.push_back(t);
      for (int t : passages[i]) pair.push_back(t);
      if (static_cast<int>(pair.size()) > L) pair.resize(L);
      check_ids(pair);
      valid_lens[i] = static_cast<int>(pair.size());
      for (int r = 0; r < L; ++r) {
        pos[static_cast<size_t>(i) * L + r] = r;
        if (r < valid_lens[i]) {
          ids[static_cast<size_t>(i) * L + r] = pair[r];
          valid[static_cast<size_t>(i) * L + r] = 1;
        }
      }
      segs[i] = {i * L, L, i * L, L};
    }
    Var x = tape.add(tape.embed(ids, p(kTokEmb)), tape.embed(pos, p(kEncPos)));
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string base = "enc." + std::to_string(l) + ".";
      Var h = tape.layer_norm(x, p(base + "ln1.gain"), p(base + "ln1.bias"));
      AttentionSpec spec;
      spec.num_heads = cfg_.num_heads;
      spec.segments = segs;
      spec.kv_valid = valid;
      Var a = tape.attention(tape.matmul(h, p(base + "attn.wq")),
                             tape.matmul(h, p(base + "attn.wk")),
                             tape.matmul(h, p(base + "attn.wv")), spec);
      x = tape.add(x, tape.matmul(a, p(base + "attn.wo")));
      h = tape.layer_norm(x, p(base + "ln2.gain"), p(base + "ln2.bias"));
      Var f = tape.matmul(tape.relu(tape.matmul(h, p(base + "ffn.w1"))), p(base + "ffn.w2"));
      x = tape.add(x, f);
    }
    x = tape.layer_norm(x, p("enc.final_ln.gain"), p("enc.final_ln.bias"));
    std::vector<EncoderOut<T>> outs;
    outs.reserve(k);
    for (int i = 0; i < k; ++i) {
      outs.push_back({tape.slice_rows(x, i * L, (i + 1) * L - 1), valid_lens[i]});
    }
    return outs;
  }

  EncoderOut<T> encode_pair(Tape<T>& tape, std::span<const int> question,
                            std::span<const int> passage) const {
    std::vector<std::vector<int>> one{std::vector<int>(passage.begin(), passage.end())};
    return encode_question(tape, question, one)[0];
  }

  // V = [H_1; ...; H_K].
  ConcatMatrix<T> concat_encodings(Tape<T>& tape, std::span<const EncoderOut<T>> outs) const {
    if (outs.empty()) throw ShapeError("concat_encodings: no encoder outputs");
    std::vector<Var> parts;
    parts.reserve(outs.size());
    ConcatMatrix<T> cm;
    cm.block_len = cfg_.max_len;
    for (const auto& o : outs) {
      const auto& shape = tape.value(o.h).shape();
      if (shape != std::vector<int>{cfg_.max_len, cfg_.d_model}) {
        throw ShapeError("concat_encodings: block shape " + tape.value(o.h).shape_str() +
                         " does not match [" + std::to_string(cfg_.max_len) + " x " +
                         std::to_string(cfg_.d_model) + "]");
      }
      parts.push_back(o.h);
      cm.block_ids.push_back(static_cast<int>(cm.block_ids.size()));
      cm.valid_lens.push_back(o.valid_len);
    }
    cm.v = parts.size() == 1 ? parts[0] : tape.concat_rows(std::span<const Var>(parts));
    return cm;
  }

  // Keeps the listed blocks of V, preserving order.
  ConcatMatrix<T> select_blocks(Tape<T>& tape, const ConcatMatrix<T>& cm,
                                std::span<const int> kept) const {
    if (kept.empty()) throw ShapeError("select_blocks: must keep at least one block");
    ConcatMatrix<T> out;
    out.block_len = cm.block_len;
    std::vector<Var> parts;
    for (int i : kept) {
      if (i < 0 || i >= cm.blocks()) throw ShapeError("select_blocks: block index out of range");
      parts.push_back(tape.slice_rows(cm.v, i * cm.block_len, (i + 1) * cm.block_len - 1));
      out.block_ids.push_back(cm.block_ids[i]);
      out.valid_lens.push_back(cm.valid_lens[i]);
    }
    out.v = parts.size() == 1 ? parts[0] : tape.concat_rows(std::span<const Var>(parts));
    return out;
  }

  // ---- MGFiD heads ----

  // e_i = h_i^0 W_p; logit_i = e_i W_r^T; p = softmax over the K logits.
  PassageScores<T> passage_probabilities(Tape<T>& tape,
                                         std::span<const EncoderOut<T>> outs) const {
    if (outs.empty()) throw ShapeError("passage_probabilities: no encoder outputs");
    auto p = binder(tape);
    std::vector<Var> firsts;
    firsts.reserve(outs.size());
    for (const auto& o : outs) firsts.push_back(tape.slice_rows(o.h, 0, 0));
    Var h0 = firsts.size() == 1 ? firsts[0] : tape.concat_rows(std::span<const Var>(firsts));
    PassageScores<T> s;
    s.evidence = tape.matmul(h0, p("heads.w_p"));
    s.logits = tape.matmul(s.evidence, tape.transpose(p("heads.w_r")));
    s.probs = tape.softmax_rows(tape.transpose(s.logits));
    const Tensor<T>& pv = tape.value(s.probs);
    s.prob_values.assign(pv.vec().begin(), pv.vec().end());
    return s;
  }

  // s_i^n = mean of span token embeddings projected by W_p; logits = s W_s.
  SentenceBatch<T> sentence_logits(Tape<T>& tape, const EncoderOut<T>& out,
                                   std::span<const std::pair<int, int>> spans,
                                   int passage_index = -1) const {
    auto p = binder(tape);
    SentenceBatch<T> batch;
    batch.passage_index = passage_index;
    batch.count = static_cast<int>(spans.size());
    batch.spans.assign(spans.begin(), spans.end());
    if (spans.empty()) return batch;
    std::vector<Var> means;
    means.reserve(spans.size());
    for (auto [a, b] : spans) {
      if (a > b || a < 0 || b >= out.valid_len) {
        throw ShapeError("sentence_logits: span [" + std::to_string(a) + ", " + std::to_string(b) +
                         "] outside valid length " + std::to_string(out.valid_len));
      }
      means.push_back(tape.mean_rows(out.h, a, b));
    }
    Var m = means.size() == 1 ? means[0] : tape.concat_rows(std::span<const Var>(means));
    batch.embeds = tape.matmul(m, p("heads.w_p"));
    batch.logits = tape.matmul(batch.embeds, p("heads.w_s"));
    const Tensor<T>& lv = tape.value(batch.logits);
    batch.predictions.resize(batch.count);
    for (int n = 0; n < batch.count; ++n) {
      batch.predictions[n] = lv(n, 1) > lv(n, 0) ? 1 : 0;  // tie -> negative
    }
    return batch;
  }

  // Max-pool over positively predicted sentence embeddings; the empty set
  // yields the zero vector with the empty flag set.
  Anchor<T> build_anchor(Tape<T>& tape, std::span<const SentenceBatch<T>> batches) const {
    std::vector<Var> members;
    for (const auto& b : batches) {
      for (int n = 0; n < b.count; ++n) {
        if (b.predictions[n] == 1) members.push_back(tape.slice_rows(b.embeds, n, n));
      }
    }
    Anchor<T> a;
    if (members.empty()) {
      a.vec = tape.input(Tensor<T>::zeros({1, cfg_.d_model}));
      a.empty = true;
    } else {
      a.vec = members.size() == 1 ? members[0] : tape.max_elem(std::span<const Var>(members));
      a.empty = false;
    }
    return a;
  }

  // ---- decoding ----

  struct DecoderKV {
    ConcatMatrix<T> kv;
    std::vector<Var> k, v;  // per decoder layer
    std::vector<uint8_t> valid;
  };

  DecoderKV project_kv(Tape<T>& tape, const ConcatMatrix<T>& kv) const {
    auto p = binder(tape);
    DecoderKV d;
    d.kv = kv;
    d.valid = kv.kv_valid();
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string base = "dec." + std::to_string(l) + ".";
      d.k.push_back(tape.matmul(kv.v, p(base + "cross.wk")));
      d.v.push_back(tape.matmul(kv.v, p(base + "cross.wv")));
    }
    return d;
  }

  // Teacher-forced decoder pass over `prefix` (must start with BOS). A
  // non-empty anchor is added to the decoder input embedding at position 0.
  DecodeResult<T> decode_with(Tape<T>& tape, const DecoderKV& dkv, const Anchor<T>& anchor,
                              std::span<const int> prefix) const {
    if (prefix.empty()) throw ShapeError("decode: empty prefix");
    if (prefix[0] != kBosId) throw ShapeError("decode: prefix must start with BOS");
    if (static_cast<int>(prefix.size()) > cfg_.max_target_len) {
      throw ShapeError("decode: prefix length " + std::to_string(prefix.size()) + " exceeds " +
                       std::to_string(cfg_.max_target_len));
    }
    auto p = binder(tape);
    std::vector<int> ids(prefix.begin(), prefix.end());
    check_ids(ids);
    int t_len = static_cast<int>(ids.size());
    std::vector<int> pos(t_len);
    for (int i = 0; i < t_len; ++i) pos[i] = i;
    Var x = tape.add(tape.embed(ids, p(kTokEmb)), tape.embed(pos, p(kDecPos)));
    if (!anchor.empty) x = tape.add_row(x, 0, anchor.vec);
    DecodeResult<T> res;
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string base = "dec." + std::to_string(l) + ".";
      Var h = tape.layer_norm(x, p(base + "ln1.gain"), p(base + "ln1.bias"));
      AttentionSpec self_spec;
      self_spec.num_heads = cfg_.num_heads;
      self_spec.causal = true;
      Var a = tape.attention(tape.matmul(h, p(base + "self.wq")),
                             tape.matmul(h, p(base + "self.wk")),
                             tape.matmul(h, p(base + "self.wv")), self_spec);
      x = tape.add(x, tape.matmul(a, p(base + "self.wo")));
      h = tape.layer_norm(x, p(base + "ln2.gain"), p(base + "ln2.bias"));
      AttentionSpec cross_spec;
      cross_spec.num_heads = cfg_.num_heads;
      cross_spec.kv_valid = dkv.valid;
      Var c = tape.attention(tape.matmul(h, p(base + "cross.wq")), dkv.k[l], dkv.v[l], cross_spec);
      res.cross_attention.push_back(c);
      x = tape.add(x, tape.matmul(c, p(base + "cross.wo")));
      h = tape.layer_norm(x, p(base + "ln3.gain"), p(base + "ln3.bias"));
      Var f = tape.matmul(tape.relu(tape.matmul(h, p(base + "ffn.w1"))), p(base + "ffn.w2"));
      x = tape.add(x, f);
    }
    x = tape.layer_norm(x, p("dec.final_ln.gain"), p("dec.final_ln.bias"));
    res.logits = tape.matmul(x, p(kLmHead));
    return res;
  }

  DecodeResult<T> decode(Tape<T>& tape, const ConcatMatrix<T>& kv, const Anchor<T>& anchor,
                         std::span<const int> prefix) const {
    return decode_with(tape, project_kv(tape, kv), anchor, prefix);
  }

  // Greedy generation with optional threshold/top-n pruning and anchor
  // injection. Also reports the per-passage sum of cross-attention weights
  // over decoder layers, heads and steps.
  GenerateResult generate(const QuestionTokens& q, const GenerateOptions& opts) const {
    Tape<T> tape;
    std::vector<std::vector<int>> pids;
    pids.reserve(q.passages.size());
    for (const auto& pt : q.passages) pids.push_back(pt.ids);
    auto outs = encode_question(tape, q.question, pids);
    auto scores = passage_probabilities(tape, outs);
    GenerateResult res;
    res.passage_probs = scores.prob_values;
    std::vector<SentenceBatch<T>> batches;
    for (size_t i = 0; i < q.passages.size(); ++i) {
      batches.push_back(sentence_logits(tape, outs[i], q.passages[i].spans, static_cast<int>(i)));
      const SentenceBatch<T>& b = batches.back();
      res.sentence_predictions.push_back(b.predictions);
      std::vector<double> probs;
      if (b.count > 0) {
        const Tensor<T>& lv = tape.value(b.logits);
        for (int n = 0; n < b.count; ++n) {
          double a = lv(n, 0), c = lv(n, 1);
          double m = std::max(a, c);
          double ea = std::exp(a - m), ec = std::exp(c - m);
          probs.push_back(ec / (ea + ec));
        }
      }
      res.sentence_scores.push_back(std::move(probs));
    }
    Anchor<T> anchor;
    if (opts.use_anchor) {
      anchor = build_anchor(tape, batches);
    } else {
      anchor.vec = tape.input(Tensor<T>::zeros({1, cfg_.d_model}));
      anchor.empty = true;
    }
    ConcatMatrix<T> full = concat_encodings(tape, outs);
    res.kept = opts.top_n > 0 ? prune_top_n(scores.prob_values, opts.top_n)
                              : prune_by_threshold(scores.prob_values, opts.tau);
    ConcatMatrix<T> kv = static_cast<int>(res.kept.size()) == full.blocks()
                             ? full
                             : select_blocks(tape, full, res.kept);
    DecoderKV dkv = project_kv(tape, kv);
    std::vector<int> prefix{kBosId};
    DecodeResult<T> last;
    while (true) {
      last = decode_with(tape, dkv, anchor, prefix);
      const Tensor<T>& lv = tape.value(last.logits);
      int row = lv.rows() - 1;
      int best = 0;
      for (int c = 1; c < lv.cols(); ++c) {
        if (lv(row, c) > lv(row, best)) best = c;
      }
      prefix.push_back(best);
      if (best == kEosId || static_cast<int>(prefix.size()) >= cfg_.max_target_len) break;
    }
    res.output_ids.assign(prefix.begin() + 1, prefix.end());
    if (!res.output_ids.empty() && res.output_ids.back() == kEosId) res.output_ids.pop_back();
    // Cross-attention totals from the final pass: with causal self-attention,
    // row t of that pass equals the query that produced output token t.
    res.attention_by_passage.assign(q.passages.size(), 0.0);
    for (Var attn : last.cross_attention) {
      for (const Tensor<T>& probs : tape.attention_probs(attn)) {
        for (int r = 0; r < probs.rows(); ++r) {
          for (int j = 0; j < static_cast<int>(res.kept.size()); ++j) {
            double s = 0;
            for (int c = j * kv.block_len; c < (j + 1) * kv.block_len; ++c) s += probs(r, c);
            res.attention_by_passage[res.kept[j]] += s;
          }
        }
      }
    }
    return res;
  }

  // ---- checkpointing ----

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write " + path.string());
    out.write(kMagic, 8);
    std::string header = cfg_.to_kv_text();
    write_u32(out, static_cast<uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_u32(out, static_cast<uint32_t>(params_.size()));
    for (int i = 0; i < params_.size(); ++i) {
      const std::string& name = params_.name(i);
      const Tensor<T>& t = params_.value(i);
      write_u16(out, static_cast<uint16_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      out.put(static_cast<char>(t.rank()));
      for (int d : t.shape()) write_u32(out, static_cast<uint32_t>(d));
      for (int64_t j = 0; j < t.numel(); ++j) write_f32(out, static_cast<float>(t[j]));
    }
    if (!out) throw DataError("checkpoint: write failed for " + path.string());
  }

  static MgfidModel load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot read " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
      throw DataError("checkpoint: bad magic in " + path.string());
    }
    uint32_t header_len = read_u32(in);
    std::string header(header_len, '\0');
    in.read(header.data(), header_len);
    if (!in) throw DataError("checkpoint: truncated header in " + path.string());
    ModelConfig cfg = ModelConfig::from_kv_text(header);
    MgfidModel model(cfg, 0);  // declared parameter order; values overwritten below
    uint32_t count = read_u32(in);
    if (count != static_cast<uint32_t>(model.params_.size())) {
      throw DataError("checkpoint: parameter count " + std::to_string(count) + " vs expected " +
                      std::to_string(model.params_.size()));
    }
    for (int i = 0; i < model.params_.size(); ++i) {
      uint16_t name_len = read_u16(in);
      std::string name(name_len, '\0');
      in.read(name.data(), name_len);
      if (name != model.params_.name(i)) {
        throw DataError("checkpoint: parameter " + std::to_string(i) + " is '" + name +
                        "', expected '" + model.params_.name(i) + "'");
      }
      int rank = in.get();
      std::vector<int> shape(rank);
      for (int r = 0; r < rank; ++r) shape[r] = static_cast<int>(read_u32(in));
      Tensor<T>& t = model.params_.value(i);
      if (shape != t.shape()) {
        throw DataError("checkpoint: shape mismatch for " + name + ": file " +
                        Tensor<T>::shape_string(shape) + " vs expected " + t.shape_str());
      }
      for (int64_t j = 0; j < t.numel(); ++j) t[j] = static_cast<T>(read_f32(in));
      if (!in) throw DataError("checkpoint: truncated data for " + name);
    }
    return model;
  }

 private:
  static constexpr char kMagic[9] = "MGFIDCK1";
  static constexpr const char* kTokEmb = "tok_emb";
  static constexpr const char* kEncPos = "enc_pos";
  static constexpr const char* kDecPos = "dec_pos";
  static constexpr const char* kLmHead = "lm_head";

  // Per-call parameter binder: looks a parameter up by name and registers it
  // on the given tape. Keeps the model itself immutable and shareable.
  auto binder(Tape<T>& tape) const {
    return [this, &tape](const std::string& name) -> Var {
      int idx = params_.index_of(name);
      if (idx < 0) throw ShapeError("model: unknown parameter " + name);
      return tape.param(&params_.value(idx), idx);
    };
  }

  void check_ids(const std::vector<int>& ids) const {
    for (int id : ids) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw ShapeError("token id " + std::to_string(id) + " outside vocab of " +
                         std::to_string(cfg_.vocab_size));
      }
    }
  }

  Tensor<T> init_embedding(Rng* rng, int rows, int cols) const {
    Tensor<T> t({rows, cols});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng->normal() * 0.02);
    return t;
  }

  Tensor<T> init_projection(Rng* rng, int rows, int cols, int fan_in = 0) const {
    if (fan_in == 0) fan_in = rows;
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> t({rows, cols});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng->uniform(-bound, bound));
    return t;
  }

  void add_layer_norm(const std::string& base) {
    params_.add(base + ".gain", Tensor<T>::full({1, cfg_.d_model}, T(1)));
    params_.add(base + ".bias", Tensor<T>::zeros({1, cfg_.d_model}));
  }

  void add_attention(Rng* rng, const std::string& base) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      params_.add(base + "." + std::string(w), init_projection(rng, cfg_.d_model, cfg_.d_model));
    }
  }

  void build_params(Rng* rng) {
    params_.add(kTokEmb, init_embedding(rng, cfg_.vocab_size, cfg_.d_model));
    params_.add(kEncPos, init_embedding(rng, cfg_.max_len, cfg_.d_model));
    params_.add(kDecPos, init_embedding(rng, cfg_.max_target_len, cfg_.d_model));
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string base = "enc." + std::to_string(l);
      add_attention(rng, base + ".attn");
      add_layer_norm(base + ".ln1");
      params_.add(base + ".ffn.w1", init_projection(rng, cfg_.d_model, cfg_.ff_width));
      params_.add(base + ".ffn.w2", init_projection(rng, cfg_.ff_width, cfg_.d_model));
      add_layer_norm(base + ".ln2");
    }
    add_layer_norm("enc.final_ln");
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const std::string base = "dec." + std::to_string(l);
      add_attention(rng, base + ".self");
      add_layer_norm(base + ".ln1");
      add_attention(rng, base + ".cross");
      add_layer_norm(base + ".ln2");
      params_.add(base + ".ffn.w1", init_projection(rng, cfg_.d_model, cfg_.ff_width));
      params_.add(base + ".ffn.w2", init_projection(rng, cfg_.ff_width, cfg_.d_model));
      add_layer_norm(base + ".ln3");
    }
    add_layer_norm("dec.final_ln");
    params_.add(kLmHead, init_projection(rng, cfg_.d_model, cfg_.vocab_size));
    params_.add("heads.w_p", init_projection(rng, cfg_.d_model, cfg_.d_model));
    params_.add("heads.w_r", init_projection(rng, 1, cfg_.d_model, cfg_.d_model));
    params_.add("heads.w_s", init_projection(rng, cfg_.d_model, 2));
  }

  // ---- little-endian scalar io ----

  static void write_u16(std::ostream& out, uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    out.write(b, 2);
  }
  static void write_u32(std::ostream& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  }
  static void write_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
  }
  static uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }
  static uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  static float read_f32(std::istream& in) {
    uint32_t bits = read_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace mgfid
