#include "mgfid/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mgfid/errors.hpp"
#include "mgfid/rng.hpp"
#include "json.hpp"

namespace mgfid {

namespace {

const char* kFrameWords[] = {"value-of", "is",    "is-not", "rumor", "says",
                             "maybe",    "source", ":",      "trust", ".",
                             "?",        "the",    "because", "of",    "note",
                             "legend",   "claims", "about",   "record", "mill"};

std::string numbered(const char* prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%02d", prefix, i);
  return buf;
}

}  // namespace

Tokenizer Tokenizer::synthetic(int num_entities, int num_values, int num_sources) {
  Tokenizer t;
  t.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const char* w : kFrameWords) t.words_.push_back(w);
  for (int i = 0; i < num_entities; ++i) t.words_.push_back(numbered("ent", i));
  for (int i = 0; i < num_values; ++i) t.words_.push_back(numbered("val", i));
  for (int i = 0; i < num_sources; ++i) t.words_.push_back(numbered("src", i));
  for (size_t i = 0; i < t.words_.size(); ++i) t.index_[t.words_[i]] = static_cast<int>(i);
  return t;
}

std::vector<int> Tokenizer::tokenize(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnkId : it->second);
  }
  return ids;
}

std::string Tokenizer::detokenize(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= size()) throw DataError("detokenize: id out of range");
    if (i) out += ' ';
    out += words_[ids[i]];
  }
  return out;
}

int Tokenizer::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? -1 : it->second;
}

void CorpusSpec::validate() const {
  if (num_questions <= 0 || k <= 0) throw DataError("corpus spec: need questions and k > 0");
  double total = frac_supportive + frac_distractor + frac_confuser + frac_irrelevant;
  if (frac_supportive < 0 || frac_distractor < 0 || frac_confuser < 0 || frac_irrelevant < 0 ||
      std::abs(total - 1.0) > 1e-9) {
    throw DataError("corpus spec: archetype fractions must be non-negative and sum to 1");
  }
  if (frac_supportive + frac_confuser <= 0) {
    throw DataError("corpus spec: need a positive supportive or confuser fraction");
  }
  if (num_entities < 2 || num_values < 2 || num_sources < 2) {
    throw DataError("corpus spec: vocabulary too small for requested distinct entities");
  }
}

namespace {

enum Archetype { kSupportive = 0, kDistractor = 1, kConfuser = 2, kIrrelevant = 3 };

struct Sentence {
  std::string text;
  int label = 0;
};

std::string sent_fact(const std::string& x, const std::string& y) {
  return "value-of " + x + " is " + y + " .";
}
std::string sent_rumor(const std::string& x, const std::string& w) {
  return "rumor says value-of " + x + " is " + w + " .";
}
std::string sent_maybe(const std::string& x, const std::string& w) {
  return "maybe value-of " + x + " is " + w + " .";
}
std::string sent_neg(const std::string& x, const std::string& w) {
  return "value-of " + x + " is-not " + w + " .";
}
std::string header(const std::string& src) { return "source : " + src + " ."; }

std::string join(const std::vector<Sentence>& sents) {
  std::string out;
  for (size_t i = 0; i < sents.size(); ++i) {
    if (i) out += ' ';
    out += sents[i].text;
  }
  return out;
}

QAExample make_question(const CorpusSpec& spec, Rng* rng, int q_index) {
  auto ent = [&](int i) { return numbered("ent", i); };
  auto val = [&](int i) { return numbered("val", i); };
  auto src = [&](int i) { return numbered("src", i); };
  int xi = static_cast<int>(rng->uniform_int(spec.num_entities));
  int yi = static_cast<int>(rng->uniform_int(spec.num_values));
  int ti = static_cast<int>(rng->uniform_int(spec.num_sources));
  std::string x = ent(xi), y = val(yi), trusted = src(ti);
  auto other_ent = [&] {
    int z = static_cast<int>(rng->uniform_int(spec.num_entities));
    while (z == xi) z = static_cast<int>(rng->uniform_int(spec.num_entities));
    return ent(z);
  };
  auto wrong_val = [&] {
    int v = static_cast<int>(rng->uniform_int(spec.num_values));
    while (v == yi) v = static_cast<int>(rng->uniform_int(spec.num_values));
    return val(v);
  };
  auto other_src = [&] {
    int s = static_cast<int>(rng->uniform_int(spec.num_sources));
    while (s == ti) s = static_cast<int>(rng->uniform_int(spec.num_sources));
    return src(s);
  };
  double fr[4] = {spec.frac_supportive, spec.frac_distractor, spec.frac_confuser,
                  spec.frac_irrelevant};
  std::vector<int> slots(spec.k);
  for (int i = 0; i < spec.k; ++i) {
    double u = rng->uniform();
    int a = 3;
    double acc = 0;
    for (int j = 0; j < 4; ++j) {
      acc += fr[j];
      if (u < acc) {
        a = j;
        break;
      }
    }
    slots[i] = a;
  }
  bool has_positive = std::any_of(slots.begin(), slots.end(),
                                  [](int a) { return a == kSupportive || a == kConfuser; });
  if (!has_positive) {
    // at least one supportive passage per question
    int i = static_cast<int>(rng->uniform_int(spec.k));
    double ps = spec.frac_supportive + spec.frac_confuser;
    slots[i] = rng->uniform() * ps < spec.frac_supportive ? kSupportive : kConfuser;
  }
  QAExample ex;
  ex.question = "value-of " + x + " ? trust " + trusted;
  ex.answers = {y};
  for (int i = 0; i < spec.k; ++i) {
    std::vector<Sentence> sents;
    Passage p;
    switch (slots[i]) {
      case kSupportive: {
        sents = {{header(trusted), 0}, {sent_fact(x, y), 1}, {sent_fact(other_ent(), wrong_val()), 0}};
        p.evidence_label = "supportive";
        p.has_answer_span = true;
        p.title = trusted;
        break;
      }
      case kConfuser: {
        std::string w = wrong_val();
        sents = {{header(trusted), 0},
                 {sent_fact(x, y), 1},
                 {sent_rumor(x, w), 0},
                 {sent_maybe(x, w), 0}};
        p.evidence_label = "supportive";
        p.has_answer_span = true;
        p.title = trusted;
        break;
      }
      case kDistractor: {
        std::string s = other_src();
        sents = {{header(s), 0}, {sent_fact(x, wrong_val()), 0}, {sent_neg(other_ent(), y), 0}};
        p.evidence_label = "unsupportive";
        p.has_answer_span = true;
        p.title = s;
        break;
      }
      default: {
        std::string s = rng->uniform() < 0.25 ? trusted : other_src();
        std::string v = wrong_val();
        sents = {{header(s), 0}, {sent_fact(other_ent(), v), 0}, {sent_fact(other_ent(), v), 0}};
        p.evidence_label = "unsupportive";
        p.has_answer_span = false;
        p.title = s;
        break;
      }
    }
    p.text = join(sents);
    p.retriever_rank = i + 1;
    p.id = "q" + std::to_string(q_index) + "-p" + std::to_string(i + 1);
    std::vector<int> labels;
    for (const Sentence& s : sents) labels.push_back(s.label);
    p.sentence_labels = labels;
    ex.passages.push_back(std::move(p));
  }
  return ex;
}

}  // namespace

Dataset generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng master(spec.seed);
  Dataset data;
  data.reserve(spec.num_questions);
  for (int q = 0; q < spec.num_questions; ++q) {
    Rng sub = master.fork(static_cast<uint64_t>(q));
    data.push_back(make_question(spec, &sub, q));
  }
  return data;
}

std::vector<std::pair<int, int>> split_sentences(const std::vector<std::string>& passage_tokens,
                                                 int question_len, int max_len) {
  std::vector<std::pair<int, int>> spans;
  int start = 0;
  int n = static_cast<int>(passage_tokens.size());
  auto emit = [&](int a, int b) {
    int pa = question_len + a;
    int pb = question_len + b;
    if (pb < max_len) spans.emplace_back(pa, pb);
  };
  for (int i = 0; i < n; ++i) {
    const std::string& w = passage_tokens[i];
    if (w == "." || w == "?" || w == "!") {
      emit(start, i);
      start = i + 1;
    }
  }
  if (start < n) emit(start, n - 1);  // no trailing terminator: one final span
  return spans;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  nlohmann::ordered_json root = nlohmann::ordered_json::array();
  for (const QAExample& ex : data) {
    nlohmann::ordered_json rec;
    rec["question"] = ex.question;
    rec["answers"] = ex.answers;
    nlohmann::ordered_json ctxs = nlohmann::ordered_json::array();
    for (const Passage& p : ex.passages) {
      nlohmann::ordered_json c;
      c["id"] = p.id;
      c["title"] = p.title;
      c["text"] = p.text;
      c["retriever_rank"] = p.retriever_rank;
      c["evidence_label"] = p.evidence_label;
      if (p.sentence_labels) c["sentence_labels"] = *p.sentence_labels;
      ctxs.push_back(std::move(c));
    }
    rec["ctxs"] = std::move(ctxs);
    root.push_back(std::move(rec));
  }
  std::ofstream out(path);
  if (!out) throw DataError("save_dataset: cannot write " + path.string());
  out << root.dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& path, int k) {
  std::ifstream in(path);
  if (!in) throw DataError("load_dataset: cannot read " + path.string());
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_dataset: " + path.string() + ": " + e.what());
  }
  if (!root.is_array()) throw DataError("load_dataset: top level must be a JSON array");
  Dataset data;
  for (size_t i = 0; i < root.size(); ++i) {
    const auto& rec = root[i];
    auto fail = [&](const std::string& why) {
      throw DataError("load_dataset: record " + std::to_string(i) + ": " + why);
    };
    try {
      if (!rec.contains("question") || !rec["question"].is_string()) fail("missing 'question'");
      if (!rec.contains("answers") || !rec["answers"].is_array() || rec["answers"].empty()) {
        fail("missing 'answers'");
      }
      if (!rec.contains("ctxs") || !rec["ctxs"].is_array()) fail("missing 'ctxs'");
      QAExample ex;
      ex.question = rec["question"].get<std::string>();
      for (const auto& a : rec["answers"]) ex.answers.push_back(a.get<std::string>());
      for (const auto& c : rec["ctxs"]) {
        Passage p;
        if (!c.contains("text") || !c["text"].is_string()) fail("ctx missing 'text'");
        p.text = c["text"].get<std::string>();
        p.id = c.value("id", "");
        p.title = c.value("title", "");
        p.retriever_rank = c.value("retriever_rank", static_cast<int>(ex.passages.size()) + 1);
        p.evidence_label = c.value("evidence_label", "unknown");
        if (p.evidence_label != "supportive" && p.evidence_label != "unsupportive" &&
            p.evidence_label != "unknown") {
          fail("bad evidence_label '" + p.evidence_label + "'");
        }
        if (c.contains("sentence_labels")) {
          p.sentence_labels = c["sentence_labels"].get<std::vector<int>>();
        }
        ex.passages.push_back(std::move(p));
      }
      std::stable_sort(ex.passages.begin(), ex.passages.end(),
                       [](const Passage& a, const Passage& b) {
                         return a.retriever_rank < b.retriever_rank;
                       });
      if (static_cast<int>(ex.passages.size()) < k) {
        fail("only " + std::to_string(ex.passages.size()) + " ctxs, need " + std::to_string(k));
      }
      ex.passages.resize(k);  // top-k in rank order
      data.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
  }
  return data;
}

PreparedExample prepare_example(const QAExample& ex, const Tokenizer& tok,
                                const ModelConfig& cfg) {
  if (ex.answers.empty()) throw DataError("prepare: example without answers");
  PreparedExample out;
  out.tokens.question = tok.tokenize(ex.question);
  if (out.tokens.question.empty()) throw DataError("prepare: empty question");
  int q_len = static_cast<int>(out.tokens.question.size());
  out.labeled = true;
  for (size_t i = 0; i < ex.passages.size(); ++i) {
    const Passage& p = ex.passages[i];
    PassageTokens pt;
    pt.ids = tok.tokenize(p.text);
    std::vector<std::string> words;
    {
      std::istringstream is(p.text);
      std::string w;
      while (is >> w) words.push_back(w);
    }
    auto spans = split_sentences(words, q_len, cfg.max_len);
    std::vector<int> labels;
    if (p.evidence_label == "unknown") {
      out.labeled = false;
    } else if (p.sentence_labels) {
      // labels align with the split order; spans beyond max_len were dropped
      for (size_t s = 0; s < spans.size() && s < p.sentence_labels->size(); ++s) {
        labels.push_back((*p.sentence_labels)[s]);
      }
    } else {
      labels.assign(spans.size(), 0);
    }
    if (!labels.empty() && labels.size() != spans.size()) {
      throw DataError("prepare: sentence label count does not match sentence count");
    }
    pt.spans = std::move(spans);
    out.tokens.passages.push_back(std::move(pt));
    out.sentence_labels.push_back(std::move(labels));
    if (p.evidence_label == "supportive") out.positives.push_back(static_cast<int>(i));
  }
  std::vector<int> ans = tok.tokenize(ex.answers[0]);
  if (ans.empty()) throw DataError("prepare: first answer does not tokenize");
  if (static_cast<int>(ans.size()) > cfg.max_target_len - 1) ans.resize(cfg.max_target_len - 1);
  out.target_ids = std::move(ans);
  out.target_ids.push_back(kEosId);
  return out;
}

std::vector<PreparedExample> prepare_dataset(const Dataset& data, const Tokenizer& tok,
                                             const ModelConfig& cfg) {
  std::vector<PreparedExample> out;
  out.reserve(data.size());
  for (const QAExample& ex : data) out.push_back(prepare_example(ex, tok, cfg));
  return out;
}

}  // namespace mgfid
