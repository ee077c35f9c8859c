#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mgfid/model.hpp"
#include "mgfid/tokens.hpp"

namespace mgfid {

// Closed word-level vocabulary. Out-of-vocabulary words map to UNK;
// detokenize(tokenize(t)) == t for in-vocabulary text.
class Tokenizer {
 public:
  static Tokenizer synthetic(int num_entities = 48, int num_values = 32, int num_sources = 16);

  int size() const { return static_cast<int>(words_.size()); }
  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int> ids) const;
  int id_of(const std::string& word) const;
  const std::string& word(int id) const { return words_[id]; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Passage {
  std::string id;
  std::string title;
  std::string text;
  int retriever_rank = 0;                  // 1..K
  std::string evidence_label = "unknown";  // supportive | unsupportive | unknown
  std::optional<std::vector<int>> sentence_labels;
  bool has_answer_span = false;  // derived field, not serialized
};

struct QAExample {
  std::string question;
  std::vector<std::string> answers;
  std::vector<Passage> passages;  // order = retriever rank
};

using Dataset = std::vector<QAExample>;

// Synthetic key-value QA world. Each question names an entity and the source
// to trust; passages carry source headers. A supportive passage states the
// fact from the trusted source; a span-bearing distractor cites an untrusted
// source, makes a bare wrong claim about the entity and mentions the answer
// in a wrong-subject negation; a confuser adds marked misleading claims next
// to the true fact; irrelevant passages talk about other entities.
struct CorpusSpec {
  int num_questions = 2000;
  int k = 4;
  double frac_supportive = 0.15;
  double frac_distractor = 0.35;
  double frac_confuser = 0.15;
  double frac_irrelevant = 0.35;
  int num_entities = 48;
  int num_values = 32;
  int num_sources = 16;
  uint64_t seed = 0;

  void validate() const;
};

Dataset generate_corpus(const CorpusSpec& spec);

// Rule-based sentence boundaries (split after sentence-final punctuation).
// Returns inclusive token spans in encoded-pair coordinates, i.e. offset by
// question_len; sentences not fully inside the first max_len tokens of the
// pair are dropped.
std::vector<std::pair<int, int>> split_sentences(const std::vector<std::string>& passage_tokens,
                                                 int question_len, int max_len);

void save_dataset(const std::filesystem::path& path, const Dataset& data);

// Parses the FiD-style JSON layout. ctxs lists longer than k are truncated
// to the top-k in rank order; shorter lists or malformed records raise
// DataError naming the record index.
Dataset load_dataset(const std::filesystem::path& path, int k);

// Everything the model needs for one question.
struct PreparedExample {
  QuestionTokens tokens;
  std::vector<std::vector<int>> sentence_labels;  // per passage, aligned with spans; empty if unknown
  std::vector<int> positives;                     // passage indices labeled supportive
  bool labeled = false;                           // no passage has an unknown label
  std::vector<int> target_ids;                    // first answer + EOS
};

PreparedExample prepare_example(const QAExample& ex, const Tokenizer& tok,
                                const ModelConfig& cfg);

std::vector<PreparedExample> prepare_dataset(const Dataset& data, const Tokenizer& tok,
                                             const ModelConfig& cfg);

}  // namespace mgfid
