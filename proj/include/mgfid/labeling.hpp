#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mgfid/corpus.hpp"

namespace mgfid {

inline constexpr const char* kJudgeEndpointEnv = "MGFID_JUDGE_ENDPOINT";
inline constexpr const char* kJudgeTokenEnv = "MGFID_JUDGE_TOKEN";

struct LabelRequest {
  std::string question;
  std::vector<std::string> answers;
  std::string passage;
  int retriever_rank = 0;
};

enum class Verdict { kSupportive, kUnsupportive };

// Evidentiality judge. Implementations must be deterministic: the same
// prompt yields the same verdict (temperature-0 contract). nullopt signals a
// client failure; the pipeline records it and moves on.
class JudgmentClient {
 public:
  virtual ~JudgmentClient() = default;
  virtual std::optional<Verdict> judge(const std::string& prompt) = 0;
};

class RuleJudgmentClient : public JudgmentClient {
 public:
  using Fn = std::function<std::optional<Verdict>(const std::string&)>;
  explicit RuleJudgmentClient(Fn fn) : fn_(std::move(fn)) {}
  std::optional<Verdict> judge(const std::string& prompt) override { return fn_(prompt); }

 private:
  Fn fn_;
};

// POSTs the prompt as text/plain to {endpoint}/judge with an optional bearer
// token; expects a body whose first word is "supportive" or "unsupportive".
class HttpJudgmentClient : public JudgmentClient {
 public:
  explicit HttpJudgmentClient(std::string endpoint, std::string bearer_token = "");
  std::optional<Verdict> judge(const std::string& prompt) override;

 private:
  std::string endpoint_;
  std::string token_;
};

// Answers from ground-truth labels, keyed by the question and passage
// sections of prompts built with the default template. Stands in for the
// paper's LLM judges on the synthetic corpus.
class OracleJudgmentClient : public JudgmentClient {
 public:
  explicit OracleJudgmentClient(const Dataset& truth);
  std::optional<Verdict> judge(const std::string& prompt) override;

 private:
  std::map<std::pair<std::string, std::string>, Verdict> truth_;
};

// Thread-safe verdict cache keyed by (question, passage); persists as JSON.
class VerdictCache {
 public:
  std::optional<Verdict> get(const std::string& question, const std::string& passage) const;
  void put(const std::string& question, const std::string& passage, Verdict v);
  size_t size() const;
  void load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, Verdict> map_;
};

// True iff a normalized answer occurs as a token-boundary substring of the
// normalized passage. Ranges are inclusive word-index pairs over the
// original passage tokens.
struct SpanMatch {
  bool found = false;
  std::vector<std::pair<int, int>> token_ranges;
};

SpanMatch span_match(std::span<const std::string> answers, const std::string& passage_text);

extern const char* const kDefaultPromptTemplate;

// Fills {question}, {answers} and {passage} in the template. The template
// asks for sufficiency and ends with the binary-answer directive.
std::string build_prompt(const LabelRequest& req,
                         const std::string& template_text = kDefaultPromptTemplate);

struct LabelOptions {
  int max_answers = 10;  // answer candidates included in the prompt
  int concurrency = 1;   // simultaneous client calls
  std::string prompt_template = kDefaultPromptTemplate;
};

struct LabelStats {
  int client_calls = 0;
  int failures = 0;
  int skipped_no_span = 0;
  int cache_hits = 0;
};

// The labeling pipeline: passages without the answer span become
// unsupportive without a client call; the rest get the client's verdict
// (served from the cache when possible). Client failures leave the label
// "unknown". Also fills has_answer_span and derives sentence labels for
// passages whose label is known.
LabelStats label_passages(Dataset* data, JudgmentClient* client, VerdictCache* cache,
                          const LabelOptions& opts = {});

// Sentence labels from an evidence label plus answer-span positions:
// unsupportive passages are all-negative regardless of spans; supportive
// passages mark exactly the sentences that contain a match range. Ranges and
// spans must share a coordinate system.
std::vector<int> derive_sentence_labels(const std::string& evidence_label,
                                        std::span<const std::pair<int, int>> match_ranges,
                                        std::span<const std::pair<int, int>> sentence_spans);

struct RankFilterRow {
  int rank = 0;
  int span_bearing = 0;  // span-bearing passages at this rank with a known label
  int rejected = 0;      // of those, labeled unsupportive
  double fraction = 0;
};

// Fraction of span-bearing passages labeled unsupportive, per retriever
// rank. Ranks with no span-bearing passages are absent from the result.
std::vector<RankFilterRow> filtering_rate_by_rank(const Dataset& data);

void write_filter_report_csv(const std::filesystem::path& path,
                             std::span<const RankFilterRow> rows);

}  // namespace mgfid
