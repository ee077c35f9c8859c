#include "mgfid/labeling.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

#include "mgfid/errors.hpp"
#include "mgfid/eval.hpp"
#include "httplib.h"
#include "json.hpp"

namespace mgfid {

const char* const kDefaultPromptTemplate =
    "Judge whether the passage alone is sufficient to answer the question.\n"
    "Question: {question}\n"
    "Answer candidates: {answers}\n"
    "Passage: {passage}\n"
    "Reply with exactly one word: supportive or unsupportive.";

namespace {

std::optional<Verdict> parse_verdict(const std::string& body) {
  std::istringstream is(body);
  std::string word;
  if (!(is >> word)) return std::nullopt;
  std::transform(word.begin(), word.end(), word.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (word == "supportive") return Verdict::kSupportive;
  if (word == "unsupportive") return Verdict::kUnsupportive;
  return std::nullopt;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

std::string extract_line_field(const std::string& prompt, const std::string& prefix) {
  std::istringstream is(prompt);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  return "";
}

}  // namespace

HttpJudgmentClient::HttpJudgmentClient(std::string endpoint, std::string bearer_token)
    : endpoint_(std::move(endpoint)), token_(std::move(bearer_token)) {}

std::optional<Verdict> HttpJudgmentClient::judge(const std::string& prompt) {
  httplib::Client cli(endpoint_);
  cli.set_connection_timeout(10, 0);
  cli.set_read_timeout(30, 0);
  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
  auto res = cli.Post("/judge", headers, prompt, "text/plain");
  if (!res || res->status != 200) return std::nullopt;
  return parse_verdict(res->body);
}

OracleJudgmentClient::OracleJudgmentClient(const Dataset& truth) {
  for (const QAExample& ex : truth) {
    for (const Passage& p : ex.passages) {
      if (p.evidence_label == "unknown") continue;
      Verdict v =
          p.evidence_label == "supportive" ? Verdict::kSupportive : Verdict::kUnsupportive;
      truth_[{ex.question, p.text}] = v;
    }
  }
}

std::optional<Verdict> OracleJudgmentClient::judge(const std::string& prompt) {
  std::string q = extract_line_field(prompt, "Question: ");
  std::string p = extract_line_field(prompt, "Passage: ");
  auto it = truth_.find({q, p});
  if (it == truth_.end()) return std::nullopt;
  return it->second;
}

std::optional<Verdict> VerdictCache::get(const std::string& question,
                                         const std::string& passage) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = map_.find({question, passage});
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

void VerdictCache::put(const std::string& question, const std::string& passage, Verdict v) {
  std::lock_guard<std::mutex> lock(mu_);
  map_[{question, passage}] = v;
}

size_t VerdictCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return map_.size();
}

void VerdictCache::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return;  // missing cache file: start empty
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("verdict cache: " + path.string() + ": " + e.what());
  }
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& rec : root) {
    Verdict v = rec.at("verdict").get<std::string>() == "supportive" ? Verdict::kSupportive
                                                                     : Verdict::kUnsupportive;
    map_[{rec.at("question").get<std::string>(), rec.at("passage").get<std::string>()}] = v;
  }
}

void VerdictCache::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json root = nlohmann::ordered_json::array();
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& [key, v] : map_) {
    nlohmann::ordered_json rec;
    rec["question"] = key.first;
    rec["passage"] = key.second;
    rec["verdict"] = v == Verdict::kSupportive ? "supportive" : "unsupportive";
    root.push_back(std::move(rec));
  }
  std::ofstream out(path);
  if (!out) throw DataError("verdict cache: cannot write " + path.string());
  out << root.dump(1) << "\n";
}

SpanMatch span_match(std::span<const std::string> answers, const std::string& passage_text) {
  SpanMatch result;
  std::vector<std::string> words = split_words(passage_text);
  std::vector<std::string> norm_words;
  std::vector<int> origin;  // normalized token index -> original token index
  for (size_t i = 0; i < words.size(); ++i) {
    std::string n = normalize(words[i]);
    if (n.empty()) continue;  // pure punctuation or an article
    std::istringstream is(n);
    std::string part;
    while (is >> part) {
      norm_words.push_back(part);
      origin.push_back(static_cast<int>(i));
    }
  }
  for (const std::string& answer : answers) {
    std::vector<std::string> target = split_words(normalize(answer));
    if (target.empty()) continue;
    for (size_t s = 0; s + target.size() <= norm_words.size(); ++s) {
      bool ok = true;
      for (size_t j = 0; j < target.size(); ++j) {
        if (norm_words[s + j] != target[j]) {
          ok = false;
          break;
        }
      }
      if (ok) {
        result.found = true;
        result.token_ranges.emplace_back(origin[s], origin[s + target.size() - 1]);
      }
    }
  }
  std::sort(result.token_ranges.begin(), result.token_ranges.end());
  result.token_ranges.erase(std::unique(result.token_ranges.begin(), result.token_ranges.end()),
                            result.token_ranges.end());
  return result;
}

std::string build_prompt(const LabelRequest& req, const std::string& template_text) {
  std::string answers;
  for (size_t i = 0; i < req.answers.size(); ++i) {
    if (i) answers += "; ";
    answers += req.answers[i];
  }
  std::string out = template_text;
  auto replace = [&out](const std::string& key, const std::string& value) {
    auto at = out.find(key);
    if (at == std::string::npos) {
      throw DataError("prompt template: missing placeholder " + key);
    }
    out.replace(at, key.size(), value);
  };
  replace("{question}", req.question);
  replace("{answers}", answers);
  replace("{passage}", req.passage);
  return out;
}

LabelStats label_passages(Dataset* data, JudgmentClient* client, VerdictCache* cache,
                          const LabelOptions& opts) {
  LabelStats stats;
  struct Job {
    std::string prompt;
    std::string question, passage;
  };
  std::vector<Job> jobs;
  std::map<std::pair<std::string, std::string>, int> job_index;
  // passage address -> job index (-1: resolved without a call)
  std::vector<std::vector<int>> pending(data->size());
  std::vector<std::vector<SpanMatch>> matches(data->size());
  for (size_t e = 0; e < data->size(); ++e) {
    QAExample& ex = (*data)[e];
    pending[e].assign(ex.passages.size(), -1);
    for (size_t pi = 0; pi < ex.passages.size(); ++pi) {
      Passage& p = ex.passages[pi];
      SpanMatch m = span_match(ex.answers, p.text);
      p.has_answer_span = m.found;
      matches[e].push_back(std::move(m));
      if (!p.has_answer_span) {
        p.evidence_label = "unsupportive";  // no span, no client call
        ++stats.skipped_no_span;
        continue;
      }
      if (cache) {
        if (auto v = cache->get(ex.question, p.text)) {
          p.evidence_label = *v == Verdict::kSupportive ? "supportive" : "unsupportive";
          ++stats.cache_hits;
          continue;
        }
      }
      auto key = std::make_pair(ex.question, p.text);
      auto it = job_index.find(key);
      if (it == job_index.end()) {
        LabelRequest req{ex.question, ex.answers, p.text, p.retriever_rank};
        if (static_cast<int>(req.answers.size()) > opts.max_answers) {
          req.answers.resize(opts.max_answers);
        }
        Job job{build_prompt(req, opts.prompt_template), ex.question, p.text};
        it = job_index.emplace(key, static_cast<int>(jobs.size())).first;
        jobs.push_back(std::move(job));
      }
      pending[e][pi] = it->second;
    }
  }
  // client calls, up to opts.concurrency at a time
  std::vector<std::optional<Verdict>> verdicts(jobs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    while (true) {
      size_t j = next.fetch_add(1);
      if (j >= jobs.size()) break;
      verdicts[j] = client->judge(jobs[j].prompt);
    }
  };
  int n_threads = std::max(1, opts.concurrency);
  if (n_threads == 1 || jobs.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  stats.client_calls = static_cast<int>(jobs.size());
  // merge in example order
  for (size_t e = 0; e < data->size(); ++e) {
    QAExample& ex = (*data)[e];
    for (size_t pi = 0; pi < ex.passages.size(); ++pi) {
      int j = pending[e][pi];
      if (j < 0) continue;
      Passage& p = ex.passages[pi];
      if (verdicts[j]) {
        p.evidence_label = *verdicts[j] == Verdict::kSupportive ? "supportive" : "unsupportive";
        if (cache) cache->put(ex.question, p.text, *verdicts[j]);
      } else {
        p.evidence_label = "unknown";
      }
    }
  }
  for (size_t j = 0; j < jobs.size(); ++j) {
    if (!verdicts[j]) ++stats.failures;
  }
  // sentence labels for every passage whose evidence label is now known
  for (size_t e = 0; e < data->size(); ++e) {
    QAExample& ex = (*data)[e];
    for (size_t pi = 0; pi < ex.passages.size(); ++pi) {
      Passage& p = ex.passages[pi];
      if (p.evidence_label == "unknown") {
        p.sentence_labels.reset();
        continue;
      }
      std::vector<std::string> words = split_words(p.text);
      auto spans = split_sentences(words, 0, std::numeric_limits<int>::max());
      p.sentence_labels =
          derive_sentence_labels(p.evidence_label, matches[e][pi].token_ranges, spans);
    }
  }
  return stats;
}

std::vector<int> derive_sentence_labels(const std::string& evidence_label,
                                        std::span<const std::pair<int, int>> match_ranges,
                                        std::span<const std::pair<int, int>> sentence_spans) {
  std::vector<int> labels(sentence_spans.size(), 0);
  if (evidence_label != "supportive") return labels;  // all negative regardless of spans
  for (size_t n = 0; n < sentence_spans.size(); ++n) {
    auto [a, b] = sentence_spans[n];
    for (auto [s, e] : match_ranges) {
      if (s >= a && e <= b) {
        labels[n] = 1;
        break;
      }
    }
  }
  return labels;
}

std::vector<RankFilterRow> filtering_rate_by_rank(const Dataset& data) {
  std::map<int, RankFilterRow> by_rank;
  for (const QAExample& ex : data) {
    for (const Passage& p : ex.passages) {
      if (p.evidence_label == "unknown") continue;
      if (!span_match(ex.answers, p.text).found) continue;
      RankFilterRow& row = by_rank[p.retriever_rank];
      row.rank = p.retriever_rank;
      ++row.span_bearing;
      if (p.evidence_label == "unsupportive") ++row.rejected;
    }
  }
  std::vector<RankFilterRow> rows;
  for (auto& [rank, row] : by_rank) {
    row.fraction = static_cast<double>(row.rejected) / static_cast<double>(row.span_bearing);
    rows.push_back(row);
  }
  return rows;
}

void write_filter_report_csv(const std::filesystem::path& path,
                             std::span<const RankFilterRow> rows) {
  std::ofstream out(path);
  if (!out) throw DataError("filter report: cannot write " + path.string());
  out << "rank,span_bearing_count,rejected_count,fraction\n";
  for (const RankFilterRow& r : rows) {
    out << r.rank << "," << r.span_bearing << "," << r.rejected << "," << r.fraction << "\n";
  }
}

}  // namespace mgfid
