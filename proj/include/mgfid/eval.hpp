#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgfid/corpus.hpp"
#include "mgfid/model.hpp"

namespace mgfid {

// SQuAD-style answer normalization: lowercase, strip punctuation, drop the
// articles a/an/the, collapse whitespace.
std::string normalize(const std::string& text);

// 1 iff normalize(prediction) equals normalize(a) for some answer a.
int exact_match(const std::string& prediction, std::span<const std::string> answers);

// 1 iff any of the top-k entries of `positive_flags` is positive.
int recall_at_k(std::span<const int> positive_flags, int k);

// Pairwise (Mann-Whitney) ROC-AUC with ties counted as 1/2. Throws
// SingleClassError when only one class is present.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

struct MetricValues {
  double em = 0;
  std::optional<double> r1_reranker;
  std::optional<double> r2_reranker;
  std::optional<double> r1_attention;
  std::optional<double> r2_attention;
  std::optional<double> sentence_auc;
  double avg_passages = 0;
  int count = 0;
};

struct MetricStat {
  double mean = 0;
  double stddev = 0;
  std::vector<double> per_seed;
};

using MetricReport = std::map<std::string, MetricStat>;

MetricReport aggregate_metrics(std::span<const MetricValues> runs);
std::string metric_report_to_json(const MetricReport& report);
void write_metric_report(const std::filesystem::path& path, const MetricReport& report);

struct EvalOptions {
  double tau = 0.0;
  int top_n = 0;
  bool use_anchor = true;
};

namespace detail {

inline std::vector<int> ranking_flags(std::span<const double> scores,
                                      std::span<const int> positives, int k) {
  std::vector<int> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> flags;
  flags.reserve(k);
  for (int i = 0; i < k; ++i) {
    bool pos = std::find(positives.begin(), positives.end(), order[i]) != positives.end();
    flags.push_back(pos ? 1 : 0);
  }
  return flags;
}

}  // namespace detail

// Runs the model over a dataset: EM of greedy answers under the requested
// pruning, R@K of the re-ranker head and of the summed cross-attention
// ordering (both from an unpruned pass), sentence AUC, and the average
// number of passages reaching the decoder. Ranking metrics are absent when
// the dataset carries no evidence labels.
template <typename T>
MetricValues evaluate(const MgfidModel<T>& model, const Dataset& data, const Tokenizer& tok,
                      const EvalOptions& opts) {
  MetricValues m;
  const int k = model.config().num_passages;
  bool pruned = opts.tau > 0.0 || opts.top_n > 0;
  double em_sum = 0, kept_sum = 0;
  double r1r = 0, r2r = 0, r1a = 0, r2a = 0;
  int ranked = 0;
  std::vector<double> auc_scores;
  std::vector<int> auc_labels;
  for (const QAExample& ex : data) {
    PreparedExample prep = prepare_example(ex, tok, model.config());
    GenerateOptions gen_opts{opts.tau, opts.top_n, opts.use_anchor};
    GenerateResult res = model.generate(prep.tokens, gen_opts);
    em_sum += exact_match(tok.detokenize(res.output_ids), ex.answers);
    kept_sum += static_cast<double>(res.kept.size());
    GenerateResult full =
        pruned ? model.generate(prep.tokens, GenerateOptions{0.0, 0, opts.use_anchor}) : res;
    if (prep.labeled && !prep.positives.empty()) {
      ++ranked;
      auto by_prob = detail::ranking_flags(full.passage_probs, prep.positives, k);
      auto by_attn = detail::ranking_flags(full.attention_by_passage, prep.positives, k);
      r1r += recall_at_k(by_prob, 1);
      r1a += recall_at_k(by_attn, 1);
      if (k >= 2) {
        r2r += recall_at_k(by_prob, 2);
        r2a += recall_at_k(by_attn, 2);
      }
    }
    if (prep.labeled) {
      for (size_t i = 0; i < prep.sentence_labels.size(); ++i) {
        const auto& labels = prep.sentence_labels[i];
        const auto& scores = full.sentence_scores[i];
        for (size_t s = 0; s < labels.size() && s < scores.size(); ++s) {
          auc_scores.push_back(scores[s]);
          auc_labels.push_back(labels[s]);
        }
      }
    }
  }
  m.count = static_cast<int>(data.size());
  if (m.count > 0) {
    m.em = em_sum / m.count;
    m.avg_passages = kept_sum / m.count;
  }
  if (ranked > 0) {
    m.r1_reranker = r1r / ranked;
    m.r1_attention = r1a / ranked;
    if (k >= 2) {
      m.r2_reranker = r2r / ranked;
      m.r2_attention = r2a / ranked;
    }
  }
  if (!auc_labels.empty()) {
    try {
      m.sentence_auc = auc_roc(auc_scores, auc_labels);
    } catch (const SingleClassError&) {
      // degenerate label pool; metric reported absent
    }
  }
  return m;
}

}  // namespace mgfid
