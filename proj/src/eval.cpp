#include "mgfid/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mgfid/errors.hpp"
#include "json.hpp"

namespace mgfid {

std::string normalize(const std::string& text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    lowered.push_back(static_cast<char>(std::tolower(c)));
  }
  std::istringstream is(lowered);
  std::string word, out;
  while (is >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

int exact_match(const std::string& prediction, std::span<const std::string> answers) {
  std::string p = normalize(prediction);
  for (const std::string& a : answers) {
    if (p == normalize(a)) return 1;
  }
  return 0;
}

int recall_at_k(std::span<const int> positive_flags, int k) {
  if (k < 1 || k > static_cast<int>(positive_flags.size())) {
    throw ShapeError("recall_at_k: k " + std::to_string(k) + " outside list of " +
                     std::to_string(positive_flags.size()));
  }
  for (int i = 0; i < k; ++i) {
    if (positive_flags[i]) return 1;
  }
  return 0;
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("auc_roc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  int64_t n = static_cast<int64_t>(scores.size());
  int64_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ShapeError("auc_roc: labels must be 0/1");
    n_pos += l;
  }
  int64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw SingleClassError("auc_roc: need both classes, got " + std::to_string(n_pos) +
                           " positives of " + std::to_string(n));
  }
  // Mann-Whitney U from midranks; ties share the average rank, which counts
  // each tied positive-negative pair as 1/2.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  int64_t i = 0;
  while (i < n) {
    int64_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based midrank
    for (int64_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double pos_rank_sum = 0;
  for (int64_t t = 0; t < n; ++t) {
    if (labels[t]) pos_rank_sum += rank[t];
  }
  double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace {

void accumulate(MetricReport* report, const std::string& key, std::optional<double> value) {
  if (!value) return;
  (*report)[key].per_seed.push_back(*value);
}

void finish(MetricReport* report) {
  for (auto& [key, stat] : *report) {
    const auto& xs = stat.per_seed;
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    stat.mean = mean;
    stat.stddev = std::sqrt(var);
  }
}

}  // namespace

MetricReport aggregate_metrics(std::span<const MetricValues> runs) {
  MetricReport report;
  for (const MetricValues& m : runs) {
    accumulate(&report, "em", m.em);
    accumulate(&report, "r_at_1_reranker", m.r1_reranker);
    accumulate(&report, "r_at_2_reranker", m.r2_reranker);
    accumulate(&report, "r_at_1_attention", m.r1_attention);
    accumulate(&report, "r_at_2_attention", m.r2_attention);
    accumulate(&report, "sentence_auc", m.sentence_auc);
    accumulate(&report, "avg_passages_decoder", m.avg_passages);
  }
  finish(&report);
  return report;
}

std::string metric_report_to_json(const MetricReport& report) {
  nlohmann::ordered_json root;
  for (const auto& [key, stat] : report) {
    nlohmann::ordered_json s;
    s["mean"] = stat.mean;
    s["std"] = stat.stddev;
    s["per_seed"] = stat.per_seed;
    root[key] = std::move(s);
  }
  return root.dump(1);
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("write_metric_report: cannot write " + path.string());
  out << metric_report_to_json(report) << "\n";
}

}  // namespace mgfid
