#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mgfid/adam.hpp"
#include "mgfid/corpus.hpp"
#include "mgfid/errors.hpp"
#include "mgfid/eval.hpp"
#include "mgfid/losses.hpp"
#include "mgfid/model.hpp"
#include "mgfid/rng.hpp"
#include "json.hpp"

namespace mgfid {

enum class PassageLossMode { kOff, kListwise, kPointwise };

inline std::string to_string(PassageLossMode m) {
  switch (m) {
    case PassageLossMode::kOff: return "off";
    case PassageLossMode::kListwise: return "listwise";
    default: return "pointwise";
  }
}

inline PassageLossMode passage_loss_mode_from_string(const std::string& s) {
  if (s == "off") return PassageLossMode::kOff;
  if (s == "listwise") return PassageLossMode::kListwise;
  if (s == "pointwise") return PassageLossMode::kPointwise;
  throw DataError("unknown passage loss mode '" + s + "'");
}

struct TrainFlags {
  PassageLossMode passage = PassageLossMode::kListwise;
  bool sentence = true;
  bool anchor = true;

  bool operator==(const TrainFlags&) const = default;
};

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  double lr = 1e-4;
  int batch_size = 2;
  int accum_steps = 16;
  int total_steps = 2000;  // optimizer steps; each consumes batch_size * accum_steps questions
  int eval_interval = 200;
  int eval_examples = 0;  // periodic-eval subset; 0 = whole dev set
  uint64_t seed = 0;
  TrainFlags flags;
  int anchor_warmup_steps = 0;  // anchor participates from this optimizer step on

  void validate() const {
    model.validate();
    if (batch_size <= 0 || accum_steps <= 0 || total_steps <= 0 || eval_interval <= 0) {
      throw DataError("train config: batch/accumulation/step counts must be positive");
    }
    if (lr <= 0) throw DataError("train config: learning rate must be positive");
  }
};

// ---- JSON round trip for configs ----

inline nlohmann::ordered_json to_json(const ModelConfig& m) {
  return {{"d_model", m.d_model},     {"num_heads", m.num_heads},
          {"enc_layers", m.enc_layers}, {"dec_layers", m.dec_layers},
          {"ff_width", m.ff_width},   {"max_len", m.max_len},
          {"num_passages", m.num_passages}, {"vocab_size", m.vocab_size},
          {"max_target_len", m.max_target_len}};
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["weights"] = {{"lambda1", c.weights.lambda1},
                  {"lambda2", c.weights.lambda2},
                  {"focal_alpha", c.weights.focal_alpha},
                  {"focal_gamma", c.weights.focal_gamma},
                  {"tau", c.weights.tau}};
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["accum_steps"] = c.accum_steps;
  j["total_steps"] = c.total_steps;
  j["eval_interval"] = c.eval_interval;
  j["eval_examples"] = c.eval_examples;
  j["seed"] = c.seed;
  j["flags"] = {{"passage", to_string(c.flags.passage)},
                {"sentence", c.flags.sentence},
                {"anchor", c.flags.anchor}};
  j["anchor_warmup_steps"] = c.anchor_warmup_steps;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.num_heads = m.value("num_heads", c.model.num_heads);
    c.model.enc_layers = m.value("enc_layers", c.model.enc_layers);
    c.model.dec_layers = m.value("dec_layers", c.model.dec_layers);
    c.model.ff_width = m.value("ff_width", c.model.ff_width);
    c.model.max_len = m.value("max_len", c.model.max_len);
    c.model.num_passages = m.value("num_passages", c.model.num_passages);
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.max_target_len = m.value("max_target_len", c.model.max_target_len);
  }
  if (j.contains("weights")) {
    const auto& w = j["weights"];
    c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
    c.weights.focal_alpha = w.value("focal_alpha", c.weights.focal_alpha);
    c.weights.focal_gamma = w.value("focal_gamma", c.weights.focal_gamma);
    c.weights.tau = w.value("tau", c.weights.tau);
  }
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.accum_steps = j.value("accum_steps", c.accum_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.eval_examples = j.value("eval_examples", c.eval_examples);
  c.seed = j.value("seed", c.seed);
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    c.flags.passage = passage_loss_mode_from_string(f.value("passage", "listwise"));
    c.flags.sentence = f.value("sentence", true);
    c.flags.anchor = f.value("anchor", true);
  }
  c.anchor_warmup_steps = j.value("anchor_warmup_steps", c.anchor_warmup_steps);
  return c;
}

struct EvalSnapshot {
  int step = 0;
  double loss = 0;
  MetricValues metrics;
};

struct RunRecord {
  std::vector<EvalSnapshot> snapshots;
  int best_step = -1;
  double best_em = -1;
  bool diverged = false;
  std::filesystem::path best_checkpoint;
};

// One question's forward pass and loss pieces on the caller's tape. Returns
// the contributions already normalized by the step-level denominators, so
// summing micro-batch gradients reproduces the large-batch gradient exactly.
template <typename T>
Var question_loss(Tape<T>& tape, const MgfidModel<T>& model, const PreparedExample& ex,
                  const TrainFlags& flags, const LossWeights& weights, bool anchor_active,
                  int question_denom, int sentence_denom) {
  std::vector<std::vector<int>> pids;
  pids.reserve(ex.tokens.passages.size());
  for (const auto& pt : ex.tokens.passages) pids.push_back(pt.ids);
  auto outs = model.encode_question(tape, ex.tokens.question, pids);
  bool need_sentences = flags.sentence || (flags.anchor && anchor_active);
  std::vector<SentenceBatch<T>> batches;
  if (need_sentences) {
    for (size_t i = 0; i < ex.tokens.passages.size(); ++i) {
      batches.push_back(
          model.sentence_logits(tape, outs[i], ex.tokens.passages[i].spans, static_cast<int>(i)));
    }
  }
  Anchor<T> anchor;
  if (flags.anchor && anchor_active) {
    anchor = model.build_anchor(tape, batches);
  } else {
    anchor.vec = tape.input(Tensor<T>::zeros({1, model.config().d_model}));
    anchor.empty = true;
  }
  ConcatMatrix<T> kv = model.concat_encodings(tape, outs);
  std::vector<int> prefix;
  prefix.push_back(kBosId);
  prefix.insert(prefix.end(), ex.target_ids.begin(), ex.target_ids.end() - 1);
  DecodeResult<T> dec = model.decode(tape, kv, anchor, prefix);
  Var loss = tape.scale(generation_loss(tape, dec.logits, ex.target_ids),
                        T(1) / T(question_denom));
  if (flags.passage != PassageLossMode::kOff && ex.labeled) {
    PassageScores<T> scores = model.passage_probabilities(tape, outs);
    Var lp;
    if (flags.passage == PassageLossMode::kListwise) {
      if (!ex.positives.empty()) {
        lp = listwise_passage_loss(tape, scores.probs, ex.positives);
      }
      // empty positive set: contributes zero passage loss
    } else {
      std::vector<int> labels(ex.tokens.passages.size(), 0);
      for (int pos : ex.positives) labels[pos] = 1;
      lp = pointwise_passage_loss(tape, scores.logits, labels);
    }
    if (lp.valid()) {
      loss = tape.add(loss, tape.scale(lp, T(weights.lambda1 / question_denom)));
    }
  }
  if (flags.sentence && ex.labeled && sentence_denom > 0) {
    for (size_t i = 0; i < batches.size(); ++i) {
      if (batches[i].count == 0) continue;
      Var per = focal_loss(tape, batches[i].logits, ex.sentence_labels[i], weights);
      loss = tape.add(loss, tape.scale(tape.sum(per), T(weights.lambda2 / sentence_denom)));
    }
  }
  return loss;
}

template <typename T>
RunRecord train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& dev_set,
                const Tokenizer& tok, const std::filesystem::path& run_dir,
                bool verbose = false) {
  cfg.validate();
  std::filesystem::create_directories(run_dir);
  {
    std::ofstream cfg_out(run_dir / "config.json");
    cfg_out << to_json(cfg).dump(1) << "\n";
  }
  std::vector<PreparedExample> train_prep = prepare_dataset(train_set, tok, cfg.model);
  Dataset dev_eval_set = dev_set;
  if (cfg.eval_examples > 0 && cfg.eval_examples < static_cast<int>(dev_set.size())) {
    dev_eval_set.assign(dev_set.begin(), dev_set.begin() + cfg.eval_examples);
  }
  if (train_prep.empty()) throw DataError("train: empty training set");

  MgfidModel<T> model(cfg.model, cfg.seed);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamState<T> adam(model.params(), adam_cfg);
  Rng shuffle_rng(Rng::splitmix64(cfg.seed ^ 0x5caff01dULL));

  RunRecord record;
  record.best_checkpoint = run_dir / "best.ckpt";
  model.save(record.best_checkpoint);  // retained even if step 1 diverges
  std::ofstream log(run_dir / "metrics.jsonl");

  std::vector<int> order(train_prep.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  shuffle_rng.shuffle(order.begin(), order.end());
  size_t cursor = 0;
  auto next_example = [&]() -> int {
    if (cursor >= order.size()) {
      shuffle_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    return order[cursor++];
  };

  EvalOptions eval_opts;
  eval_opts.tau = 0.0;  // training-time validation never prunes
  eval_opts.use_anchor = cfg.flags.anchor;

  const int step_questions = cfg.batch_size * cfg.accum_steps;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    bool anchor_active = step > cfg.anchor_warmup_steps;
    std::vector<int> batch(step_questions);
    for (int i = 0; i < step_questions; ++i) batch[i] = next_example();
    int sentence_denom = 0;
    if (cfg.flags.sentence) {
      for (int idx : batch) {
        const PreparedExample& ex = train_prep[idx];
        if (!ex.labeled) continue;
        for (const auto& labels : ex.sentence_labels) {
          sentence_denom += static_cast<int>(labels.size());
        }
      }
    }
    std::vector<Tensor<T>> grad_total;
    grad_total.reserve(model.params().size());
    for (int i = 0; i < model.params().size(); ++i) {
      grad_total.push_back(Tensor<T>::zeros(model.params().value(i).shape()));
    }
    double loss_value = 0;
    bool bad = false;
    try {
      for (int micro = 0; micro < cfg.accum_steps; ++micro) {
        Tape<T> tape;
        Var micro_loss;
        for (int b = 0; b < cfg.batch_size; ++b) {
          int idx = batch[micro * cfg.batch_size + b];
          Var l = question_loss(tape, model, train_prep[idx], cfg.flags, cfg.weights,
                                anchor_active, step_questions, sentence_denom);
          micro_loss = micro_loss.valid() ? tape.add(micro_loss, l) : l;
        }
        loss_value += static_cast<double>(tape.value(micro_loss)[0]);
        tape.backward(micro_loss);
        for (int i = 0; i < model.params().size(); ++i) {
          Tensor<T> g = tape.param_grad(i, model.params().value(i).shape());
          for (int64_t j = 0; j < g.numel(); ++j) grad_total[i][j] += g[j];
        }
      }
    } catch (const NumericError&) {
      bad = true;
    }
    if (bad || !std::isfinite(loss_value)) {
      record.diverged = true;
      break;  // best checkpoint from the last evaluation is retained
    }
    adam.step(model.params(), grad_total);

    if (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
      MetricValues m = evaluate(model, dev_eval_set, tok, eval_opts);
      EvalSnapshot snap{step, loss_value, m};
      record.snapshots.push_back(snap);
      nlohmann::ordered_json j;
      j["step"] = step;
      j["loss"] = loss_value;
      j["em"] = m.em;
      if (m.r1_reranker) j["r_at_1_reranker"] = *m.r1_reranker;
      if (m.r1_attention) j["r_at_1_attention"] = *m.r1_attention;
      if (m.sentence_auc) j["sentence_auc"] = *m.sentence_auc;
      j["avg_passages_decoder"] = m.avg_passages;
      log << j.dump() << "\n";
      log.flush();
      if (verbose) {
        std::string line = "step " + std::to_string(step) + " loss " + std::to_string(loss_value) +
                           " em " + std::to_string(m.em) + "\n";
        std::fputs(line.c_str(), stderr);
      }
      if (m.em > record.best_em) {  // ties keep the earliest step
        record.best_em = m.em;
        record.best_step = step;
        model.save(record.best_checkpoint);
      }
    }
  }
  return record;
}

// ---- ablation matrix ----

struct AblationVariant {
  std::string name;
  TrainFlags flags;
  double eval_tau = 0.0;
  int eval_top_n = 0;
};

inline std::vector<AblationVariant> default_ablation_variants() {
  using M = PassageLossMode;
  return {
      {"full-tau005", {M::kListwise, true, true}, 0.05, 0},
      {"full-top5", {M::kListwise, true, true}, 0.0, 5},
      {"full", {M::kListwise, true, true}, 0.0, 0},
      {"listwise-sentence", {M::kListwise, true, false}, 0.0, 0},
      {"sentence-only", {M::kOff, true, false}, 0.0, 0},
      {"listwise-only", {M::kListwise, false, false}, 0.0, 0},
      {"pointwise-only", {M::kPointwise, false, false}, 0.0, 0},
      {"generation-only", {M::kOff, false, false}, 0.0, 0},
  };
}

struct AblationRow {
  std::string name;
  MetricReport report;
};

// Trains each distinct flag configuration once per seed (variants that only
// differ in evaluation-time pruning share the trained model) and evaluates
// every variant, aggregating over seeds. Cells may run on up to `jobs`
// threads; results are ordered deterministically.
template <typename T>
std::vector<AblationRow> ablation_matrix(const TrainConfig& base,
                                         std::span<const AblationVariant> variants,
                                         std::span<const uint64_t> seeds, const Dataset& train_set,
                                         const Dataset& dev_set, const Tokenizer& tok,
                                         const std::filesystem::path& out_dir, int jobs = 1,
                                         bool verbose = false) {
  struct Group {
    TrainFlags flags;
    std::string name;
  };
  std::vector<Group> groups;
  auto group_of = [&](const TrainFlags& f) -> int {
    for (size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].flags == f) return static_cast<int>(g);
    }
    std::string name = "train-" + to_string(f.passage) + (f.sentence ? "-sent" : "") +
                       (f.anchor ? "-anchor" : "");
    groups.push_back({f, name});
    return static_cast<int>(groups.size()) - 1;
  };
  std::vector<int> variant_group;
  variant_group.reserve(variants.size());
  for (const auto& v : variants) variant_group.push_back(group_of(v.flags));

  struct Cell {
    int group;
    uint64_t seed;
    std::filesystem::path ckpt;
  };
  std::vector<Cell> cells;
  for (size_t g = 0; g < groups.size(); ++g) {
    for (uint64_t s : seeds) {
      cells.push_back({static_cast<int>(g), s, {}});
    }
  }
  std::atomic<size_t> next{0};
  auto worker = [&] {
    while (true) {
      size_t c = next.fetch_add(1);
      if (c >= cells.size()) break;
      Cell& cell = cells[c];
      TrainConfig cfg = base;
      cfg.flags = groups[cell.group].flags;
      cfg.seed = cell.seed;
      std::filesystem::path dir =
          out_dir / (groups[cell.group].name + "-seed" + std::to_string(cell.seed));
      RunRecord rec = train<T>(cfg, train_set, dev_set, tok, dir, verbose);
      cell.ckpt = rec.best_checkpoint;
    }
  };
  int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  auto cell_of = [&](int group, uint64_t seed) -> const Cell& {
    for (const Cell& c : cells) {
      if (c.group == group && c.seed == seed) return c;
    }
    throw DataError("ablation: missing cell");
  };
  std::vector<AblationRow> rows;
  for (size_t v = 0; v < variants.size(); ++v) {
    std::vector<MetricValues> per_seed;
    for (uint64_t s : seeds) {
      const Cell& cell = cell_of(variant_group[v], s);
      MgfidModel<T> model = MgfidModel<T>::load(cell.ckpt);
      EvalOptions opts;
      opts.tau = variants[v].eval_tau;
      opts.top_n = variants[v].eval_top_n;
      opts.use_anchor = variants[v].flags.anchor;
      per_seed.push_back(evaluate(model, dev_set, tok, opts));
    }
    rows.push_back({variants[v].name, aggregate_metrics(per_seed)});
  }
  return rows;
}

}  // namespace mgfid
