// Command-line front end: data generation, evidence labeling, training,
// evaluation and the sweep/ablation experiments.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mgfid/corpus.hpp"
#include "mgfid/errors.hpp"
#include "mgfid/eval.hpp"
#include "mgfid/labeling.hpp"
#include "mgfid/model.hpp"
#include "mgfid/trainer.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

namespace fs = std::filesystem;
using namespace mgfid;

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void write_manifest(const fs::path& dir, const std::vector<std::string>& argv_copy,
                    const std::string& config_text, uint64_t seed) {
  fs::create_directories(dir);
  nlohmann::ordered_json j;
  std::string cmd;
  for (size_t i = 0; i < argv_copy.size(); ++i) {
    if (i) cmd += ' ';
    cmd += argv_copy[i];
  }
  j["command_line"] = cmd;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(fnv1a(config_text)));
  j["config_hash"] = hash;
  j["seed"] = seed;
  j["code_version"] = kVersion;
  std::ofstream out(dir / "manifest.json");
  out << j.dump(1) << "\n";
}

struct CommonModelArgs {
  std::string config_path;
  std::optional<double> lr, lambda1, lambda2, alpha, gamma;
  std::optional<int> batch_size, accum_steps, total_steps, eval_interval, eval_examples;
  std::optional<int> d_model, heads, enc_layers, dec_layers, ff_width, max_len, k, vocab,
      max_target;
  std::optional<uint64_t> seed;
  std::optional<std::string> passage_loss;
  std::optional<bool> sentence, anchor;
  std::optional<int> anchor_warmup;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file; flags override its values");
    cmd->add_option("--lr", lr);
    cmd->add_option("--lambda1", lambda1, "passage loss weight");
    cmd->add_option("--lambda2", lambda2, "sentence loss weight");
    cmd->add_option("--focal-alpha", alpha);
    cmd->add_option("--focal-gamma", gamma);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--accum-steps", accum_steps);
    cmd->add_option("--total-steps", total_steps);
    cmd->add_option("--eval-interval", eval_interval);
    cmd->add_option("--eval-examples", eval_examples, "dev subset for periodic evals (0 = all)");
    cmd->add_option("--seed", seed);
    cmd->add_option("--d-model", d_model);
    cmd->add_option("--heads", heads);
    cmd->add_option("--enc-layers", enc_layers);
    cmd->add_option("--dec-layers", dec_layers);
    cmd->add_option("--ff-width", ff_width);
    cmd->add_option("--max-len", max_len);
    cmd->add_option("--k", k, "passages per question");
    cmd->add_option("--vocab", vocab);
    cmd->add_option("--max-target-len", max_target);
    cmd->add_option("--passage-loss", passage_loss)
        ->check(CLI::IsMember({"off", "listwise", "pointwise"}));
    cmd->add_flag("--sentence,!--no-sentence", sentence, "sentence classification loss");
    cmd->add_flag("--anchor,!--no-anchor", anchor, "anchor vector injection");
    cmd->add_option("--anchor-warmup-steps", anchor_warmup);
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw DataError("config: cannot read " + config_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw DataError("config: " + config_path + ": " + e.what());
      }
      cfg = train_config_from_json(j);
    }
    if (lr) cfg.lr = *lr;
    if (lambda1) cfg.weights.lambda1 = *lambda1;
    if (lambda2) cfg.weights.lambda2 = *lambda2;
    if (alpha) cfg.weights.focal_alpha = *alpha;
    if (gamma) cfg.weights.focal_gamma = *gamma;
    if (batch_size) cfg.batch_size = *batch_size;
    if (accum_steps) cfg.accum_steps = *accum_steps;
    if (total_steps) cfg.total_steps = *total_steps;
    if (eval_interval) cfg.eval_interval = *eval_interval;
    if (eval_examples) cfg.eval_examples = *eval_examples;
    if (seed) cfg.seed = *seed;
    if (d_model) cfg.model.d_model = *d_model;
    if (heads) cfg.model.num_heads = *heads;
    if (enc_layers) cfg.model.enc_layers = *enc_layers;
    if (dec_layers) cfg.model.dec_layers = *dec_layers;
    if (ff_width) cfg.model.ff_width = *ff_width;
    if (max_len) cfg.model.max_len = *max_len;
    if (k) cfg.model.num_passages = *k;
    if (vocab) cfg.model.vocab_size = *vocab;
    if (max_target) cfg.model.max_target_len = *max_target;
    if (passage_loss) cfg.flags.passage = passage_loss_mode_from_string(*passage_loss);
    if (sentence) cfg.flags.sentence = *sentence;
    if (anchor) cfg.flags.anchor = *anchor;
    if (anchor_warmup) cfg.anchor_warmup_steps = *anchor_warmup;
    return cfg;
  }
};

struct TokenizerArgs {
  int entities = 48, values = 32, sources = 16;
  void attach(CLI::App* cmd) {
    cmd->add_option("--entities", entities, "entity token pool");
    cmd->add_option("--values", values, "value token pool");
    cmd->add_option("--sources", sources, "source token pool");
  }
  Tokenizer build() const { return Tokenizer::synthetic(entities, values, sources); }
};

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ',')) seeds.push_back(std::stoull(part));
  if (seeds.empty()) throw DataError("empty seed list");
  return seeds;
}

void print_metric_table(const std::vector<AblationRow>& rows) {
  for (const auto& row : rows) {
    std::cout << row.name << ":";
    for (const auto& [key, stat] : row.report) {
      std::cout << " " << key << "=" << stat.mean;
    }
    std::cout << "\n";
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> argv_copy(argv, argv + argc);
  CLI::App app{"MGFiD at desk scale: multi-granularity guided fusion-in-decoder"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic QA corpus with exact labels");
  std::string gen_out;
  CorpusSpec spec;
  int gen_dev = 500;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--train", spec.num_questions, "training questions");
  gen->add_option("--dev", gen_dev, "dev questions");
  gen->add_option("--k", spec.k, "passages per question");
  gen->add_option("--seed", spec.seed);
  gen->add_option("--frac-supportive", spec.frac_supportive);
  gen->add_option("--frac-distractor", spec.frac_distractor);
  gen->add_option("--frac-confuser", spec.frac_confuser);
  gen->add_option("--frac-irrelevant", spec.frac_irrelevant);
  gen->add_option("--entities", spec.num_entities);
  gen->add_option("--values", spec.num_values);
  gen->add_option("--sources", spec.num_sources);

  // ---- label ----
  auto* label = app.add_subcommand("label", "run the evidence-labeling pipeline");
  std::string label_data, label_out, label_client = "oracle", label_truth, label_cache,
              label_report, label_endpoint, label_token;
  int label_k = 4, label_concurrency = 1, label_max_answers = 10;
  label->add_option("--data", label_data)->required();
  label->add_option("--out", label_out)->required();
  label->add_option("--k", label_k, "passages per question");
  label->add_option("--client", label_client)
      ->check(CLI::IsMember({"oracle", "http", "accept-all", "reject-all"}));
  label->add_option("--truth", label_truth, "ground-truth dataset for the oracle client");
  label->add_option("--cache", label_cache, "verdict cache file (read and updated)");
  label->add_option("--report", label_report, "filtering-rate-by-rank CSV");
  label->add_option("--endpoint", label_endpoint,
                    std::string("judge endpoint; defaults to $") + kJudgeEndpointEnv);
  label->add_option("--token", label_token,
                    std::string("bearer token; defaults to $") + kJudgeTokenEnv);
  label->add_option("--concurrency", label_concurrency);
  label->add_option("--max-answers", label_max_answers);

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a model");
  std::string train_data, train_dev, train_out, train_precision = "f32";
  CommonModelArgs train_args;
  TokenizerArgs train_tok;
  bool train_verbose = false;
  train_cmd->add_option("--train", train_data)->required();
  train_cmd->add_option("--dev", train_dev)->required();
  train_cmd->add_option("--out", train_out)->required();
  train_cmd->add_option("--precision", train_precision)->check(CLI::IsMember({"f32", "f64"}));
  train_cmd->add_flag("--verbose", train_verbose);
  train_args.attach(train_cmd);
  train_tok.attach(train_cmd);

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out, eval_precision = "f32";
  double eval_tau = 0.0;
  int eval_top_n = 0;
  std::optional<bool> eval_anchor;
  TokenizerArgs eval_tok;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--out", eval_out, "metric report JSON");
  eval_cmd->add_option("--tau", eval_tau, "pruning threshold");
  eval_cmd->add_option("--top-n", eval_top_n, "fixed top-n pruning (overrides tau)");
  eval_cmd->add_flag("--anchor,!--no-anchor", eval_anchor);
  eval_cmd->add_option("--precision", eval_precision)->check(CLI::IsMember({"f32", "f64"}));
  eval_tok.attach(eval_cmd);

  // ---- sweep-tau ----
  auto* sweep_tau = app.add_subcommand("sweep-tau", "EM and kept-passage count across tau");
  std::string st_ckpt, st_data, st_out;
  double st_lo = 0.0, st_hi = 0.10, st_step = 0.01;
  TokenizerArgs st_tok;
  sweep_tau->add_option("--checkpoint", st_ckpt)->required();
  sweep_tau->add_option("--data", st_data)->required();
  sweep_tau->add_option("--out", st_out, "output CSV")->required();
  sweep_tau->add_option("--from", st_lo);
  sweep_tau->add_option("--to", st_hi);
  sweep_tau->add_option("--step", st_step);
  st_tok.attach(sweep_tau);

  // ---- sweep-k ----
  auto* sweep_k = app.add_subcommand("sweep-k", "train and evaluate across passage counts");
  std::string sk_out, sk_list = "2,4,8";
  CommonModelArgs sk_args;
  TokenizerArgs sk_tok;
  CorpusSpec sk_spec;
  int sk_dev = 500, sk_jobs = 1;
  sweep_k->add_option("--out", sk_out)->required();
  sweep_k->add_option("--k-list", sk_list);
  sweep_k->add_option("--train-questions", sk_spec.num_questions);
  sweep_k->add_option("--dev-questions", sk_dev);
  sweep_k->add_option("--corpus-seed", sk_spec.seed);
  sweep_k->add_option("--jobs", sk_jobs);
  sk_args.attach(sweep_k);
  sk_tok.attach(sweep_k);

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "multi-task ablation table");
  std::string ab_train, ab_dev, ab_out, ab_seeds = "0,1,2";
  int ab_jobs = 1;
  CommonModelArgs ab_args;
  TokenizerArgs ab_tok;
  ablate->add_option("--train", ab_train)->required();
  ablate->add_option("--dev", ab_dev)->required();
  ablate->add_option("--out", ab_out)->required();
  ablate->add_option("--seeds", ab_seeds, "comma-separated model seeds");
  ablate->add_option("--jobs", ab_jobs, "parallel training cells");
  ab_args.attach(ablate);
  ab_tok.attach(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      fs::create_directories(gen_out);
      Dataset train_set = generate_corpus(spec);
      CorpusSpec dev_spec = spec;
      dev_spec.num_questions = gen_dev;
      dev_spec.seed = Rng::splitmix64(spec.seed ^ 0xdee1ULL);
      Dataset dev_set = generate_corpus(dev_spec);
      save_dataset(fs::path(gen_out) / "train.json", train_set);
      save_dataset(fs::path(gen_out) / "dev.json", dev_set);
      write_manifest(gen_out, argv_copy, to_json(TrainConfig{}).dump() + gen_out, spec.seed);
      std::cout << "wrote " << train_set.size() << " train / " << dev_set.size()
                << " dev questions under " << gen_out << "\n";
      return 0;
    }
    if (label->parsed()) {
      Dataset data = load_dataset(label_data, label_k);
      std::unique_ptr<JudgmentClient> client;
      Dataset truth;
      if (label_client == "oracle") {
        truth = load_dataset(label_truth.empty() ? label_data : label_truth, label_k);
        client = std::make_unique<OracleJudgmentClient>(truth);
      } else if (label_client == "http") {
        std::string endpoint = label_endpoint;
        if (endpoint.empty()) {
          const char* env = std::getenv(kJudgeEndpointEnv);
          if (!env) throw DataError(std::string("no --endpoint and $") + kJudgeEndpointEnv +
                                    " is unset");
          endpoint = env;
        }
        std::string token = label_token;
        if (token.empty()) {
          const char* env = std::getenv(kJudgeTokenEnv);
          if (env) token = env;
        }
        client = std::make_unique<HttpJudgmentClient>(endpoint, token);
      } else if (label_client == "accept-all") {
        client = std::make_unique<RuleJudgmentClient>(
            [](const std::string&) { return Verdict::kSupportive; });
      } else {
        client = std::make_unique<RuleJudgmentClient>(
            [](const std::string&) { return Verdict::kUnsupportive; });
      }
      VerdictCache cache;
      if (!label_cache.empty()) cache.load(label_cache);
      LabelOptions opts;
      opts.concurrency = label_concurrency;
      opts.max_answers = label_max_answers;
      // labeling starts from unlabeled passages
      for (QAExample& ex : data) {
        for (Passage& p : ex.passages) p.evidence_label = "unknown";
      }
      LabelStats stats = label_passages(&data, client.get(), &cache, opts);
      save_dataset(label_out, data);
      if (!label_cache.empty()) cache.save(label_cache);
      if (!label_report.empty()) {
        auto rows = filtering_rate_by_rank(data);
        write_filter_report_csv(label_report, rows);
      }
      write_manifest(fs::path(label_out).parent_path().empty()
                         ? fs::path(".")
                         : fs::path(label_out).parent_path(),
                     argv_copy, label_data + label_client, 0);
      std::cout << "labeled " << data.size() << " questions; client calls " << stats.client_calls
                << ", cache hits " << stats.cache_hits << ", skipped (no span) "
                << stats.skipped_no_span << ", failures " << stats.failures << "\n";
      return 0;
    }
    if (train_cmd->parsed()) {
      TrainConfig cfg = train_args.resolve();
      Tokenizer tok = train_tok.build();
      if (tok.size() > cfg.model.vocab_size) {
        throw DataError("tokenizer has " + std::to_string(tok.size()) +
                        " words but vocab_size is " + std::to_string(cfg.model.vocab_size));
      }
      Dataset train_set = load_dataset(train_data, cfg.model.num_passages);
      Dataset dev_set = load_dataset(train_dev, cfg.model.num_passages);
      write_manifest(train_out, argv_copy, to_json(cfg).dump(), cfg.seed);
      RunRecord rec;
      if (train_precision == "f64") {
        rec = train<double>(cfg, train_set, dev_set, tok, train_out, train_verbose);
      } else {
        rec = train<float>(cfg, train_set, dev_set, tok, train_out, train_verbose);
      }
      std::cout << "best dev EM " << rec.best_em << " at step " << rec.best_step << "; checkpoint "
                << rec.best_checkpoint.string() << "\n";
      if (rec.diverged) {
        std::cerr << "training diverged; last good checkpoint retained\n";
        return kExitDiverged;
      }
      return 0;
    }
    auto eval_with = [&](const std::string& precision, const fs::path& ckpt, const Dataset& data,
                         const Tokenizer& tok, const EvalOptions& opts) -> MetricValues {
      if (precision == "f64") {
        MgfidModel<double> model = MgfidModel<double>::load(ckpt);
        return evaluate(model, data, tok, opts);
      }
      MgfidModel<float> model = MgfidModel<float>::load(ckpt);
      return evaluate(model, data, tok, opts);
    };
    if (eval_cmd->parsed()) {
      Tokenizer tok = eval_tok.build();
      MgfidModel<float> probe = MgfidModel<float>::load(eval_ckpt);
      Dataset data = load_dataset(eval_data, probe.config().num_passages);
      EvalOptions opts;
      opts.tau = eval_tau;
      opts.top_n = eval_top_n;
      opts.use_anchor = eval_anchor.value_or(true);
      MetricValues m = eval_with(eval_precision, eval_ckpt, data, tok, opts);
      MetricReport report = aggregate_metrics(std::vector<MetricValues>{m});
      std::string json = metric_report_to_json(report);
      std::cout << json << "\n";
      if (!eval_out.empty()) {
        std::ofstream out(eval_out);
        out << json << "\n";
      }
      return 0;
    }
    if (sweep_tau->parsed()) {
      Tokenizer tok = st_tok.build();
      MgfidModel<float> model = MgfidModel<float>::load(st_ckpt);
      Dataset data = load_dataset(st_data, model.config().num_passages);
      std::ofstream out(st_out);
      if (!out) throw DataError("sweep-tau: cannot write " + st_out);
      out << "tau,avg_passages,em\n";
      std::cout << "tau,avg_passages,em\n";
      for (double tau = st_lo; tau <= st_hi + 1e-12; tau += st_step) {
        EvalOptions opts;
        opts.tau = tau;
        MetricValues m = evaluate(model, data, tok, opts);
        out << tau << "," << m.avg_passages << "," << m.em << "\n";
        std::cout << tau << "," << m.avg_passages << "," << m.em << "\n";
      }
      write_manifest(fs::path(st_out).parent_path().empty() ? fs::path(".")
                                                            : fs::path(st_out).parent_path(),
                     argv_copy, st_ckpt, 0);
      return 0;
    }
    if (sweep_k->parsed()) {
      TrainConfig base = sk_args.resolve();
      Tokenizer tok = sk_tok.build();
      std::vector<int> ks;
      for (const std::string& part : [&] {
             std::vector<std::string> parts;
             std::istringstream is(sk_list);
             std::string p;
             while (std::getline(is, p, ',')) parts.push_back(p);
             return parts;
           }()) {
        ks.push_back(std::stoi(part));
      }
      fs::create_directories(sk_out);
      write_manifest(sk_out, argv_copy, to_json(base).dump(), base.seed);
      std::ofstream table(fs::path(sk_out) / "sweep_k.csv");
      table << "k,em,r_at_1_reranker\n";
      for (int k : ks) {
        CorpusSpec cs = sk_spec;  // proportional archetypes: same fractions for every k
        cs.k = k;
        Dataset train_set = generate_corpus(cs);
        CorpusSpec dev_cs = cs;
        dev_cs.num_questions = sk_dev;
        dev_cs.seed = Rng::splitmix64(cs.seed ^ 0xdee1ULL);
        Dataset dev_set = generate_corpus(dev_cs);
        TrainConfig cfg = base;
        cfg.model.num_passages = k;
        fs::path dir = fs::path(sk_out) / ("k" + std::to_string(k));
        RunRecord rec = train<float>(cfg, train_set, dev_set, tok, dir);
        MgfidModel<float> model = MgfidModel<float>::load(rec.best_checkpoint);
        EvalOptions opts;
        MetricValues m = evaluate(model, dev_set, tok, opts);
        table << k << "," << m.em << "," << (m.r1_reranker ? *m.r1_reranker : -1.0) << "\n";
        table.flush();
        std::cout << "k=" << k << " em=" << m.em << "\n";
      }
      return 0;
    }
    if (ablate->parsed()) {
      TrainConfig base = ab_args.resolve();
      Tokenizer tok = ab_tok.build();
      Dataset train_set = load_dataset(ab_train, base.model.num_passages);
      Dataset dev_set = load_dataset(ab_dev, base.model.num_passages);
      std::vector<uint64_t> seeds = parse_seed_list(ab_seeds);
      auto variants = default_ablation_variants();
      fs::create_directories(ab_out);
      write_manifest(ab_out, argv_copy, to_json(base).dump(), base.seed);
      auto rows = ablation_matrix<float>(base, variants, seeds, train_set, dev_set, tok, ab_out,
                                         ab_jobs);
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      std::ofstream csv(fs::path(ab_out) / "ablation.csv");
      csv << "variant,em_mean,em_std,r1_reranker,r1_attention,sentence_auc,avg_passages\n";
      for (const auto& row : rows) {
        nlohmann::ordered_json r;
        r["name"] = row.name;
        for (const auto& [key, stat] : row.report) {
          r[key] = {{"mean", stat.mean}, {"std", stat.stddev}, {"per_seed", stat.per_seed}};
        }
        j.push_back(std::move(r));
        auto get = [&](const std::string& key) {
          auto it = row.report.find(key);
          return it == row.report.end() ? -1.0 : it->second.mean;
        };
        auto get_std = [&](const std::string& key) {
          auto it = row.report.find(key);
          return it == row.report.end() ? 0.0 : it->second.stddev;
        };
        csv << row.name << "," << get("em") << "," << get_std("em") << ","
            << get("r_at_1_reranker") << "," << get("r_at_1_attention") << ","
            << get("sentence_auc") << "," << get("avg_passages_decoder") << "\n";
      }
      std::ofstream(fs::path(ab_out) / "ablation.json") << j.dump(1) << "\n";
      print_metric_table(rows);
      return 0;
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run_cli(argc, argv); }
