#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mgfid/losses.hpp"
#include "mgfid/model.hpp"
#include "mgfid/rng.hpp"

using namespace mgfid;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.ff_width = 16;
  cfg.max_len = 10;
  cfg.num_passages = 3;
  cfg.vocab_size = 20;
  cfg.max_target_len = 6;
  return cfg;
}

std::vector<int> ids(std::initializer_list<int> v) { return std::vector<int>(v); }

template <typename T>
EncoderOut<T> fake_out(Tape<T>& tape, Tensor<T> h, int valid) {
  return {tape.input(std::move(h)), valid};
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("encode_pair: shape contract and determinism") {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.max_len = 32;
  MgfidModel<double> model(cfg, 1);
  Tape<double> tape;
  auto out = model.encode_pair(tape, ids({5, 6, 7}), ids({8, 9, 10, 11}));
  CHECK(tape.value(out.h).shape() == std::vector<int>{32, 64});
  CHECK(out.valid_len == 7);

  Tape<double> tape2;
  auto out2 = model.encode_pair(tape2, ids({5, 6, 7}), ids({8, 9, 10, 11}));
  CHECK(tape.value(out.h).vec() == tape2.value(out2.h).vec());
}

TEST_CASE("encode_pair: rejects an empty question") {
  MgfidModel<double> model(tiny_config(), 1);
  Tape<double> tape;
  CHECK_THROWS_AS(model.encode_pair(tape, {}, ids({4, 5})), ShapeError);
}

TEST_CASE("encode_pair: padding region does not affect valid rows") {
  MgfidModel<double> model(tiny_config(), 3);
  // same shared prefix, second passage longer; compare rows of the shared part
  Tape<double> t1, t2;
  auto a = model.encode_pair(t1, ids({4, 5}), ids({6, 7}));
  auto b = model.encode_pair(t2, ids({4, 5}), ids({6, 7, 8, 9, 10}));
  const auto& ha = t1.value(a.h);
  const auto& hb = t2.value(b.h);
  for (int r = 0; r < a.valid_len; ++r) {
    for (int c = 0; c < 8; ++c) CHECK(ha(r, c) == hb(r, c));
  }
}

TEST_CASE("fused multi-pair encoding equals pair-by-pair encoding") {
  MgfidModel<double> model(tiny_config(), 7);
  std::vector<std::vector<int>> passages{{4, 5, 6}, {7, 8}, {9, 10, 11, 12}};
  Tape<double> fused_tape;
  auto outs = model.encode_question(fused_tape, ids({14, 15}), passages);
  for (size_t i = 0; i < passages.size(); ++i) {
    Tape<double> single;
    auto one = model.encode_pair(single, ids({14, 15}), passages[i]);
    const auto& hf = fused_tape.value(outs[i].h);
    const auto& hs = single.value(one.h);
    REQUIRE(hf.numel() == hs.numel());
    for (int64_t j = 0; j < hf.numel(); ++j) {
      CHECK(hf[j] == doctest::Approx(hs[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("concat_encodings: shape, block identity, K=1") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 7);
  std::vector<std::vector<int>> passages{{4, 5, 6}, {7, 8}, {9, 10, 11, 12}};
  Tape<double> tape;
  auto outs = model.encode_question(tape, ids({14, 15}), passages);
  auto cm = model.concat_encodings(tape, outs);
  CHECK(tape.value(cm.v).shape() == std::vector<int>{3 * cfg.max_len, cfg.d_model});
  // block 1 equals H_1 bit-exactly
  const auto& v = tape.value(cm.v);
  const auto& h1 = tape.value(outs[1].h);
  for (int r = 0; r < cfg.max_len; ++r) {
    for (int c = 0; c < cfg.d_model; ++c) CHECK(v(cfg.max_len + r, c) == h1(r, c));
  }
  auto single = model.concat_encodings(tape, std::span<const EncoderOut<double>>(&outs[0], 1));
  CHECK(tape.value(single.v).vec() == tape.value(outs[0].h).vec());
}

TEST_CASE("passage probabilities: softmax symmetry and hand-built logits") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 5);
  int d = cfg.d_model;
  // W_p = identity, W_r = first basis row: logit_i = h_i^0[0]
  TensorD eye({d, d});
  for (int i = 0; i < d; ++i) eye(i, i) = 1.0;
  model.params()["heads.w_p"] = eye;
  TensorD basis({1, d});
  basis[0] = 1.0;
  model.params()["heads.w_r"] = basis;

  Tape<double> tape;
  std::vector<EncoderOut<double>> outs;
  double first_coord[3] = {std::log(2.0), 0.0, 0.0};
  for (int i = 0; i < 3; ++i) {
    TensorD h({cfg.max_len, d});
    h(0, 0) = first_coord[i];
    h(0, 1) = 0.5;  // ignored by the basis scorer
    outs.push_back(fake_out(tape, std::move(h), 4));
  }
  auto scores = model.passage_probabilities(tape, outs);
  REQUIRE(scores.prob_values.size() == 3);
  CHECK(scores.prob_values[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(scores.prob_values[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(scores.prob_values[2] == doctest::Approx(0.25).epsilon(1e-12));
  // logit_i equals coordinate 0 of h_i^0 under the identity projection
  const TensorD& logits = tape.value(scores.logits);
  CHECK(logits(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // all-equal logits -> uniform probabilities
  Tape<double> t2;
  std::vector<EncoderOut<double>> same;
  for (int i = 0; i < 3; ++i) same.push_back(fake_out(t2, TensorD({cfg.max_len, d}), 4));
  auto uniform = model.passage_probabilities(t2, same);
  for (double p : uniform.prob_values) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));

  CHECK_THROWS_AS(model.passage_probabilities(tape, {}), ShapeError);
}

TEST_CASE("passage probabilities sum to one") {
  MgfidModel<double> model(tiny_config(), 11);
  Rng rng(4);
  Tape<double> tape;
  std::vector<EncoderOut<double>> outs;
  for (int i = 0; i < 3; ++i) {
    TensorD h({10, 8});
    for (int64_t j = 0; j < h.numel(); ++j) h[j] = rng.uniform(-2, 2);
    outs.push_back(fake_out(tape, std::move(h), 6));
  }
  auto scores = model.passage_probabilities(tape, outs);
  double total = 0;
  for (double p : scores.prob_values) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    total += p;
  }
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("sentence logits: spans, zero classifier, identity projection") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 5);
  int d = cfg.d_model;
  TensorD eye({d, d});
  for (int i = 0; i < d; ++i) eye(i, i) = 1.0;
  model.params()["heads.w_p"] = eye;

  Rng rng(9);
  TensorD h({cfg.max_len, d});
  for (int64_t j = 0; j < h.numel(); ++j) h[j] = rng.uniform(-1, 1);
  Tape<double> tape;
  auto out = fake_out(tape, h, 8);

  // single-token span: embedding equals that row (identity projection)
  std::vector<std::pair<int, int>> single{{3, 3}};
  auto b1 = model.sentence_logits(tape, out, single);
  for (int c = 0; c < d; ++c) {
    CHECK(tape.value(b1.embeds)(0, c) == doctest::Approx(h(3, c)).epsilon(1e-12));
  }

  // two-token span: arithmetic mean of the two rows
  std::vector<std::pair<int, int>> two{{4, 5}};
  auto b2 = model.sentence_logits(tape, out, two);
  for (int c = 0; c < d; ++c) {
    CHECK(tape.value(b2.embeds)(0, c) ==
          doctest::Approx(0.5 * (h(4, c) + h(5, c))).epsilon(1e-12));
  }

  // zero classifier: logits [0, 0] for every sentence, ties predict negative
  model.params()["heads.w_s"] = TensorD({d, 2});
  std::vector<std::pair<int, int>> spans{{0, 2}, {3, 5}};
  auto b3 = model.sentence_logits(tape, out, spans);
  const TensorD& lv = tape.value(b3.logits);
  for (int64_t j = 0; j < lv.numel(); ++j) CHECK(lv[j] == 0.0);
  CHECK(b3.predictions == std::vector<int>{0, 0});

  // spans outside the valid region are rejected
  std::vector<std::pair<int, int>> bad{{6, 9}};
  CHECK_THROWS_AS(model.sentence_logits(tape, out, bad), ShapeError);
  std::vector<std::pair<int, int>> inverted{{5, 4}};
  CHECK_THROWS_AS(model.sentence_logits(tape, out, inverted), ShapeError);
}

TEST_CASE("anchor: max-pool, singleton, empty set") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 2;
  cfg.num_heads = 1;
  cfg.ff_width = 4;
  MgfidModel<double> model(cfg, 2);
  Tape<double> tape;
  SentenceBatch<double> batch;
  batch.passage_index = 0;
  batch.count = 2;
  batch.embeds = tape.input(TensorD({2, 2}, {1, 3, 2, 2}));
  batch.logits = tape.input(TensorD({2, 2}));
  batch.predictions = {1, 1};
  std::vector<SentenceBatch<double>> batches{batch};
  auto anchor = model.build_anchor(tape, batches);
  CHECK_FALSE(anchor.empty);
  CHECK(tape.value(anchor.vec)[0] == 2.0);
  CHECK(tape.value(anchor.vec)[1] == 3.0);

  batch.predictions = {0, 1};  // singleton positive set
  std::vector<SentenceBatch<double>> one{batch};
  auto a1 = model.build_anchor(tape, one);
  CHECK_FALSE(a1.empty);
  CHECK(tape.value(a1.vec)[0] == 2.0);
  CHECK(tape.value(a1.vec)[1] == 2.0);

  batch.predictions = {0, 0};  // empty set -> zero vector with flag
  std::vector<SentenceBatch<double>> none{batch};
  auto a0 = model.build_anchor(tape, none);
  CHECK(a0.empty);
  CHECK(tape.value(a0.vec)[0] == 0.0);
  CHECK(tape.value(a0.vec)[1] == 0.0);
}

TEST_CASE("prune: threshold rule, boundaries, fallback") {
  std::vector<double> p{0.6, 0.3, 0.06, 0.04};
  CHECK(prune_by_threshold(p, 0.05) == std::vector<int>{0, 1, 2});
  CHECK(prune_by_threshold(p, 0.0) == std::vector<int>{0, 1, 2, 3});
  std::vector<double> low{0.03, 0.02, 0.01, 0.94};
  std::vector<double> all_low{0.03, 0.02, 0.03, 0.02};
  CHECK(prune_by_threshold(all_low, 0.05) == std::vector<int>{0});  // argmax fallback
  CHECK_THROWS_AS(prune_by_threshold(p, -0.1), ShapeError);
  CHECK_THROWS_AS(prune_by_threshold(p, 1.5), ShapeError);
  CHECK(prune_top_n(p, 2) == std::vector<int>{0, 1});
  CHECK(prune_top_n(low, 1) == std::vector<int>{3});
  CHECK(prune_top_n(p, 9) == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("prune: monotone in tau, never empty, argmax always kept") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    int k = 2 + static_cast<int>(rng.uniform_int(6));
    std::vector<double> probs(k);
    double total = 0;
    for (double& x : probs) {
      x = rng.uniform(1e-6, 1.0);
      total += x;
    }
    for (double& x : probs) x /= total;
    double t1 = rng.uniform(0, 1), t2 = rng.uniform(0, 1);
    if (t1 > t2) std::swap(t1, t2);
    auto k1 = prune_by_threshold(probs, t1);
    auto k2 = prune_by_threshold(probs, t2);
    CHECK(!k1.empty());
    CHECK(!k2.empty());
    // kept(t2) is a subset of kept(t1); both contain the argmax
    for (int i : k2) {
      CHECK(std::find(k1.begin(), k1.end(), i) != k1.end());
    }
    int argmax = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    CHECK(std::find(k1.begin(), k1.end(), argmax) != k1.end());
    CHECK(std::find(k2.begin(), k2.end(), argmax) != k2.end());
  }
}

TEST_CASE("decode: zero anchor equals no anchor, bit-exact") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 13);
  std::vector<std::vector<int>> passages{{4, 5, 6}, {7, 8}, {9, 10}};
  Tape<double> tape;
  auto outs = model.encode_question(tape, ids({14, 15}), passages);
  auto kv = model.concat_encodings(tape, outs);
  Anchor<double> none;
  none.vec = tape.input(TensorD::zeros({1, cfg.d_model}));
  none.empty = true;
  Anchor<double> zero;
  zero.vec = tape.input(TensorD::zeros({1, cfg.d_model}));
  zero.empty = false;  // explicit zero anchor, additive identity
  std::vector<int> prefix{kBosId, 5, 6};
  auto a = model.decode(tape, kv, none, prefix);
  auto b = model.decode(tape, kv, zero, prefix);
  CHECK(tape.value(a.logits).vec() == tape.value(b.logits).vec());
}

TEST_CASE("decode: shape contract and error paths") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 13);
  Tape<double> tape;
  std::vector<std::vector<int>> one_passage{{4, 5}};
  auto outs = model.encode_question(tape, ids({14}), one_passage);
  auto kv = model.concat_encodings(tape, outs);
  Anchor<double> none;
  none.vec = tape.input(TensorD::zeros({1, cfg.d_model}));
  none.empty = true;
  std::vector<int> one{kBosId};
  auto res = model.decode(tape, kv, none, one);
  CHECK(tape.value(res.logits).shape() == std::vector<int>{1, cfg.vocab_size});
  CHECK_THROWS_AS(model.decode(tape, kv, none, {}), ShapeError);
  std::vector<int> no_bos{5, 6};
  CHECK_THROWS_AS(model.decode(tape, kv, none, no_bos), ShapeError);
  std::vector<int> too_long(cfg.max_target_len + 1, kBosId);
  CHECK_THROWS_AS(model.decode(tape, kv, none, too_long), ShapeError);
}

TEST_CASE("decode: a fully masked block changes nothing") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 17);
  Rng rng(5);
  int L = cfg.max_len, d = cfg.d_model;
  TensorD content({L, d});
  for (int64_t j = 0; j < content.numel(); ++j) content[j] = rng.uniform(-1, 1);
  TensorD junk({L, d});
  for (int64_t j = 0; j < junk.numel(); ++j) junk[j] = rng.uniform(-1, 1);

  Tape<double> tape;
  ConcatMatrix<double> with_pad;
  with_pad.block_len = L;
  with_pad.v = tape.concat_rows({tape.input(content), tape.input(junk)});
  with_pad.block_ids = {0, 1};
  with_pad.valid_lens = {6, 0};  // second block is all padding

  ConcatMatrix<double> without;
  without.block_len = L;
  without.v = tape.input(content);
  without.block_ids = {0};
  without.valid_lens = {6};

  Anchor<double> none;
  none.vec = tape.input(TensorD::zeros({1, d}));
  none.empty = true;
  std::vector<int> prefix{kBosId, 4};
  auto a = model.decode(tape, with_pad, none, prefix);
  auto b = model.decode(tape, without, none, prefix);
  CHECK(tape.value(a.logits).vec() == tape.value(b.logits).vec());
}

TEST_CASE("generate: deterministic, attention sums normalized per step") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 23);
  QuestionTokens q;
  q.question = ids({14, 15});
  q.passages = {{ids({4, 5, 6, 7}), {{2, 3}}}, {ids({8, 9}), {{2, 3}}}, {ids({10, 11}), {}}};
  GenerateOptions opts;
  auto r1 = model.generate(q, opts);
  auto r2 = model.generate(q, opts);
  CHECK(r1.output_ids == r2.output_ids);
  CHECK(r1.attention_by_passage == r2.attention_by_passage);
  CHECK(r1.kept == std::vector<int>{0, 1, 2});
  // per row, layer and head the weights over kv sum to 1
  double total = 0;
  for (double s : r1.attention_by_passage) {
    CHECK(s >= 0.0);
    total += s;
  }
  int rows = static_cast<int>(r1.output_ids.size()) + 1;  // EOS row included
  double expected = static_cast<double>(cfg.dec_layers * cfg.num_heads * rows);
  CHECK(total == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("generate: pruning keeps the argmax passage when all fall below tau") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 23);
  QuestionTokens q;
  q.question = ids({14, 15});
  q.passages = {{ids({4, 5}), {}}, {ids({8, 9}), {}}, {ids({10, 11}), {}}};
  GenerateOptions opts;
  opts.tau = 1.0;  // nothing exceeds 1.0 strictly
  auto r = model.generate(q, opts);
  CHECK(r.kept.size() == 1);
  int argmax = 0;
  for (size_t i = 1; i < r.passage_probs.size(); ++i) {
    if (r.passage_probs[i] > r.passage_probs[argmax]) argmax = static_cast<int>(i);
  }
  CHECK(r.kept[0] == argmax);
  // pruned-away passages report zero attention
  for (size_t i = 0; i < r.attention_by_passage.size(); ++i) {
    if (static_cast<int>(i) != argmax) CHECK(r.attention_by_passage[i] == 0.0);
  }
}

TEST_CASE("passage reordering permutes probabilities and blocks") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 29);
  std::vector<std::vector<int>> passages{{4, 5, 6}, {7, 8}, {9, 10, 11}};
  std::vector<std::vector<int>> permuted{{9, 10, 11}, {4, 5, 6}, {7, 8}};
  // sigma maps original index -> position in the permuted list
  int sigma[3] = {1, 2, 0};
  Tape<double> t1, t2;
  auto o1 = model.encode_question(t1, ids({14}), passages);
  auto o2 = model.encode_question(t2, ids({14}), permuted);
  auto s1 = model.passage_probabilities(t1, o1);
  auto s2 = model.passage_probabilities(t2, o2);
  for (int i = 0; i < 3; ++i) {
    CHECK(s1.prob_values[i] == doctest::Approx(s2.prob_values[sigma[i]]).epsilon(1e-12));
  }
  auto v1 = model.concat_encodings(t1, o1);
  auto v2 = model.concat_encodings(t2, o2);
  const auto& m1 = t1.value(v1.v);
  const auto& m2 = t2.value(v2.v);
  for (int i = 0; i < 3; ++i) {
    for (int r = 0; r < cfg.max_len; ++r) {
      for (int c = 0; c < cfg.d_model; ++c) {
        CHECK(m1(i * cfg.max_len + r, c) ==
              doctest::Approx(m2(sigma[i] * cfg.max_len + r, c)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("anchor routes generation gradient into the shared projection") {
  ModelConfig cfg = tiny_config();
  MgfidModel<double> model(cfg, 31);
  // force positive predictions by biasing W_s toward class 1
  TensorD ws({cfg.d_model, 2});
  for (int i = 0; i < cfg.d_model; ++i) ws(i, 1) = 5.0;
  model.params()["heads.w_s"] = ws;

  auto run = [&](bool use_anchor) {
    Tape<double> tape;
    std::vector<std::vector<int>> passages{{4, 5, 6}, {7, 8, 9}};
    auto outs = model.encode_question(tape, ids({14}), passages);
    std::vector<SentenceBatch<double>> batches;
    std::vector<std::pair<int, int>> spans{{1, 3}};
    for (size_t i = 0; i < passages.size(); ++i) {
      batches.push_back(model.sentence_logits(tape, outs[i], spans, static_cast<int>(i)));
    }
    Anchor<double> anchor;
    if (use_anchor) {
      anchor = model.build_anchor(tape, batches);
      REQUIRE_FALSE(anchor.empty);
    } else {
      anchor.vec = tape.input(TensorD::zeros({1, cfg.d_model}));
      anchor.empty = true;
    }
    auto kv = model.concat_encodings(tape, outs);
    std::vector<int> prefix{kBosId, 4};
    auto dec = model.decode(tape, kv, anchor, prefix);
    std::vector<int> targets{4, kEosId};
    Var loss = generation_loss(tape, dec.logits, targets);
    tape.backward(loss);
    int wp = model.params().index_of("heads.w_p");
    return tape.param_grad(wp, model.params().value(wp).shape());
  };
  TensorD with = run(true);
  TensorD without = run(false);
  double norm_with = 0, norm_without = 0;
  for (int64_t j = 0; j < with.numel(); ++j) norm_with += with[j] * with[j];
  for (int64_t j = 0; j < without.numel(); ++j) norm_without += without[j] * without[j];
  CHECK(norm_with > 0.0);      // gradient flows through the pooled embeddings
  CHECK(norm_without == 0.0);  // without the anchor, generation never touches W_p
}

TEST_CASE("checkpoint: bit-exact round trip and validation") {
  ModelConfig cfg = tiny_config();
  MgfidModel<float> model(cfg, 37);
  auto dir = std::filesystem::temp_directory_path() / "mgfid_ckpt_test";
  std::filesystem::create_directories(dir);
  auto p1 = dir / "a.ckpt";
  auto p2 = dir / "b.ckpt";
  model.save(p1);
  MgfidModel<float> loaded = MgfidModel<float>::load(p1);
  CHECK(loaded.config() == cfg);
  loaded.save(p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());

  for (int i = 0; i < model.params().size(); ++i) {
    CHECK(model.params().value(i).vec() == loaded.params().value(i).vec());
  }

  std::string corrupted = b1;
  corrupted[0] = 'X';
  auto p3 = dir / "c.ckpt";
  std::ofstream(p3, std::ios::binary)
      .write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
  CHECK_THROWS_AS(MgfidModel<float>::load(p3), DataError);
  CHECK_THROWS_AS(MgfidModel<float>::load(dir / "missing.ckpt"), DataError);
}

TEST_CASE("model config validation and header round trip") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 10;
  cfg.num_heads = 4;  // not divisible
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = tiny_config();
  cfg.max_len = 1;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = tiny_config();
  std::string text = cfg.to_kv_text();
  CHECK(ModelConfig::from_kv_text(text) == cfg);
}

TEST_SUITE_END();
