#include "doctest.h"

#include "fidelity/rules/rules.hpp"
#include "support/toy_model.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

using namespace fidelity::rules;
using fidelity::explain::UnsupportedMethod;
using fidelity::nmt::Context;
using fidelity::nmt::eos_id;
using fidelity::nmt::make_model;
using fidelity::nmt::make_sentence_pair;
using fidelity::nmt::ModelKind;
using fidelity::testing::trained_transformer;

namespace {

RelevanceVector scores(std::vector<double> source, std::vector<double> target = {}) {
  RelevanceVector rv;
  rv.source = std::move(source);
  rv.target = std::move(target);
  rv.t = static_cast<int>(rv.target.size()) + 1;
  return rv;
}

std::vector<SentencePair> small_corpus() {
  return {make_sentence_pair(std::vector<TokenId>{4, 5, 6}, std::vector<TokenId>{7, 8, 9}),
          make_sentence_pair(std::vector<TokenId>{5}, std::vector<TokenId>{10}),
          make_sentence_pair(std::vector<TokenId>{6, 6, 4, 7}, std::vector<TokenId>{9, 9, 11})};
}

std::unique_ptr<fidelity::nmt::NmtModel> small_model(ModelKind kind = ModelKind::transformer) {
  return make_model(kind, {8, 12}, 14, 14, 4);
}

bool positional_subset(const std::vector<Word>& small, const std::vector<Word>& big) {
  return std::all_of(small.begin(), small.end(),
                     [&](const Word& w) { return std::find(big.begin(), big.end(), w) != big.end(); });
}

}  // namespace

TEST_CASE("top-k keeps the highest scores in position order") {
  const std::vector<TokenId> toks{10, 11, 12};
  auto top1 = topk_words(scores({0.5, 0.3, 0.2}), Side::source, 1, toks);
  CHECK(top1 == std::vector<Word>{{10, 1}});
  CHECK(topk_words(scores({0.5, 0.3, 0.2}), Side::source, 5, toks).size() == 3);
  CHECK(topk_words(scores({0.1, 0.9, 0.9}), Side::source, 2, toks) == std::vector<Word>{{11, 2}, {12, 3}});
  CHECK(topk_words(scores({0.9, 0.1, 0.9}), Side::source, 1, toks) == std::vector<Word>{{10, 1}});
  CHECK(topk_words(scores({-3.0, -1.0, -2.0}), Side::source, 1, toks) == std::vector<Word>{{11, 2}});
  CHECK_THROWS_AS(topk_words(scores({1.0}), Side::source, 0, std::vector<TokenId>{4}), std::invalid_argument);

  auto rnn_attn = scores({1.0});
  rnn_attn.target_scored = false;
  CHECK_THROWS_AS(topk_words(rnn_attn, Side::target, 1, std::vector<TokenId>{}), UnsupportedMethod);
}

TEST_CASE("top-k matches a full-sort oracle") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 4);  // forces ties
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 9);
    std::vector<double> s(n);
    std::vector<TokenId> toks(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse(rng) * 0.25;
      toks[i] = static_cast<TokenId>(100 + i);
    }
    const int k = 1 + trial % 4;
    std::vector<std::pair<double, int>> all;
    for (std::size_t i = 0; i < n; ++i) all.push_back({-s[i], static_cast<int>(i) + 1});
    std::sort(all.begin(), all.end());
    std::vector<int> positions;
    for (std::size_t i = 0; i < std::min(n, static_cast<std::size_t>(k)); ++i) positions.push_back(all[i].second);
    std::sort(positions.begin(), positions.end());
    std::vector<Word> expected;
    for (int p : positions) expected.push_back({toks[static_cast<std::size_t>(p - 1)], p});
    CHECK(topk_words(scores(s), Side::source, k, toks) == expected);
  }
}

TEST_CASE("extracted rules are labelled with the model prediction") {
  auto m = small_model();
  Context ctx;
  ctx.source = {4, 5, eos_id};
  for (Method method : fidelity::explain::all_methods) {
    const auto first = extract_rule(*m, method, ctx, 2);
    CHECK(first.target.empty());
    CHECK(first.source.size() == 2);
    CHECK(first.label == fidelity::nmt::nmt_forward(*m, ctx).argmax());
  }
  ctx.prefix = {7, 8, 9};
  const auto r = extract_rule(*m, Method::pd, ctx, 2);
  CHECK(r.target.size() == 2);
  CHECK(r.t == 4);
  CHECK(r.label == fidelity::nmt::nmt_forward(*m, ctx).argmax());
  CHECK_THROWS_AS(extract_rule(*small_model(ModelKind::rnn_search), Method::attn, ctx, 1), UnsupportedMethod);
}

TEST_CASE("rule datasets have one rule per decision and respect k") {
  auto m = small_model();
  const auto corpus = small_corpus();
  std::size_t steps = 0;
  for (const auto& p : corpus) steps += static_cast<std::size_t>(p.target_steps());

  for (Method method : fidelity::explain::all_methods) {
    const auto golden = build_rule_dataset(*m, method, corpus, Scenario::golden, 2);
    CHECK(golden.rules.size() == steps);
    const auto tf = build_rule_dataset(*m, method, corpus, Scenario::teacher_forcing, 2);
    REQUIRE(tf.rules.size() == steps);
    CHECK(tf.meta.method == method);
    CHECK(tf.meta.k == 2);

    std::size_t r = 0;
    for (std::size_t sid = 0; sid < corpus.size(); ++sid) {
      const auto& pair = corpus[sid];
      for (int t = 1; t <= pair.target_steps(); ++t, ++r) {
        const auto& rule = tf.rules[r];
        CHECK(rule.sentence_id == sid);
        CHECK(rule.t == t);
        CHECK(rule.source.size() == std::min<std::size_t>(2, pair.source.size()));
        CHECK(rule.target.size() == std::min<std::size_t>(2, static_cast<std::size_t>(t - 1)));
        for (const auto& w : rule.source) CHECK(pair.source[static_cast<std::size_t>(w.position - 1)] == w.token);
        for (const auto& w : rule.target) CHECK(pair.target[static_cast<std::size_t>(w.position)] == w.token);
        CHECK(rule.label == fidelity::nmt::nmt_forward(*m, fidelity::nmt::gold_context(pair, sid, t)).argmax());
        // scored at f(c_t) in both scenarios, so only the label differs
        CHECK(golden.rules[r].source == rule.source);
        CHECK(golden.rules[r].target == rule.target);
        CHECK(golden.rules[r].label == pair.target[static_cast<std::size_t>(t)]);
      }
    }
  }
  CHECK_THROWS_AS(build_rule_dataset(*m, Method::pd, std::vector<SentencePair>{}, Scenario::golden, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_rule_dataset(*small_model(ModelKind::rnn_search), Method::attn, corpus,
                                     Scenario::teacher_forcing, 1),
                  UnsupportedMethod);
}

TEST_CASE("real-decode rules follow the greedy output") {
  auto m = small_model();
  const auto corpus = small_corpus();
  ExtractionOptions opts;
  opts.decode_max_len = 6;
  const auto ds = build_rule_dataset(*m, Method::ngrad, corpus, Scenario::real_decode, 1, opts);
  std::size_t expected = 0;
  std::size_t r = 0;
  for (const auto& p : corpus) {
    const auto decoded = fidelity::nmt::greedy_decode(*m, p.source, 6);
    expected += decoded.tokens.size();
    for (std::size_t t = 0; t < decoded.tokens.size(); ++t, ++r) {
      REQUIRE(r < ds.rules.size());
      CHECK(ds.rules[r].label == decoded.tokens[t]);
      for (const auto& w : ds.rules[r].target) CHECK(decoded.tokens[static_cast<std::size_t>(w.position - 1)] == w.token);
    }
  }
  CHECK(ds.rules.size() == expected);
}

TEST_CASE("rules grow monotonically with k and are deterministic") {
  auto m = small_model();
  const auto corpus = small_corpus();
  for (Method method : fidelity::explain::all_methods) {
    const auto explained = explain_corpus(*m, method, corpus, Scenario::teacher_forcing);
    for (int k = 2; k <= 4; ++k) {
      const auto small = make_rules(explained, k - 1);
      const auto big = make_rules(explained, k);
      for (std::size_t i = 0; i < small.rules.size(); ++i) {
        CHECK(positional_subset(small.rules[i].source, big.rules[i].source));
        CHECK(positional_subset(small.rules[i].target, big.rules[i].target));
        CHECK(big.rules[i].source.size() + big.rules[i].target.size() <= static_cast<std::size_t>(2 * k));
      }
    }
    const auto again = build_rule_dataset(*m, method, corpus, Scenario::teacher_forcing, 2);
    CHECK(again.rules == make_rules(explained, 2).rules);
  }
  const auto all = make_rules(explain_corpus(*m, Method::pd, corpus, Scenario::teacher_forcing), 10);
  for (const auto& r : all.rules) {
    CHECK(r.source.size() == corpus[r.sentence_id].source.size());
    CHECK(r.target.size() == static_cast<std::size_t>(r.t - 1));
  }
}

TEST_CASE("density histogram bins unique rules by frequency") {
  RuleDataset distinct;
  for (int i = 0; i < 5; ++i) distinct.rules.push_back({{{4 + i, 1}}, {}, 4, 0, 1});
  auto h = density_histogram(distinct);
  CHECK(h.total == 5);
  CHECK(h.bins == std::array<std::size_t, 5>{5, 0, 0, 0, 0});

  RuleDataset repeated;
  for (int i = 0; i < 12; ++i) repeated.rules.push_back({{{4, 1 + i % 3}, {5, 2 + i % 2}}, {{6, 1}}, 7, 0, 2});
  // positions and order of equal multisets do not matter
  repeated.rules.back().source = {{5, 4}, {4, 9}};
  h = density_histogram(repeated);
  CHECK(h.total == 1);
  CHECK(h.bins == std::array<std::size_t, 5>{0, 0, 1, 0, 0});
  CHECK_THROWS_AS(density_histogram(RuleDataset{}), std::invalid_argument);
}

TEST_CASE("density histogram matches a hash-count oracle") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> tok(4, 6);
  RuleDataset ds;
  for (int i = 0; i < 3000; ++i) {
    RuleInstance r;
    r.source = {{tok(rng), 1}, {tok(rng), 2}};
    if (i % 2) r.target = {{tok(rng), 1}};
    r.label = tok(rng);
    ds.rules.push_back(r);
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& r : ds.rules) {
    std::vector<int> s, t;
    for (const auto& w : r.source) s.push_back(w.token);
    for (const auto& w : r.target) t.push_back(w.token);
    std::sort(s.begin(), s.end());
    std::sort(t.begin(), t.end());
    std::ostringstream key;
    for (int x : s) key << x << ',';
    key << '|';
    for (int x : t) key << x << ',';
    key << '|' << r.label;
    ++counts[key.str()];
  }
  std::array<std::size_t, 5> bins{};
  for (const auto& [k, n] : counts) {
    const double edges[] = {1, 10, 100, 1000};
    std::size_t b = 0;
    while (b < 4 && static_cast<double>(n) > edges[b]) ++b;
    ++bins[b];
  }
  const auto h = density_histogram(ds);
  CHECK(h.total == counts.size());
  CHECK(h.bins == bins);
  std::size_t sum = 0;
  for (auto b : h.bins) sum += b;
  CHECK(sum == h.total);
}

TEST_CASE("rule files round trip with a fixed field order") {
  auto m = small_model();
  auto ds = build_rule_dataset(*m, Method::wgrad, small_corpus(), Scenario::teacher_forcing, 2);
  ds.meta.model_id = "model-a";
  ds.meta.corpus_id = "corpus-b";
  const auto path = std::filesystem::temp_directory_path() / "fidelity_rules_test.jsonl";
  write_rules(path, ds);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first.rfind(R"({"sid":0,"t":1,"scenario":"teacher-forcing","method":"wgrad","k":2,"src":[[)", 0) == 0);
  CHECK(first.find(R"("tgt":[],"label":)") != std::string::npos);
  const auto back = read_rules(path);
  CHECK(back.meta == ds.meta);
  CHECK(back.rules == ds.rules);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".meta.json");
}

TEST_CASE("copy model PD rules pick the aligned source word") {
  const auto& toy = trained_transformer();
  const std::span<const SentencePair> some(toy.test.data(), 30);
  const auto ds = build_rule_dataset(*toy.model, Method::pd, some, Scenario::teacher_forcing, 1);
  int hits = 0, total = 0;
  for (const auto& r : ds.rules) {
    const auto& pair = some[r.sentence_id];
    if (r.t >= pair.target_steps()) continue;  // EOS step
    const TokenId x_t = pair.source[static_cast<std::size_t>(r.t - 1)];
    hits += r.source == std::vector<Word>{{x_t, r.t}} &&
            toy.target_vocab.token(r.label) == toy.source_vocab.token(x_t);
    ++total;
  }
  MESSAGE("aligned PD rules " << hits << " / " << total);
  CHECK(static_cast<double>(hits) / total >= 0.9);
}
