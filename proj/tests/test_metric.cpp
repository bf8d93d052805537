#include "doctest.h"

#include "fidelity/metric/metric.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace fidelity::metric;
using fidelity::explain::Method;
using fidelity::nmt::Context;
using fidelity::nmt::make_model;
using fidelity::nmt::make_sentence_pair;
using fidelity::nmt::ModelKind;
using fidelity::nmt::Occlusion;
using fidelity::nmt::SentencePair;
using fidelity::rules::Scenario;
using fidelity::rules::Word;

namespace {

constexpr int vocab = 20;

RuleInstance rule(std::vector<Word> source, std::vector<Word> target, TokenId label) {
  RuleInstance r;
  r.source = std::move(source);
  r.target = std::move(target);
  r.label = label;
  return r;
}

RuleDataset dataset(int k, std::vector<RuleInstance> rules, Method method = Method::pd,
                    Scenario scenario = Scenario::teacher_forcing) {
  RuleDataset ds;
  ds.meta.method = method;
  ds.meta.k = k;
  ds.meta.scenario = scenario;
  ds.rules = std::move(rules);
  return ds;
}

// k=1 rules whose label is a fixed permutation of the source word.
RuleDataset bijection_rules(int n, std::uint64_t seed) {
  std::vector<TokenId> perm(vocab - 4);
  std::iota(perm.begin(), perm.end(), 4);
  std::mt19937_64 map_rng(99);
  std::shuffle(perm.begin(), perm.end(), map_rng);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> word(4, vocab - 1), pos(1, 10);
  std::vector<RuleInstance> rules;
  for (int i = 0; i < n; ++i) {
    const int s = word(rng);
    auto r = rule({{s, pos(rng)}}, {{word(rng), pos(rng)}}, perm[static_cast<std::size_t>(s - 4)]);
    r.sentence_id = static_cast<std::size_t>(i);
    rules.push_back(r);
  }
  return dataset(1, std::move(rules));
}

ProxyTrainConfig quick(int epochs) {
  ProxyTrainConfig c;
  c.epochs = epochs;
  c.patience = epochs;
  return c;
}

MetricConfig small_metric(int epochs) {
  MetricConfig c;
  c.dims = {16, 16, 32};
  c.train = quick(epochs);
  c.seed = 5;
  return c;
}

const RuleInstance sample = rule({{5, 2}, {9, 4}}, {{7, 1}}, 6);

}  // namespace

TEST_CASE("perplexity: exp of the mean NLL") {
  const std::vector<double> two{std::log(2.0), std::log(8.0)};
  CHECK(perplexity(two) == doctest::Approx(4.0).epsilon(1e-12));
  const std::vector<double> zeros(7, 0.0);
  CHECK(perplexity(zeros) == 1.0);
  CHECK_THROWS_AS(perplexity(std::span<const double>{}), std::invalid_argument);
}

TEST_CASE("proxy: zeroed output layer gives the uniform distribution and PPL = |V|") {
  for (ProxyKind kind : all_proxy_kinds) {
    ProxyModel q(kind, 2, vocab, vocab, {16, 16, 32}, 3);
    q.zero_output_layer();
    for (float p : proxy_forward(q, sample)) CHECK(p == doctest::Approx(1.0 / vocab).epsilon(1e-6));
    const auto ds = dataset(2, {sample, rule({{4, 1}}, {}, 9), rule({}, {{11, 3}, {12, 4}}, 4)});
    const double ppl = ppl_on_rules(q, ds);
    CHECK(std::abs(ppl - vocab) / vocab < 1e-6);
  }
}

TEST_CASE("proxy: a label with all the mass gives PPL = 1") {
  ProxyModel q(ProxyKind::sa, 1, vocab, vocab, {16, 16, 32}, 3);
  q.zero_output_layer();
  q.parameters().value(q.parameters().at("out.b"))(0, 8) = 1e4f;
  const auto ds = dataset(1, {rule({{5, 1}}, {{6, 1}}, 8), rule({{4, 3}}, {}, 8)});
  CHECK(ppl_on_rules(q, ds) == 1.0);
}

TEST_CASE("proxy: impossible labels are clamped at -log(1e-12)") {
  ProxyModel q(ProxyKind::fn, 1, vocab, vocab, {16, 16, 32}, 3);
  q.zero_output_layer();
  q.parameters().value(q.parameters().at("out.b"))(0, 8) = -1e4f;
  const std::vector<RuleInstance> rules{rule({{5, 1}}, {{6, 1}}, 8)};
  CHECK(rule_nlls(q, rules).front() == doctest::Approx(-std::log(1e-12)));
  CHECK(ppl_on_rules(q, dataset(1, rules)) == doctest::Approx(1e12).epsilon(1e-9));
}

TEST_CASE("proxy: distributions sum to one for partial and empty rules") {
  for (ProxyKind kind : all_proxy_kinds) {
    for (int k = 1; k <= 3; ++k) {
      ProxyModel q(kind, k, vocab, vocab, {16, 16, 32}, 7);
      for (const auto& r : {rule({{5, 1}}, {}, 4), rule({}, {}, 4), rule({{5, 3}}, {{8, 2}}, 4)}) {
        const auto p = proxy_forward(q, r);
        REQUIRE(p.size() == static_cast<std::size_t>(vocab));
        CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("proxy: rejects oversized rules and foreign vocabularies") {
  ProxyModel q(ProxyKind::rn, 1, vocab, vocab, {16, 16, 32}, 7);
  CHECK_THROWS_AS(proxy_forward(q, sample), std::invalid_argument);
  CHECK_THROWS_AS(proxy_forward(q, rule({{vocab, 1}}, {}, 4)), std::out_of_range);
  CHECK_THROWS_AS(proxy_forward(q, rule({}, {{-1, 1}}, 4)), std::out_of_range);
  const std::vector<RuleInstance> bad_label{rule({{5, 1}}, {}, vocab + 3)};
  CHECK_THROWS_AS(rule_nlls(q, bad_label), std::out_of_range);
  CHECK_THROWS_AS(parse_proxy_kind("CNN"), std::invalid_argument);
  CHECK(parse_proxy_kind("sa") == ProxyKind::sa);
}

TEST_CASE("proxy: FN is bitwise invariant to slot order and word positions") {
  ProxyModel q(ProxyKind::fn, 3, vocab, vocab, {16, 16, 32}, 7);
  const auto a = proxy_forward(q, rule({{5, 1}, {9, 2}, {5, 7}}, {{3, 1}, {12, 2}}, 4));
  const auto b = proxy_forward(q, rule({{9, 6}, {5, 2}, {5, 4}}, {{12, 9}, {3, 1}}, 4));
  CHECK(a == b);
}

TEST_CASE("proxy: rows of a batch do not see each other") {
  for (ProxyKind kind : all_proxy_kinds) {
    ProxyModel q(kind, 2, vocab, vocab, {16, 16, 32}, 7);
    const std::vector<RuleInstance> rules{sample, rule({{4, 1}}, {}, 9), rule({}, {{11, 3}, {12, 4}}, 4),
                                          rule({{15, 2}, {16, 3}}, {{17, 1}, {18, 2}}, 5)};
    const auto batched = rule_nlls(q, rules, 4);
    const auto single = rule_nlls(q, rules, 1);
    for (std::size_t i = 0; i < rules.size(); ++i) CHECK(batched[i] == doctest::Approx(single[i]).epsilon(1e-5));
  }
}

TEST_CASE("proxy: trained SA reacts to swapped positions") {
  auto ds = bijection_rules(400, 1);
  ProxyModel q(ProxyKind::sa, 1, vocab, vocab, {16, 16, 32}, 7);
  train_proxy(q, ds, quick(1));
  const auto a = proxy_forward(q, rule({{5, 2}}, {{9, 7}}, 4));
  const auto b = proxy_forward(q, rule({{5, 7}}, {{9, 2}}, 4));
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
  CHECK(diff > 1e-5);
}

TEST_CASE("train_proxy: zero epochs keep the initialization") {
  ProxyModel q(ProxyKind::rn, 1, vocab, vocab, {16, 16, 32}, 7);
  const ProxyModel fresh(ProxyKind::rn, 1, vocab, vocab, {16, 16, 32}, 7);
  const auto report = train_proxy(q, bijection_rules(50, 2), quick(0));
  CHECK(report.best_epoch == 0);
  for (std::uint32_t i = 0; i < q.parameters().size(); ++i) {
    CHECK(q.parameters().value(fidelity::ad::ParamId{i}) == fresh.parameters().value(fidelity::ad::ParamId{i}));
  }
}

TEST_CASE("train_proxy: constant labels are learned within five epochs") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> word(4, vocab - 1);
  std::vector<RuleInstance> rules;
  for (int i = 0; i < 4000; ++i) rules.push_back(rule({{word(rng), 1}}, {{word(rng), 2}}, 13));
  const auto ds = dataset(1, rules);
  for (ProxyKind kind : all_proxy_kinds) {
    ProxyModel q(kind, 1, vocab, vocab, {}, 7);
    train_proxy(q, ds, quick(5));
    CHECK(ppl_on_rules(q, ds) < 1.05);
  }
}

TEST_CASE("train_proxy: FN learns a bijective source-to-label map") {
  ProxyModel q(ProxyKind::fn, 1, vocab, vocab, {}, 7);
  const auto report = train_proxy(q, bijection_rules(3000, 3), {});
  CHECK(report.best_epoch > 0);
  CHECK(ppl_on_rules(q, bijection_rules(500, 4)) < 1.2);
}

TEST_CASE("train_proxy: rejects bad input and reports divergence") {
  ProxyModel q(ProxyKind::fn, 1, vocab, vocab, {16, 16, 32}, 7);
  CHECK_THROWS_AS(train_proxy(q, dataset(1, {}), quick(1)), std::invalid_argument);
  CHECK_THROWS_AS(train_proxy(q, dataset(2, {sample}), quick(1)), std::invalid_argument);
  auto cfg = quick(3);
  cfg.learning_rate = std::nan("");
  try {
    train_proxy(q, bijection_rules(200, 5), cfg);
    FAIL("expected divergence");
  } catch (const ProxyDiverged& e) {
    CHECK(e.epoch() == 1);
  }
}

TEST_CASE("train_proxy: the training curve is written") {
  const auto path = std::filesystem::temp_directory_path() / "proxy_curve.tsv";
  auto cfg = quick(2);
  cfg.log_path = path;
  ProxyModel q(ProxyKind::fn, 1, vocab, vocab, {16, 16, 32}, 7);
  const auto report = train_proxy(q, bijection_rules(200, 6), cfg);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 4);
  CHECK(report.log.size() == 3);
  CHECK(report.best_valid_ppl <= report.log.front().valid_ppl);
  std::filesystem::remove(path);
}

TEST_CASE("metric_score: Comb is the minimum over independently trained members") {
  const auto train = bijection_rules(300, 7);
  const auto test = bijection_rules(100, 8);
  const auto cfg = small_metric(2);
  const auto comb = metric_score("Comb", train, test, vocab, vocab, cfg);
  REQUIRE(comb.per_proxy_ppl.size() == 3);
  double best = 1e300;
  for (const auto& [name, ppl] : comb.per_proxy_ppl) {
    const auto single = metric_score(name, train, test, vocab, vocab, cfg);
    CHECK(single.metric_ppl == ppl);
    CHECK(single.winner == name);
    CHECK(ppl >= 1.0);
    best = std::min(best, ppl);
  }
  CHECK(comb.metric_ppl == best);
  CHECK(comb.per_proxy_ppl.at(comb.winner) == comb.metric_ppl);
  CHECK(comb.n_train == 300);
  CHECK(comb.n_test == 100);
}

TEST_CASE("metric_score: reruns are bitwise identical") {
  const auto train = bijection_rules(300, 9);
  const auto test = bijection_rules(100, 10);
  const auto a = metric_score("Comb", train, test, vocab, vocab, small_metric(2));
  const auto b = metric_score("Comb", train, test, vocab, vocab, small_metric(2));
  CHECK(a.per_proxy_ppl == b.per_proxy_ppl);
  CHECK(report_to_json(a).dump() == report_to_json(b).dump());
}

TEST_CASE("metric_score: train and test meta must agree") {
  const auto train = bijection_rules(50, 11);
  auto test = bijection_rules(20, 12);
  test.meta.scenario = Scenario::golden;
  CHECK_THROWS_AS(metric_score("FN", train, test, vocab, vocab, small_metric(1)), std::invalid_argument);
  test.meta.scenario = Scenario::teacher_forcing;
  test.meta.method = Method::ngrad;
  CHECK_THROWS_AS(metric_score("FN", train, test, vocab, vocab, small_metric(1)), std::invalid_argument);
  CHECK_THROWS_AS(metric_score("XL", train, train, vocab, vocab, small_metric(1)), std::invalid_argument);
}

TEST_CASE("evaluate_family: a fitted family transfers across scenarios only") {
  const auto fitted = fit_family("FN", bijection_rules(100, 13), vocab, vocab, small_metric(1));
  auto golden = bijection_rules(30, 14);
  golden.meta.scenario = Scenario::golden;
  const auto report = evaluate_family(fitted, golden);
  CHECK(report.scenario == Scenario::golden);
  golden.meta.k = 2;
  CHECK_THROWS_AS(evaluate_family(fitted, golden), std::invalid_argument);
}

TEST_CASE("save_family: reloaded members score identically") {
  const auto fitted = fit_family("Comb", bijection_rules(200, 15), vocab, vocab, small_metric(1));
  const auto prefix = std::filesystem::temp_directory_path() / "fidelity_family" / "pd.k1";
  CHECK(save_family(prefix, fitted).size() == 3);
  const auto loaded = load_family(prefix, "Comb");
  const auto test = bijection_rules(50, 16);
  CHECK(report_to_json(evaluate_family(loaded, test)).dump() == report_to_json(evaluate_family(fitted, test)).dump());
  CHECK(load_family(prefix, "SA").members.size() == 1);
  CHECK_THROWS(load_family(prefix.string() + "x", "FN"));
}

TEST_CASE("MetricReport: JSON round trip with a fixed key order") {
  MetricReport r;
  r.method = Method::wgrad;
  r.k = 3;
  r.scenario = Scenario::real_decode;
  r.family = "Comb";
  r.per_proxy_ppl = {{"FN", 3.5}, {"RN", 2.25}, {"SA", 2.5}};
  r.metric_ppl = 2.25;
  r.winner = "RN";
  r.n_train = 10;
  r.n_test = 4;
  r.seed = 17;
  const auto j = report_to_json(r);
  std::vector<std::string> keys;
  for (const auto& [key, _] : j.items()) keys.push_back(key);
  CHECK(keys == std::vector<std::string>{"method", "k", "scenario", "family", "per_proxy_ppl", "metric_ppl",
                                         "winner", "n_train", "n_test", "seed"});
  const auto back = report_from_json(nlohmann::ordered_json::parse(j.dump()));
  CHECK(report_to_json(back).dump() == j.dump());
}

namespace {

std::vector<SentencePair> baseline_corpus() {
  return {make_sentence_pair(std::vector<TokenId>{4, 5, 6}, std::vector<TokenId>{7, 8, 9}),
          make_sentence_pair(std::vector<TokenId>{6, 4}, std::vector<TokenId>{10, 11})};
}

}  // namespace

TEST_CASE("baseline: a rule covering the whole context is the unmasked model") {
  const auto model = make_model(ModelKind::transformer, {8, 12}, 14, 14, 4);
  const auto corpus = baseline_corpus();
  for (Scenario scenario : {Scenario::teacher_forcing, Scenario::real_decode}) {
    const auto rules =
        fidelity::rules::build_rule_dataset(*model, Method::attn, corpus, scenario, 8, {.decode_max_len = 6});
    const auto base = baseline_score(*model, rules, corpus, 6);
    REQUIRE(base.nlls.size() == rules.rules.size());
    for (std::size_t i = 0; i < rules.rules.size(); ++i) {
      const auto& r = rules.rules[i];
      Context ctx;
      ctx.source = corpus[r.sentence_id].source;
      for (const auto& w : r.target) ctx.prefix.push_back(w.token);
      REQUIRE(ctx.prefix.size() == static_cast<std::size_t>(r.t - 1));
      const auto p = fidelity::nmt::nmt_forward(*model, ctx);
      CHECK(base.nlls[i] == doctest::Approx(-p.log_dist[static_cast<std::size_t>(r.label)]).epsilon(1e-6));
    }
  }
}

TEST_CASE("baseline: an empty rule sees only BOS") {
  const auto model = make_model(ModelKind::rnn_search, {8, 12}, 14, 14, 4);
  const auto corpus = baseline_corpus();
  auto r = rule({}, {}, 9);
  r.sentence_id = 0;
  r.t = 3;
  const auto base = baseline_score(*model, dataset(1, {r}), corpus);
  Context ctx;
  ctx.source = corpus[0].source;
  ctx.prefix = {7, 8};
  Occlusion all;
  all.source.assign(ctx.source.size(), true);
  all.target = {false, true, true};
  const auto p = fidelity::nmt::nmt_forward(*model, ctx, &all);
  CHECK(base.nlls.front() == doctest::Approx(-p.log_dist[9]).epsilon(1e-6));
}

TEST_CASE("baseline: provenance must match the corpus") {
  const auto model = make_model(ModelKind::transformer, {8, 12}, 14, 14, 4);
  const auto corpus = baseline_corpus();
  auto r = rule({{5, 2}}, {{7, 1}}, 9);
  r.t = 2;
  CHECK_NOTHROW(baseline_score(*model, dataset(1, {r}), corpus));
  auto far = r;
  far.sentence_id = 9;
  CHECK_THROWS_AS(baseline_score(*model, dataset(1, {far}), corpus), std::out_of_range);
  auto late = r;
  late.t = 5;
  CHECK_THROWS_AS(baseline_score(*model, dataset(1, {late}), corpus), std::out_of_range);
  auto wrong = r;
  wrong.source = {{6, 2}};
  CHECK_THROWS_AS(baseline_score(*model, dataset(1, {wrong}), corpus), std::invalid_argument);
  auto ahead = r;
  ahead.target = {{8, 2}};
  CHECK_THROWS_AS(baseline_score(*model, dataset(1, {ahead}), corpus), std::invalid_argument);
  CHECK_THROWS_AS(baseline_score(*model, dataset(1, {}), corpus), std::invalid_argument);
}
