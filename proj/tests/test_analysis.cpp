#include "doctest.h"

#include "fidelity/analysis/aer.hpp"
#include "fidelity/analysis/pipeline.hpp"
#include "fidelity/analysis/report.hpp"
#include "support/toy_model.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace fidelity::analysis;
using fidelity::explain::Method;
using fidelity::metric::MetricReport;
using fidelity::rules::RuleDataset;
using fidelity::rules::RuleInstance;
using fidelity::rules::Scenario;

namespace {

AlignmentSet alignment(std::size_t sid, std::set<Link> sure, std::set<Link> possible, int length = 0) {
  for (const auto& l : sure) possible.insert(l);
  AlignmentSet a;
  a[sid] = {std::move(sure), std::move(possible), length};
  return a;
}

RuleInstance k1_rule(std::size_t sid, int t, int source_pos) {
  RuleInstance r;
  r.sentence_id = sid;
  r.t = t;
  r.source = {{5, source_pos}};
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fidelity_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

RunConfig tiny_config(const std::filesystem::path& out) {
  RunConfig c;
  c.toy_pairs = 240;
  c.test_pairs = 40;
  c.nmt_epochs = 1;
  c.model_dims = {16, 24};
  c.methods = {Method::pd, Method::ngrad};
  c.family = "Comb";
  c.proxy_dims = {16, 16, 32};
  c.proxy_epochs = 2;
  c.proxy_patience = 2;
  c.out_dir = out;
  return c;
}

const Workspace& tiny_workspace() {
  static const Workspace ws = prepare_workspace(tiny_config("unused"));
  return ws;
}

}  // namespace

TEST_CASE("aer: formula examples") {
  CHECK(compute_aer(alignment(0, {{1, 1}}, {}), alignment(0, {{1, 1}}, {})).aer == 0.0);
  CHECK(compute_aer(alignment(0, {{1, 2}}, {}), alignment(0, {{1, 1}}, {})).aer == 1.0);
  const auto mixed = compute_aer(alignment(0, {{1, 1}, {2, 2}}, {}), alignment(0, {{1, 1}}, {{3, 2}}));
  CHECK(mixed.aer == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(mixed.scored_links == 2);
}

TEST_CASE("aer: unaligned gold targets are skipped and counted") {
  // three sentences, target lengths 3, 2 and 4; gold leaves 1 + 0 + 2 targets unaligned
  AlignmentSet hyp, gold;
  hyp[0] = {{{1, 1}, {2, 2}, {2, 3}}, {{1, 1}, {2, 2}, {2, 3}}, 3};
  gold[0] = {{{1, 1}, {3, 3}}, {{1, 1}, {3, 3}}, 0};
  hyp[1] = {{{1, 1}, {1, 2}}, {{1, 1}, {1, 2}}, 2};
  gold[1] = {{{2, 1}}, {{2, 1}, {1, 2}}, 0};
  hyp[2] = {{{1, 1}, {2, 2}, {3, 3}, {4, 4}}, {{1, 1}, {2, 2}, {3, 3}, {4, 4}}, 4};
  gold[2] = {{{1, 1}, {4, 4}}, {{1, 1}, {4, 4}}, 0};
  const auto r = compute_aer(hyp, gold);
  CHECK(r.target_tokens == 9);
  CHECK(r.skipped_targets == 3);
  CHECK(r.skipped_fraction == doctest::Approx(3.0 / 9.0).epsilon(1e-15));
  CHECK(r.hypothesis_links == 9);
  CHECK(r.scored_links == 6);
  // |A∩S| = 1 + 0 + 2, |A∩P| = 1 + 1 + 2, |S| = 2 + 1 + 2
  CHECK(r.aer == doctest::Approx(1.0 - 7.0 / 11.0).epsilon(1e-15));
}

TEST_CASE("aer: bounds and rejection") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> pos(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    AlignmentSet hyp, gold;
    for (std::size_t sid = 0; sid < 3; ++sid) {
      auto& h = hyp[sid];
      auto& g = gold[sid];
      for (int i = 0; i < 5; ++i) {
        const Link l{pos(rng), pos(rng)};
        h.sure.insert(l);
        h.possible.insert(l);
      }
      for (int i = 0; i < 4; ++i) {
        const Link l{pos(rng), pos(rng)};
        if (i % 2 == 0) g.sure.insert(l);
        g.possible.insert(l);
      }
    }
    const double aer = compute_aer(hyp, gold).aer;
    CHECK(aer >= 0.0);
    CHECK(aer <= 1.0);
  }
  CHECK_THROWS_AS(compute_aer(alignment(0, {{1, 1}}, {}), alignment(1, {{1, 1}}, {})), std::invalid_argument);
  CHECK(compute_aer(alignment(0, {{2, 1}}, {}), alignment(0, {{1, 1}}, {{3, 1}})).aer == 1.0);
}

TEST_CASE("derive_alignment: one link per decision point from the top source word") {
  RuleDataset ds;
  ds.meta.k = 1;
  ds.rules = {k1_rule(0, 1, 1), k1_rule(0, 2, 3), k1_rule(4, 1, 2)};
  const auto a = derive_alignment(ds);
  REQUIRE(a.size() == 2);
  CHECK(a.at(0).possible == std::set<Link>{{1, 1}, {3, 2}});
  CHECK(a.at(0).target_length == 2);
  CHECK(a.at(4).sure == std::set<Link>{{2, 1}});
  std::size_t links = 0;
  for (const auto& [_, s] : a) links += s.possible.size();
  CHECK(links == ds.rules.size());

  RuleDataset single;
  single.meta.k = 1;
  single.rules = {k1_rule(0, 2, 3)};
  CHECK(derive_alignment(single).at(0).possible == std::set<Link>{{3, 2}});

  ds.meta.k = 2;
  CHECK_THROWS_AS(derive_alignment(ds), std::invalid_argument);
  ds.meta.k = 1;
  ds.meta.scenario = Scenario::real_decode;
  CHECK_THROWS_AS(derive_alignment(ds), std::invalid_argument);
}

TEST_CASE("alignment files: sure and possible links round trip") {
  std::istringstream in("0 1-1 2?2\n\n3 4-1\n3 2?5\n");
  const auto a = parse_alignment(in);
  REQUIRE(a.size() == 2);
  CHECK(a.at(0).sure == std::set<Link>{{1, 1}});
  CHECK(a.at(0).possible == std::set<Link>{{1, 1}, {2, 2}});
  CHECK(a.at(3).possible.size() == 2);
  const auto path = scratch_dir("align") / "gold.txt";
  write_alignment(path, a);
  const auto back = read_alignment(path);
  CHECK(back.at(0).sure == a.at(0).sure);
  CHECK(back.at(3).possible == a.at(3).possible);

  for (const char* bad : {"0 1x1\n", "x 1-1\n", "0 0-1\n", "0 1-\n", "0 1-2a\n"}) {
    std::istringstream b(bad);
    CHECK_THROWS_AS(parse_alignment(b), std::invalid_argument);
  }
}

TEST_CASE("derive_alignment: occlusion rules on the trained copy model are diagonal") {
  const auto& toy = fidelity::testing::trained_transformer();
  const std::vector<fidelity::nmt::SentencePair> pairs(toy.test.begin(), toy.test.begin() + 40);
  const auto rules = fidelity::rules::build_rule_dataset(*toy.model, Method::pd, pairs, Scenario::teacher_forcing, 1);
  const auto hyp = derive_alignment(rules);
  AlignmentSet gold;
  for (std::size_t sid = 0; sid < pairs.size(); ++sid) {
    const int words = static_cast<int>(pairs[sid].source.size()) - 1;  // EOS excluded
    for (int i = 1; i <= words; ++i) {
      gold[sid].sure.insert({i, i});
      gold[sid].possible.insert({i, i});
    }
  }
  const auto r = compute_aer(hyp, gold);
  MESSAGE("copy-task AER " << r.aer << ", skipped " << r.skipped_fraction);
  CHECK(r.aer < 0.15);
  CHECK(r.skipped_targets == pairs.size());  // the EOS step of every sentence
}

TEST_CASE("bootstrap_stability: strict dominance gives 100% everywhere") {
  MethodNlls a{"pd", {{"SA", {}}}}, b{"wgrad", {{"SA", {}}}};
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> low(0.1, 1.0), high(1.5, 4.0);
  for (int i = 0; i < 500; ++i) {
    a.by_scorer["SA"].push_back(low(rng));
    b.by_scorer["SA"].push_back(high(rng));
  }
  StabilityConfig cfg;
  cfg.resamples = 200;
  const auto t = bootstrap_stability({b, a}, {{"SA", {"SA"}}}, cfg);
  for (const auto& row : t.rates) CHECK(row == std::vector<double>{100.0});
  CHECK(t.reference_rankings.at("SA") == std::vector<std::string>{"pd", "wgrad"});
}

TEST_CASE("bootstrap_stability: full draw without replacement reproduces the reference") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(1.0, 0.5);
  std::vector<MethodNlls> methods;
  for (const char* m : {"attn", "pd", "ngrad"}) {
    MethodNlls mn{m, {}};
    for (const char* s : {"FN", "RN", "SA", "Base"}) {
      for (int i = 0; i < 80; ++i) mn.by_scorer[s].push_back(std::abs(noise(rng)));
    }
    methods.push_back(mn);
  }
  StabilityConfig cfg;
  cfg.fractions = {1.0};
  cfg.resamples = 20;
  cfg.with_replacement = false;
  const auto t = bootstrap_stability(methods, default_instantiations(true), cfg);
  CHECK(t.columns == std::vector<std::string>{"Base", "FN", "RN", "SA", "Comb"});
  CHECK(t.rates.front() == std::vector<double>(5, 100.0));

  cfg = {};
  cfg.resamples = 50;
  const auto x = bootstrap_stability(methods, default_instantiations(true), cfg);
  const auto y = bootstrap_stability(methods, default_instantiations(true), cfg);
  CHECK(x.rates == y.rates);
  for (const auto& row : x.rates) {
    for (double v : row) CHECK((v >= 0.0 && v <= 100.0));
  }
  std::vector<std::size_t> sentence(80);
  for (std::size_t i = 0; i < sentence.size(); ++i) sentence[i] = i / 4;
  cfg.unit = ResampleUnit::sentence;
  cfg.fractions = {0.2, 1.0};
  CHECK_NOTHROW(bootstrap_stability(methods, default_instantiations(false), cfg, sentence));
  CHECK_THROWS_AS(bootstrap_stability(methods, default_instantiations(false), cfg), std::invalid_argument);
}

TEST_CASE("bootstrap_stability: rejects degenerate inputs") {
  MethodNlls a{"pd", {{"SA", {1.0, 2.0}}}}, b{"attn", {{"SA", {1.0, 3.0}}}};
  StabilityConfig cfg;
  cfg.fractions = {0.01};
  CHECK_THROWS_AS(bootstrap_stability({a, b}, {{"SA", {"SA"}}}, cfg), std::invalid_argument);
  cfg.fractions = {0.5};
  CHECK_THROWS_AS(bootstrap_stability({a}, {{"SA", {"SA"}}}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(bootstrap_stability({a, b}, {{"FN", {"FN"}}}, cfg), std::invalid_argument);
  b.by_scorer["SA"].push_back(4.0);
  CHECK_THROWS_AS(bootstrap_stability({a, b}, {{"SA", {"SA"}}}, cfg), std::invalid_argument);
}

namespace {

MetricReport report(Method m, int k, double ppl) {
  MetricReport r;
  r.method = m;
  r.k = k;
  r.family = "Comb";
  r.per_proxy_ppl = {{"FN", ppl + 1.0}, {"RN", ppl + 0.5}, {"SA", ppl}};
  r.metric_ppl = ppl;
  r.winner = "SA";
  r.n_train = 100;
  r.n_test = 10;
  return r;
}

}  // namespace

TEST_CASE("emit_report: csv, json and plot data") {
  const auto dir = scratch_dir("report");
  emit_report({report(Method::pd, 1, 2.5)}, ReportFormat::csv, dir / "one.csv");
  std::istringstream lines(slurp(dir / "one.csv"));
  std::string header, row, extra;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header == "method,k,scenario,family,metric_ppl,winner,n_train,n_test,seed,FN,RN,SA");
  CHECK(row == "pd,1,teacher-forcing,Comb,2.5,SA,100,10,0,3.5,3,2.5");
  CHECK_FALSE(std::getline(lines, extra));

  const std::vector<MetricReport> sweep{report(Method::pd, 4, 1.5), report(Method::pd, 1, 2.5),
                                        report(Method::attn, 1, 9.0)};
  emit_report(sweep, ReportFormat::json, dir / "a.json");
  emit_report(sweep, ReportFormat::json, dir / "b.json");
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
  CHECK(nlohmann::json::parse(slurp(dir / "a.json")).size() == 3);

  const auto files = emit_report(sweep, ReportFormat::plot_data, dir / "plot");
  REQUIRE(files.size() == 2);
  CHECK(slurp(dir / "plot" / "pd.Comb.teacher-forcing.dat") == "1 2.5\n4 1.5\n");
  CHECK_THROWS_AS(parse_report_format("xlsx"), std::invalid_argument);
  CHECK_THROWS_AS(emit_report({}, ReportFormat::csv, dir / "none.csv"), std::invalid_argument);
}

TEST_CASE("report tables: metric matrix, density, stability and rank markers") {
  auto pd = report(Method::pd, 1, 2.0);
  pd.per_proxy_ppl["RN"] = 1.75;
  const auto matrix = metric_matrix({pd, report(Method::wgrad, 1, 8.0)}, {{"pd", 40.0}, {"wgrad", 90.0}});
  CHECK(matrix == "metric,pd,wgrad\nBase,40,90\nFN,3,9\nRN,1.75,8.5\nSA,2,8\nComb,1.75,8\n");

  fidelity::rules::DensityHistogram h;
  h.total = 6;
  h.bins = {3, 2, 1, 0, 0};
  CHECK(density_table({{"pd", h}}) == "method,total,B1,B2,B3,B4,B5\npd,6,3,2,1,0,0\n");

  StabilityTable st;
  st.fractions = {0.01, 1.0};
  st.columns = {"Base", "SA"};
  st.rates = {{53.0, 99.9}, {75.4, 100.0}};
  CHECK(stability_csv(st) == "fraction,Base,SA\n0.01,53.0,99.9\n1,75.4,100.0\n");

  const auto ranks = rank_comparison({{"attn", 27.3, 42.1}, {"pd", 7.7, 32.7}, {"ngrad", 16.5, 49.3},
                                      {"wgrad", 263.5, 79.2}});
  CHECK(ranks ==
        "method,ppl,ppl_rank,aer,aer_rank\nattn,27.3,3*,42.1,2*\npd,7.7,1,32.7,1\nngrad,16.5,2*,49.3,3*\n"
        "wgrad,263.5,4,79.2,4\n");
}

TEST_CASE("RunConfig: parse, print and validate") {
  std::istringstream in("# toy run\nk = 2\nmethods = pd, wgrad\nfamily=SA\nks = 1,2,4\nfractions = 0.1, 1\n"
                        "baseline = false  # no masked model\nresample_unit = sentence\n");
  const auto c = parse_run_config(in);
  CHECK(c.k == 2);
  CHECK(c.methods == std::vector<Method>{Method::pd, Method::wgrad});
  CHECK(c.family == "SA");
  CHECK(c.ks == std::vector<int>{1, 2, 4});
  CHECK(c.fractions == std::vector<double>{0.1, 1.0});
  CHECK_FALSE(c.baseline);
  CHECK(c.resample_unit == ResampleUnit::sentence);
  std::istringstream again(to_text(c));
  CHECK(to_text(parse_run_config(again)) == to_text(c));
  CHECK_NOTHROW(validate(c));

  for (const char* bad : {"colour = red\n", "k = two\n", "k\n", "methods = lime\n", "baseline = maybe\n",
                          "k = 3x\n"}) {
    std::istringstream b(bad);
    CHECK_THROWS_AS(parse_run_config(b), ConfigError);
  }
  auto v = c;
  v.ks = {2, 1};
  CHECK_THROWS_AS(validate(v), ConfigError);
  v = c;
  v.checkpoint = "/nonexistent/model.ckpt";
  CHECK_THROWS_AS(validate(v), ConfigError);
  v = c;
  v.source_corpus = "data/toy.src";
  CHECK_THROWS_AS(validate(v), ConfigError);
  v = c;
  v.family = "Mix";
  CHECK_THROWS_AS(validate(v), ConfigError);
}

TEST_CASE("sweeps: degenerate settings reproduce the plain run") {
  const auto& ws = tiny_workspace();
  auto cfg = tiny_config(scratch_dir("sweep"));
  cfg.methods = {Method::pd};
  const auto plain = run_pipeline(cfg, ws, false);
  REQUIRE(plain.runs.size() == 1);
  const auto expected = fidelity::metric::report_to_json(plain.runs[0].report).dump();

  const auto ks = k_sweep(cfg, ws, {1});
  REQUIRE(ks.size() == 1);
  CHECK(fidelity::metric::report_to_json(ks[0]).dump() == expected);

  const auto sizes = sample_size_sweep(cfg, ws, {ws.train.size() / 2, ws.train.size()});
  REQUIRE(sizes.size() == 2);
  CHECK(fidelity::metric::report_to_json(sizes[1]).dump() == expected);
  CHECK(sizes[0].n_train < sizes[1].n_train);
  CHECK_THROWS_AS(sample_size_sweep(cfg, ws, {0}), std::invalid_argument);
  CHECK_THROWS_AS(sample_size_sweep(cfg, ws, {ws.train.size() + 1}), std::invalid_argument);
  CHECK_THROWS_AS(k_sweep(cfg, ws, {3, 1}), std::invalid_argument);
}

TEST_CASE("select_sentences keeps corpus order") {
  RuleDataset ds;
  ds.rules = {k1_rule(0, 1, 1), k1_rule(1, 1, 1), k1_rule(1, 2, 1), k1_rule(2, 1, 1)};
  const auto s = select_sentences(ds, {2, 1});
  REQUIRE(s.rules.size() == 3);
  CHECK(s.rules[0].sentence_id == 1);
  CHECK(s.rules[2].sentence_id == 2);
}

TEST_CASE("scenario transfer: teacher-forcing proxies score every scenario") {
  const auto& ws = tiny_workspace();
  auto cfg = tiny_config(scratch_dir("transfer"));
  cfg.methods = {Method::ngrad};
  cfg.baseline = false;
  const auto run = run_pipeline(cfg, ws, false);
  const auto reports =
      scenario_transfer(run.runs[0].fitted, ws, {Scenario::teacher_forcing, Scenario::real_decode, Scenario::golden});
  REQUIRE(reports.size() == 3);
  CHECK(reports[0].metric_ppl == run.runs[0].report.metric_ppl);
  CHECK(reports[1].scenario == Scenario::real_decode);
  for (const auto& r : reports) CHECK(std::isfinite(r.metric_ppl));
}

TEST_CASE("run_pipeline: two runs write identical files") {
  const auto& ws = tiny_workspace();
  const auto a = run_pipeline(tiny_config(scratch_dir("run_a")), ws);
  const auto b = run_pipeline(tiny_config(scratch_dir("run_b")), ws);
  REQUIRE(a.files.size() == b.files.size());
  CHECK(a.files.size() == 2 * 7 + 2);
  for (std::size_t i = 0; i < a.files.size(); ++i) {
    CHECK(a.files[i].filename() == b.files[i].filename());
    CHECK(slurp(a.files[i]) == slurp(b.files[i]));
  }
  for (const auto& run : a.runs) {
    CHECK(run.report.per_proxy_ppl.size() == 3);
    CHECK(run.baseline.has_value());
  }
}

TEST_CASE("sample_size_sweep: toy ranking is stable and PPL does not grow with data") {
  RunConfig c;
  c.toy_pairs = 2200;
  c.test_pairs = 200;
  c.methods = {Method::attn, Method::pd};
  c.family = "SA";
  c.baseline = false;
  const auto ws = prepare_workspace(c);
  const auto rows = sample_size_sweep(c, ws, {400, 2000});
  REQUIRE(rows.size() == 4);
  const auto& [attn_small, attn_large, pd_small, pd_large] = std::tie(rows[0], rows[1], rows[2], rows[3]);
  MESSAGE("attn " << attn_small.metric_ppl << " -> " << attn_large.metric_ppl << ", pd " << pd_small.metric_ppl
                  << " -> " << pd_large.metric_ppl);
  CHECK(pd_small.metric_ppl < attn_small.metric_ppl);
  CHECK(pd_large.metric_ppl < attn_large.metric_ppl);
  CHECK(attn_large.metric_ppl <= 1.10 * attn_small.metric_ppl);
  CHECK(pd_large.metric_ppl <= 1.10 * pd_small.metric_ppl);
}
