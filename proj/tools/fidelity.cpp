// fidelity: command-line driver for explanation-fidelity experiments.

#include "CLI11.hpp"

#include "fidelity/analysis/aer.hpp"
#include "fidelity/analysis/pipeline.hpp"
#include "fidelity/analysis/report.hpp"
#include "fidelity/autodiff/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace fidelity;
using analysis::RunConfig;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> settings;
};

RunConfig resolve(const GlobalOptions& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : analysis::load_run_config(g.config);
  for (const auto& kv : g.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw analysis::ConfigError("--set expects key=value, got '" + kv + "'");
    analysis::apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  analysis::validate(c);
  return c;
}

std::string stem(explain::Method m, int k, rules::Scenario s) {
  return explain::to_string(m) + ".k" + std::to_string(k) + "." + rules::to_string(s);
}

void say(const std::string& line) { std::cout << line << '\n'; }

void wrote(const fs::path& p) { say("wrote " + p.string()); }

void print_training(const analysis::Workspace& ws) {
  if (!ws.training) return;
  const auto& log = ws.training->log;
  if (!log.empty()) {
    std::ostringstream s;
    s << "nmt: " << log.size() - 1 << " epochs, final train NLL " << log.back().train_nll << ", teacher-forcing accuracy "
      << nmt::teacher_forcing_accuracy(*ws.model, ws.test) << " on " << ws.test.size() << " test pairs";
    say(s.str());
  }
}

std::vector<metric::MetricReport> read_reports(const std::vector<std::string>& paths) {
  std::vector<metric::MetricReport> out;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read '" + p + "'");
    const auto j = nlohmann::ordered_json::parse(in);
    if (j.is_array()) {
      for (const auto& r : j) out.push_back(metric::report_from_json(r));
    } else {
      out.push_back(metric::report_from_json(j));
    }
  }
  return out;
}

std::vector<analysis::Instantiation> usable_instantiations(const std::vector<analysis::MethodNlls>& methods,
                                                           bool with_baseline) {
  std::vector<analysis::Instantiation> out;
  for (auto& inst : analysis::default_instantiations(with_baseline)) {
    bool ok = true;
    for (const auto& s : inst.scorers) ok = ok && methods.front().by_scorer.contains(s);
    if (ok) out.push_back(inst);
  }
  return out;
}

std::string config_keys_help() {
  return "Run configuration (--config FILE, one 'key = value' per line, '#' comments; lists comma-separated).\n"
         "Keys and defaults:\n" +
         analysis::to_text(RunConfig{}) +
         "Empty source_corpus/target_corpus select the generated copy-with-noise task; an empty checkpoint\n"
         "trains the NMT model. Gold alignment ids index the test split (0-based).";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-fidelity toolkit: NMT models, explanation methods, rule extraction and proxy metrics."};
  app.footer(config_keys_help());
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "Run configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for proxy training and resampling");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--set", g.settings, "Override one configuration key (key=value), repeatable");

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "Write the copy-with-noise corpus as two text files");
  gen->callback([&] {
    const auto c = resolve(g);
    nmt::ToyTaskConfig toy;
    toy.pairs = c.toy_pairs;
    toy.seed = c.toy_seed;
    const auto corpus = nmt::generate_copy_with_noise(toy);
    fs::create_directories(c.out_dir / "corpus");
    nmt::write_tokenized(c.out_dir / "corpus" / "toy.src", corpus.source);
    nmt::write_tokenized(c.out_dir / "corpus" / "toy.tgt", corpus.target);
    wrote(c.out_dir / "corpus" / "toy.src");
    wrote(c.out_dir / "corpus" / "toy.tgt");
  });

  // train-nmt
  std::string nmt_output;
  auto* train_nmt = app.add_subcommand("train-nmt", "Train the NMT model and save a checkpoint with its vocabularies");
  train_nmt->add_option("-o,--output", nmt_output, "Checkpoint path (default <out-dir>/model/<kind>.ckpt)");
  train_nmt->callback([&] {
    auto c = resolve(g);
    c.checkpoint.clear();
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const fs::path path = nmt_output.empty() ? c.out_dir / "model" / (nmt::to_string(c.model) + ".ckpt") : fs::path(nmt_output);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    nmt::save_model(path, *ws.model, ws.source_vocab, ws.target_vocab);
    ws.source_vocab.save(path.string() + ".src.vocab");
    ws.target_vocab.save(path.string() + ".tgt.vocab");
    wrote(path);
  });

  // explain
  std::string explain_split = "test";
  auto* explain_cmd = app.add_subcommand("explain", "Dump per-decision relevance scores of every configured method");
  explain_cmd->add_option("--split", explain_split, "Corpus split to explain")->check(CLI::IsMember({"train", "test"}));
  explain_cmd->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const auto& pairs = explain_split == "train" ? ws.train : ws.test;
    for (auto m : c.methods) {
      if (m == explain::Method::attn && ws.model->kind() == nmt::ModelKind::rnn_search) continue;
      const auto ex = rules::explain_corpus(*ws.model, m, pairs, c.scenario);
      std::vector<explain::RelevanceVector> rows;
      for (const auto& s : ex.sentences) rows.insert(rows.end(), s.decisions.begin(), s.decisions.end());
      const auto path = c.out_dir / "relevance" /
                        (explain::to_string(m) + "." + rules::to_string(c.scenario) + "." + explain_split + ".jsonl");
      fs::create_directories(path.parent_path());
      explain::write_relevance_dump(path, rows);
      wrote(path);
    }
  });

  // extract-rules
  auto* extract = app.add_subcommand("extract-rules", "Extract train and test rule datasets for every configured method");
  extract->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    for (auto m : c.methods) {
      if (m == explain::Method::attn && ws.model->kind() == nmt::ModelKind::rnn_search) continue;
      const auto splits = analysis::explain_splits(ws, m, c.scenario);
      for (const auto& [split, ex] : {std::pair{"train", &splits.train}, std::pair{"test", &splits.test}}) {
        const auto ds = rules::make_rules(*ex, c.k, ws.model_id,
                                          std::string(split) == "test" ? ws.corpus_id + ":test" : ws.corpus_id);
        const auto path = c.out_dir / "rules" / (stem(m, c.k, c.scenario) + "." + split + ".jsonl");
        fs::create_directories(path.parent_path());
        rules::write_rules(path, ds);
        wrote(path);
      }
    }
  });

  // train-proxy
  std::string proxy_train, proxy_prefix;
  auto* train_proxy = app.add_subcommand("train-proxy", "Fit the configured proxy family on a rule file and save it");
  train_proxy->add_option("--train", proxy_train, "Training rules (.jsonl)")->required()->check(CLI::ExistingFile);
  train_proxy->add_option("-o,--output", proxy_prefix, "Checkpoint prefix (default <out-dir>/proxies/<rules>.<family>)");
  train_proxy->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_corpus(c);
    const auto train = rules::read_rules(proxy_train);
    auto mc = analysis::metric_config(c);
    const auto fitted =
        metric::fit_family(c.family, train, ws.source_vocab_size(), ws.target_vocab_size(), mc);
    for (std::size_t i = 0; i < fitted.members.size(); ++i) {
      std::ostringstream s;
      s << metric::to_string(fitted.members[i]->kind()) << ": best epoch " << fitted.training[i].best_epoch
        << ", validation PPL " << fitted.training[i].best_valid_ppl;
      say(s.str());
    }
    const fs::path prefix = proxy_prefix.empty()
                                ? c.out_dir / "proxies" / (fs::path(proxy_train).stem().string() + "." + c.family)
                                : fs::path(proxy_prefix);
    for (const auto& p : metric::save_family(prefix, fitted)) wrote(p);
  });

  // metric
  std::string metric_train, metric_test, metric_proxies, metric_output;
  auto* metric_cmd = app.add_subcommand(
      "metric", "Fidelity PPL: from rule files, from saved proxies, or the full configured pipeline");
  metric_cmd->add_option("--train", metric_train, "Training rules")->check(CLI::ExistingFile);
  metric_cmd->add_option("--test", metric_test, "Test rules")->check(CLI::ExistingFile);
  metric_cmd->add_option("--proxies", metric_proxies, "Checkpoint prefix written by train-proxy");
  metric_cmd->add_option("-o,--output", metric_output, "Report path (.json)");
  metric_cmd->callback([&] {
    const auto c = resolve(g);
    if (metric_test.empty()) {
      if (!metric_train.empty() || !metric_proxies.empty()) throw CLI::ValidationError("--test", "is required");
      const auto ws = analysis::prepare_workspace(c);
      print_training(ws);
      const auto result = analysis::run_pipeline(c, ws);
      std::cout << analysis::metric_matrix(
          [&] {
            std::vector<metric::MetricReport> r;
            for (const auto& run : result.runs) r.push_back(run.report);
            return r;
          }(),
          [&] {
            std::map<std::string, double> b;
            for (const auto& run : result.runs) {
              if (run.baseline) b[explain::to_string(run.report.method)] = run.baseline->ppl;
            }
            return b;
          }());
      wrote(c.out_dir);
      return;
    }
    const auto test = rules::read_rules(metric_test);
    metric::MetricReport report;
    if (!metric_proxies.empty()) {
      report = metric::evaluate_family(metric::load_family(metric_proxies, c.family), test);
    } else {
      if (metric_train.empty()) throw CLI::ValidationError("--train or --proxies", "one is required with --test");
      const auto ws = analysis::prepare_corpus(c);
      report = metric::metric_score(c.family, rules::read_rules(metric_train), test, ws.source_vocab_size(),
                                    ws.target_vocab_size(), analysis::metric_config(c));
    }
    const auto text = metric::report_to_json(report).dump(2) + "\n";
    std::cout << text;
    if (!metric_output.empty()) {
      analysis::write_text(metric_output, text);
      wrote(metric_output);
    }
  });

  // baseline
  std::string baseline_test, baseline_output;
  auto* baseline_cmd = app.add_subcommand("baseline", "PPL of the frozen NMT model with non-rule context words zeroed");
  baseline_cmd->add_option("--test", baseline_test, "Test rules extracted from this configuration's test split")
      ->required()
      ->check(CLI::ExistingFile);
  baseline_cmd->add_option("-o,--output", baseline_output, "Result path (.json)");
  baseline_cmd->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_workspace(c);
    const auto test = rules::read_rules(baseline_test);
    const auto b = metric::baseline_score(*ws.model, test, ws.test);
    nlohmann::ordered_json j;
    j["method"] = explain::to_string(test.meta.method);
    j["k"] = test.meta.k;
    j["scenario"] = rules::to_string(test.meta.scenario);
    j["ppl"] = b.ppl;
    j["n_test"] = test.rules.size();
    std::cout << j.dump(2) << '\n';
    if (!baseline_output.empty()) {
      analysis::write_text(baseline_output, j.dump(2) + "\n");
      wrote(baseline_output);
    }
  });

  // density
  std::vector<std::string> density_rules;
  auto* density_cmd = app.add_subcommand("density", "Unique-rule frequency histogram (B1..B5) per method");
  density_cmd->add_option("--rules", density_rules, "Rule files (default: extract training rules per method)")
      ->check(CLI::ExistingFile);
  density_cmd->callback([&] {
    const auto c = resolve(g);
    std::vector<std::pair<std::string, rules::DensityHistogram>> rows;
    if (!density_rules.empty()) {
      for (const auto& p : density_rules) {
        const auto ds = rules::read_rules(p);
        rows.emplace_back(explain::to_string(ds.meta.method), rules::density_histogram(ds));
      }
    } else {
      const auto ws = analysis::prepare_workspace(c);
      print_training(ws);
      for (auto m : c.methods) {
        if (m == explain::Method::attn && ws.model->kind() == nmt::ModelKind::rnn_search) continue;
        const auto ds = rules::build_rule_dataset(*ws.model, m, ws.train, c.scenario, c.k);
        rows.emplace_back(explain::to_string(m), rules::density_histogram(ds));
      }
    }
    const auto table = analysis::density_table(rows);
    std::cout << table;
    analysis::write_text(c.out_dir / "density.csv", table);
    wrote(c.out_dir / "density.csv");
  });

  // stability
  bool without_replacement = false;
  auto* stability_cmd =
      app.add_subcommand("stability", "Bootstrap how often resampled test sets keep the full-set method ranking");
  stability_cmd->add_flag("--without-replacement", without_replacement, "Draw subsets without replacement");
  stability_cmd->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const auto result = analysis::run_pipeline(c, ws);
    std::vector<analysis::MethodNlls> methods;
    for (const auto& run : result.runs) {
      methods.push_back(analysis::collect_nlls(run.fitted, run.test_rules, run.baseline ? &*run.baseline : nullptr));
    }
    if (methods.size() < 2) throw analysis::ConfigError("stability needs at least two methods");
    analysis::StabilityConfig sc;
    sc.fractions = c.fractions;
    sc.resamples = c.resamples;
    sc.seed = c.seed;
    sc.with_replacement = !without_replacement;
    sc.unit = c.resample_unit;
    std::vector<std::size_t> sentence_of_rule;
    for (const auto& r : result.runs.front().test_rules.rules) sentence_of_rule.push_back(r.sentence_id);
    const auto table =
        analysis::bootstrap_stability(methods, usable_instantiations(methods, c.baseline), sc, sentence_of_rule);
    const auto text = analysis::stability_csv(table);
    std::cout << text;
    analysis::write_text(c.out_dir / "stability.csv", text);
    wrote(c.out_dir / "stability.csv");
  });

  // sweep-k
  auto* sweep_k = app.add_subcommand("sweep-k", "Metric PPL for every configured method and k in `ks`");
  sweep_k->callback([&] {
    const auto c = resolve(g);
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const auto reports = analysis::k_sweep(c, ws, c.ks);
    analysis::emit_report(reports, analysis::ReportFormat::csv, c.out_dir / "sweep_k.csv");
    analysis::emit_report(reports, analysis::ReportFormat::plot_data, c.out_dir / "plot" / "sweep_k");
    std::cout << analysis::reports_csv(reports);
    wrote(c.out_dir / "sweep_k.csv");
  });

  // sweep-size
  auto* sweep_size = app.add_subcommand("sweep-size", "Metric PPL for nested training subsets of the sizes in `sizes`");
  sweep_size->callback([&] {
    const auto c = resolve(g);
    if (c.sizes.empty()) throw analysis::ConfigError("sweep-size needs 'sizes' in the configuration");
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const auto reports = analysis::sample_size_sweep(c, ws, c.sizes);
    analysis::emit_report(reports, analysis::ReportFormat::csv, c.out_dir / "sweep_size.csv");
    analysis::emit_report(reports, analysis::ReportFormat::plot_data, c.out_dir / "plot" / "sweep_size",
                          analysis::PlotAxis::n_train);
    std::cout << analysis::reports_csv(reports);
    wrote(c.out_dir / "sweep_size.csv");
  });

  // aer
  std::string aer_gold, aer_rules;
  auto* aer_cmd = app.add_subcommand(
      "aer", "Alignment error rate of top-1 source words against gold links; without --rules also ranks methods");
  aer_cmd->add_option("--gold", aer_gold, "Gold alignment file (default: gold_alignment key)")->check(CLI::ExistingFile);
  aer_cmd->add_option("--rules", aer_rules, "k=1 test rules to score")->check(CLI::ExistingFile);
  aer_cmd->callback([&] {
    auto c = resolve(g);
    const fs::path gold_path = aer_gold.empty() ? c.gold_alignment : fs::path(aer_gold);
    if (gold_path.empty()) throw analysis::ConfigError("aer needs --gold or gold_alignment");
    const auto gold = analysis::read_alignment(gold_path);
    const auto show = [](const std::string& name, const analysis::AerResult& r) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s: AER %.4f over %zu links, %zu of %zu targets unaligned in gold (%.1f%%)",
                    name.c_str(), r.aer, r.scored_links, r.skipped_targets, r.target_tokens,
                    100.0 * r.skipped_fraction);
      say(buf);
    };
    if (!aer_rules.empty()) {
      const auto ds = rules::read_rules(aer_rules);
      show(explain::to_string(ds.meta.method), analysis::compute_aer(analysis::derive_alignment(ds), gold));
      return;
    }
    c.k = 1;
    const auto ws = analysis::prepare_workspace(c);
    print_training(ws);
    const auto result = analysis::run_pipeline(c, ws);
    std::vector<analysis::RankRow> rows;
    for (const auto& run : result.runs) {
      // gold may cover only part of the test split
      std::vector<std::size_t> ids;
      for (const auto& [sid, _] : gold) ids.push_back(sid);
      const auto hyp = analysis::derive_alignment(analysis::select_sentences(run.test_rules, ids));
      const auto r = analysis::compute_aer(hyp, gold);
      show(explain::to_string(run.report.method), r);
      rows.push_back({explain::to_string(run.report.method), run.report.metric_ppl, r.aer});
    }
    const auto table = analysis::rank_comparison(rows);
    std::cout << table;
    analysis::write_text(c.out_dir / "aer_ranks.csv", table);
    wrote(c.out_dir / "aer_ranks.csv");
  });

  // report
  std::vector<std::string> report_inputs;
  std::string report_format = "csv", report_output, report_axis = "k";
  auto* report_cmd = app.add_subcommand("report", "Merge MetricReport JSON files into csv, json or plot data");
  report_cmd->add_option("inputs", report_inputs, "Report files (object or array)")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--format", report_format, "csv, json or plot-data");
  report_cmd->add_option("-o,--output", report_output, "Target file, or directory for plot-data")->required();
  report_cmd->add_option("--axis", report_axis, "Plot x axis")->check(CLI::IsMember({"k", "n_train"}));
  report_cmd->callback([&] {
    const auto format = analysis::parse_report_format(report_format);
    const auto files = analysis::emit_report(read_reports(report_inputs), format, report_output,
                                             report_axis == "k" ? analysis::PlotAxis::k : analysis::PlotAxis::n_train);
    for (const auto& f : files) wrote(f);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
