#include "fidelity/analysis/pipeline.hpp"

#include "fidelity/analysis/report.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace fidelity::analysis {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto item = trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T number(std::string_view key, std::string_view v) {
  const auto s = trim(v);
  T out{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("config key '" + std::string(key) + "': '" + s + "' is not a valid number");
  }
  return out;
}

bool boolean(std::string_view key, std::string_view v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true or false, got '" + s + "'");
}

template <typename T>
std::string join(const std::vector<T>& v, auto fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

std::string stem(explain::Method m, int k, rules::Scenario s) {
  return explain::to_string(m) + ".k" + std::to_string(k) + "." + rules::to_string(s);
}

}  // namespace

void apply_setting(RunConfig& c, std::string_view key_in, std::string_view value_in) {
  const auto key = trim(key_in);
  const auto value = trim(value_in);
  try {
    if (key == "source_corpus") c.source_corpus = value;
    else if (key == "target_corpus") c.target_corpus = value;
    else if (key == "toy_pairs") c.toy_pairs = number<int>(key, value);
    else if (key == "toy_seed") c.toy_seed = number<std::uint64_t>(key, value);
    else if (key == "test_pairs") c.test_pairs = number<int>(key, value);
    else if (key == "max_len") c.max_len = number<int>(key, value);
    else if (key == "model") c.model = nmt::parse_model_kind(value);
    else if (key == "checkpoint") c.checkpoint = value;
    else if (key == "embedding") c.model_dims.embedding = number<int>(key, value);
    else if (key == "hidden") c.model_dims.hidden = number<int>(key, value);
    else if (key == "nmt_epochs") c.nmt_epochs = number<int>(key, value);
    else if (key == "model_seed") c.model_seed = number<std::uint64_t>(key, value);
    else if (key == "methods") {
      c.methods.clear();
      for (const auto& m : split_list(value)) c.methods.push_back(explain::parse_method(m));
    } else if (key == "k") c.k = number<int>(key, value);
    else if (key == "scenario") c.scenario = rules::parse_scenario(value);
    else if (key == "family") c.family = value;
    else if (key == "baseline") c.baseline = boolean(key, value);
    else if (key == "proxy_embedding") c.proxy_dims.embedding = number<int>(key, value);
    else if (key == "proxy_hidden") c.proxy_dims.hidden = number<int>(key, value);
    else if (key == "proxy_fn_hidden") c.proxy_dims.fn_hidden = number<int>(key, value);
    else if (key == "proxy_epochs") c.proxy_epochs = number<int>(key, value);
    else if (key == "proxy_patience") c.proxy_patience = number<int>(key, value);
    else if (key == "proxy_batch") c.proxy_batch = number<int>(key, value);
    else if (key == "seed") c.seed = number<std::uint64_t>(key, value);
    else if (key == "ks") {
      c.ks.clear();
      for (const auto& v : split_list(value)) c.ks.push_back(number<int>(key, v));
    } else if (key == "sizes") {
      c.sizes.clear();
      for (const auto& v : split_list(value)) c.sizes.push_back(number<std::size_t>(key, v));
    } else if (key == "fractions") {
      c.fractions.clear();
      for (const auto& v : split_list(value)) c.fractions.push_back(number<double>(key, v));
    } else if (key == "resamples") c.resamples = number<int>(key, value);
    else if (key == "resample_unit") c.resample_unit = parse_resample_unit(value);
    else if (key == "gold_alignment") c.gold_alignment = value;
    else if (key == "out_dir") c.out_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig c;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_setting(c, std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_run_config(in);
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.source_corpus.empty() == c.target_corpus.empty(),
          "source_corpus and target_corpus must be given together");
  for (const auto& p : {c.source_corpus, c.target_corpus, c.checkpoint, c.gold_alignment}) {
    require(p.empty() || std::filesystem::exists(p), "path does not exist: '" + p.string() + "'");
  }
  require(c.toy_pairs > 0, "toy_pairs must be positive");
  require(c.test_pairs > 0, "test_pairs must be positive");
  require(c.max_len > 0, "max_len must be positive");
  require(c.nmt_epochs >= 0, "nmt_epochs must be non-negative");
  require(!c.methods.empty(), "methods must not be empty");
  require(c.k >= 1, "k must be at least 1");
  try {
    metric::family_members(c.family);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("family: ") + e.what());
  }
  require(c.proxy_epochs >= 0 && c.proxy_patience >= 1 && c.proxy_batch >= 1, "proxy training settings out of range");
  require(!c.ks.empty() && c.ks.front() >= 1 && std::is_sorted(c.ks.begin(), c.ks.end()) &&
              std::adjacent_find(c.ks.begin(), c.ks.end()) == c.ks.end(),
          "ks must be strictly ascending and at least 1");
  for (auto s : c.sizes) require(s > 0, "sample sizes must be positive");
  for (double f : c.fractions) require(f > 0.0 && f <= 1.0, "fractions must lie in (0, 1]");
  require(c.resamples >= 1, "resamples must be positive");
}

std::string to_text(const RunConfig& c) {
  std::ostringstream out;
  auto str = [](const auto& v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  out << "source_corpus = " << c.source_corpus.string() << '\n'
      << "target_corpus = " << c.target_corpus.string() << '\n'
      << "toy_pairs = " << c.toy_pairs << '\n'
      << "toy_seed = " << c.toy_seed << '\n'
      << "test_pairs = " << c.test_pairs << '\n'
      << "max_len = " << c.max_len << '\n'
      << "model = " << nmt::to_string(c.model) << '\n'
      << "checkpoint = " << c.checkpoint.string() << '\n'
      << "embedding = " << c.model_dims.embedding << '\n'
      << "hidden = " << c.model_dims.hidden << '\n'
      << "nmt_epochs = " << c.nmt_epochs << '\n'
      << "model_seed = " << c.model_seed << '\n'
      << "methods = " << join(c.methods, [](explain::Method m) { return explain::to_string(m); }) << '\n'
      << "k = " << c.k << '\n'
      << "scenario = " << rules::to_string(c.scenario) << '\n'
      << "family = " << c.family << '\n'
      << "baseline = " << (c.baseline ? "true" : "false") << '\n'
      << "proxy_embedding = " << c.proxy_dims.embedding << '\n'
      << "proxy_hidden = " << c.proxy_dims.hidden << '\n'
      << "proxy_fn_hidden = " << c.proxy_dims.fn_hidden << '\n'
      << "proxy_epochs = " << c.proxy_epochs << '\n'
      << "proxy_patience = " << c.proxy_patience << '\n'
      << "proxy_batch = " << c.proxy_batch << '\n'
      << "seed = " << c.seed << '\n'
      << "ks = " << join(c.ks, str) << '\n'
      << "sizes = " << join(c.sizes, str) << '\n'
      << "fractions = " << join(c.fractions, str) << '\n'
      << "resamples = " << c.resamples << '\n'
      << "resample_unit = " << to_string(c.resample_unit) << '\n'
      << "gold_alignment = " << c.gold_alignment.string() << '\n'
      << "out_dir = " << c.out_dir.string() << '\n';
  return out.str();
}

metric::MetricConfig metric_config(const RunConfig& c) {
  metric::MetricConfig m;
  m.dims = c.proxy_dims;
  m.train.epochs = c.proxy_epochs;
  m.train.patience = c.proxy_patience;
  m.train.batch_size = c.proxy_batch;
  m.seed = c.seed;
  return m;
}

Workspace prepare_corpus(const RunConfig& c) {
  validate(c);
  std::vector<nmt::TokenizedLine> src, tgt;
  Workspace ws;
  if (c.source_corpus.empty()) {
    nmt::ToyTaskConfig toy;
    toy.pairs = c.toy_pairs;
    toy.seed = c.toy_seed;
    auto corpus = nmt::generate_copy_with_noise(toy);
    src = std::move(corpus.source);
    tgt = std::move(corpus.target);
    ws.corpus_id = "toy-" + std::to_string(c.toy_pairs) + "-s" + std::to_string(c.toy_seed);
  } else {
    src = nmt::read_tokenized(c.source_corpus);
    tgt = nmt::read_tokenized(c.target_corpus);
    ws.corpus_id = c.source_corpus.filename().string() + "+" + c.target_corpus.filename().string();
  }
  ws.source_vocab = nmt::Vocab::build(src);
  ws.target_vocab = nmt::Vocab::build(tgt);
  auto corpus = nmt::encode_corpus(src, tgt, ws.source_vocab, ws.target_vocab, c.max_len);
  const auto n_test = static_cast<std::size_t>(c.test_pairs);
  if (corpus.pairs.size() <= n_test) {
    throw ConfigError("corpus has " + std::to_string(corpus.pairs.size()) + " usable pairs, not enough for " +
                      std::to_string(n_test) + " test pairs plus training data");
  }
  const auto split = static_cast<std::ptrdiff_t>(corpus.pairs.size() - n_test);
  ws.train.assign(corpus.pairs.begin(), corpus.pairs.begin() + split);
  ws.test.assign(corpus.pairs.begin() + split, corpus.pairs.end());
  return ws;
}

Workspace prepare_workspace(const RunConfig& c) {
  auto ws = prepare_corpus(c);
  if (!c.checkpoint.empty()) {
    ws.model = nmt::load_model(c.checkpoint, ws.source_vocab, ws.target_vocab);
    ws.model_id = c.checkpoint.filename().string();
  } else {
    ws.model = nmt::make_model(c.model, c.model_dims, ws.source_vocab_size(), ws.target_vocab_size(), c.model_seed);
    nmt::TrainConfig tc;
    tc.epochs = c.nmt_epochs;
    tc.seed = c.model_seed;
    ws.training = nmt::train_nmt(*ws.model, ws.train, tc);
    ws.model_id = nmt::to_string(c.model) + "-e" + std::to_string(c.nmt_epochs) + "-s" + std::to_string(c.model_seed);
  }
  return ws;
}

ExplainedSplits explain_splits(const Workspace& ws, explain::Method method, rules::Scenario scenario) {
  return {rules::explain_corpus(*ws.model, method, ws.train, scenario),
          rules::explain_corpus(*ws.model, method, ws.test, scenario)};
}

namespace {

bool supported(const Workspace& ws, explain::Method m) {
  return !(m == explain::Method::attn && ws.model->kind() == nmt::ModelKind::rnn_search);
}

void write_curves(const std::filesystem::path& dir, const std::string& name, const metric::FittedFamily& fitted,
                  std::vector<std::filesystem::path>& files) {
  for (std::size_t i = 0; i < fitted.members.size(); ++i) {
    std::ostringstream text;
    text << "epoch\ttrain_nll\tvalid_ppl\n";
    for (const auto& e : fitted.training[i].log) text << e.epoch << '\t' << e.train_nll << '\t' << e.valid_ppl << '\n';
    files.push_back(dir / (name + "." + metric::to_string(fitted.members[i]->kind()) + ".tsv"));
    write_text(files.back(), text.str());
  }
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& c, const Workspace& ws, bool write) {
  PipelineResult out;
  const auto mc = metric_config(c);
  std::map<std::string, double> baselines;
  std::vector<metric::MetricReport> reports;
  for (auto method : c.methods) {
    if (!supported(ws, method)) continue;
    const auto splits = explain_splits(ws, method, c.scenario);
    MethodRun run;
    run.train_rules = rules::make_rules(splits.train, c.k, ws.model_id, ws.corpus_id);
    run.test_rules = rules::make_rules(splits.test, c.k, ws.model_id, ws.corpus_id + ":test");
    run.fitted = metric::fit_family(c.family, run.train_rules, ws.source_vocab_size(), ws.target_vocab_size(), mc);
    run.report = metric::evaluate_family(run.fitted, run.test_rules);
    if (c.baseline) {
      run.baseline = metric::baseline_score(*ws.model, run.test_rules, ws.test);
      baselines[explain::to_string(method)] = run.baseline->ppl;
    }
    reports.push_back(run.report);
    if (write) {
      const auto name = stem(method, c.k, c.scenario);
      const auto rules_dir = c.out_dir / "rules";
      std::filesystem::create_directories(rules_dir);
      out.files.push_back(rules_dir / (name + ".train.jsonl"));
      rules::write_rules(out.files.back(), run.train_rules);
      out.files.push_back(rules_dir / (name + ".test.jsonl"));
      rules::write_rules(out.files.back(), run.test_rules);
      out.files.push_back(c.out_dir / "reports" / (name + "." + c.family + ".json"));
      write_text(out.files.back(), metric::report_to_json(run.report).dump(2) + "\n");
      if (run.baseline) {
        nlohmann::ordered_json b;
        b["method"] = explain::to_string(method);
        b["k"] = c.k;
        b["scenario"] = rules::to_string(c.scenario);
        b["ppl"] = run.baseline->ppl;
        b["n_test"] = run.test_rules.rules.size();
        out.files.push_back(c.out_dir / "reports" / (name + ".baseline.json"));
        write_text(out.files.back(), b.dump(2) + "\n");
      }
      write_curves(c.out_dir / "curves", name, run.fitted, out.files);
    }
    out.runs.push_back(std::move(run));
  }
  if (write && !reports.empty()) {
    out.files.push_back(c.out_dir / "summary.csv");
    write_text(out.files.back(), reports_csv(reports));
    out.files.push_back(c.out_dir / "metric_matrix.csv");
    write_text(out.files.back(), metric_matrix(reports, baselines));
  }
  return out;
}

std::vector<metric::MetricReport> k_sweep(const RunConfig& c, const Workspace& ws, const std::vector<int>& ks) {
  if (ks.empty() || ks.front() < 1 || !std::is_sorted(ks.begin(), ks.end())) {
    throw std::invalid_argument("ks must be ascending and at least 1");
  }
  const auto mc = metric_config(c);
  std::vector<metric::MetricReport> out;
  for (auto method : c.methods) {
    if (!supported(ws, method)) continue;
    const auto splits = explain_splits(ws, method, c.scenario);
    for (int k : ks) {
      const auto train = rules::make_rules(splits.train, k, ws.model_id, ws.corpus_id);
      const auto test = rules::make_rules(splits.test, k, ws.model_id, ws.corpus_id + ":test");
      const auto fitted = metric::fit_family(c.family, train, ws.source_vocab_size(), ws.target_vocab_size(), mc);
      out.push_back(metric::evaluate_family(fitted, test));
    }
  }
  return out;
}

rules::RuleDataset select_sentences(const rules::RuleDataset& ds, const std::vector<std::size_t>& sentence_ids) {
  const std::set<std::size_t> keep(sentence_ids.begin(), sentence_ids.end());
  rules::RuleDataset out;
  out.meta = ds.meta;
  for (const auto& r : ds.rules) {
    if (keep.contains(r.sentence_id)) out.rules.push_back(r);
  }
  return out;
}

std::vector<metric::MetricReport> sample_size_sweep(const RunConfig& c, const Workspace& ws,
                                                    const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw std::invalid_argument("no sample sizes given");
  for (auto s : sizes) {
    if (s == 0) throw std::invalid_argument("sample size must be positive");
    if (s > ws.train.size()) {
      throw std::invalid_argument("sample size " + std::to_string(s) + " exceeds the " +
                                  std::to_string(ws.train.size()) + " training sentences");
    }
  }
  // One seeded permutation; each size takes a prefix, so subsets are nested.
  std::vector<std::size_t> order(ws.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(c.seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto mc = metric_config(c);
  std::vector<metric::MetricReport> out;
  for (auto method : c.methods) {
    if (!supported(ws, method)) continue;
    const auto splits = explain_splits(ws, method, c.scenario);
    const auto full = rules::make_rules(splits.train, c.k, ws.model_id, ws.corpus_id);
    const auto test = rules::make_rules(splits.test, c.k, ws.model_id, ws.corpus_id + ":test");
    for (auto size : sizes) {
      const std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
      const auto train = select_sentences(full, chosen);
      const auto fitted = metric::fit_family(c.family, train, ws.source_vocab_size(), ws.target_vocab_size(), mc);
      out.push_back(metric::evaluate_family(fitted, test));
    }
  }
  return out;
}

std::vector<metric::MetricReport> scenario_transfer(const metric::FittedFamily& fitted, const Workspace& ws,
                                                    const std::vector<rules::Scenario>& scenarios) {
  std::vector<metric::MetricReport> out;
  for (auto s : scenarios) {
    const auto explained = rules::explain_corpus(*ws.model, fitted.meta.method, ws.test, s);
    const auto test = rules::make_rules(explained, fitted.meta.k, ws.model_id, ws.corpus_id + ":test");
    out.push_back(metric::evaluate_family(fitted, test));
  }
  return out;
}

}  // namespace fidelity::analysis
