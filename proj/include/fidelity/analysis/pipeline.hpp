#pragma once

#include "fidelity/analysis/stability.hpp"
#include "fidelity/metric/metric.hpp"
#include "fidelity/nmt/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fidelity::analysis {

// Flat "key = value" run description; '#' starts a comment. Lists are
// comma-separated.
struct RunConfig {
  // corpus: empty paths select the generated copy-with-noise task
  std::filesystem::path source_corpus;
  std::filesystem::path target_corpus;
  int toy_pairs = 5000;
  std::uint64_t toy_seed = 1;
  int test_pairs = 500;  // taken from the end of the corpus
  int max_len = 16;

  // NMT model: loaded when `checkpoint` is set, trained otherwise
  nmt::ModelKind model = nmt::ModelKind::transformer;
  std::filesystem::path checkpoint;
  nmt::ModelDims model_dims;
  int nmt_epochs = 4;
  std::uint64_t model_seed = 11;

  // rules and metric
  std::vector<explain::Method> methods{std::begin(explain::all_methods), std::end(explain::all_methods)};
  int k = 1;
  rules::Scenario scenario = rules::Scenario::teacher_forcing;
  std::string family = "Comb";
  bool baseline = true;
  metric::ProxyDims proxy_dims;
  int proxy_epochs = 30;
  int proxy_patience = 3;
  int proxy_batch = 32;
  std::uint64_t seed = 1;

  // sweeps, stability, alignment
  std::vector<int> ks{1, 2, 3, 4};
  std::vector<std::size_t> sizes;
  std::vector<double> fractions{0.01, 0.05, 0.2, 0.5, 1.0};
  int resamples = 1000;
  ResampleUnit resample_unit = ResampleUnit::rule;
  std::filesystem::path gold_alignment;

  std::filesystem::path out_dir = "out";
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void apply_setting(RunConfig& config, std::string_view key, std::string_view value);
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);
// Checks ranges and that every referenced input path exists.
void validate(const RunConfig& config);
std::string to_text(const RunConfig& config);

metric::MetricConfig metric_config(const RunConfig& config);

// Corpus split and NMT model shared by every stage of a run.
struct Workspace {
  nmt::Vocab source_vocab;
  nmt::Vocab target_vocab;
  std::vector<nmt::SentencePair> train;
  std::vector<nmt::SentencePair> test;
  std::unique_ptr<nmt::NmtModel> model;
  std::optional<nmt::TrainReport> training;
  std::string model_id;
  std::string corpus_id;

  int source_vocab_size() const { return static_cast<int>(source_vocab.size()); }
  int target_vocab_size() const { return static_cast<int>(target_vocab.size()); }
};

// Vocabularies and the train/test split only; `model` stays empty.
Workspace prepare_corpus(const RunConfig& config);
Workspace prepare_workspace(const RunConfig& config);

struct MethodRun {
  rules::RuleDataset train_rules;
  rules::RuleDataset test_rules;
  metric::FittedFamily fitted;
  metric::MetricReport report;
  std::optional<metric::BaselineResult> baseline;
};

struct PipelineResult {
  std::vector<MethodRun> runs;
  std::vector<std::filesystem::path> files;
};

// Extract -> fit -> evaluate for every configured method. With `write` the
// rule files, reports and a summary go under out_dir.
PipelineResult run_pipeline(const RunConfig& config, const Workspace& ws, bool write = true);

// Rule datasets of both splits for one method and scenario, reusing a single
// explanation pass across all ks.
struct ExplainedSplits {
  rules::ExplainedCorpus train;
  rules::ExplainedCorpus test;
};

ExplainedSplits explain_splits(const Workspace& ws, explain::Method method, rules::Scenario scenario);

// Full pipeline per (method, k); rows ordered by method then k.
std::vector<metric::MetricReport> k_sweep(const RunConfig& config, const Workspace& ws, const std::vector<int>& ks);

// Seeded subsets of the training sentences (without replacement); the test
// rules stay fixed. Rows ordered by method then size.
std::vector<metric::MetricReport> sample_size_sweep(const RunConfig& config, const Workspace& ws,
                                                    const std::vector<std::size_t>& sizes);

// Rules of the selected sentences, in corpus order.
rules::RuleDataset select_sentences(const rules::RuleDataset& ds, const std::vector<std::size_t>& sentence_ids);

// Proxies fitted under one scenario, evaluated on test rules of others.
std::vector<metric::MetricReport> scenario_transfer(const metric::FittedFamily& fitted, const Workspace& ws,
                                                    const std::vector<rules::Scenario>& scenarios);

}  // namespace fidelity::analysis
