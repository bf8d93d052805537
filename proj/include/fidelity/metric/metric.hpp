#pragma once

#include "fidelity/metric/proxy.hpp"
#include "fidelity/nmt/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fidelity::metric {

struct ProxyTrainConfig {
  int epochs = 30;
  int batch_size = 32;
  int patience = 3;  // epochs without validation improvement before stopping
  double valid_fraction = 0.1;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::filesystem::path log_path;  // optional TSV: epoch, train NLL, valid PPL
};

struct ProxyEpoch {
  int epoch = 0;
  double train_nll = 0.0;
  double valid_ppl = 0.0;
};

struct ProxyTrainReport {
  std::vector<ProxyEpoch> log;
  int best_epoch = 0;
  double best_valid_ppl = 0.0;
};

class ProxyDiverged : public std::runtime_error {
 public:
  explicit ProxyDiverged(int epoch)
      : std::runtime_error("proxy training diverged in epoch " + std::to_string(epoch)), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// Minimizes the summed -log Q(label | rule) with mini-batch Adam and keeps the
// parameters with the best validation PPL.
ProxyTrainReport train_proxy(ProxyModel& q, const RuleDataset& train_rules, const ProxyTrainConfig& config);

// exp(mean NLL); rejects an empty set.
double perplexity(std::span<const double> nlls);
double ppl_on_rules(const ProxyModel& q, const RuleDataset& test_rules);

// Named proxy families: FN, RN, SA and Comb = {FN, RN, SA}.
std::vector<ProxyKind> family_members(std::string_view family);

struct MetricConfig {
  ProxyDims dims;
  ProxyTrainConfig train;
  std::uint64_t seed = 1;
};

struct MetricReport {
  rules::Method method = rules::Method::pd;
  int k = 1;
  rules::Scenario scenario = rules::Scenario::teacher_forcing;
  std::string family;
  std::map<std::string, double> per_proxy_ppl;
  double metric_ppl = 0.0;
  std::string winner;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
};

nlohmann::ordered_json report_to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::ordered_json& j);

// Independently trained members of a family, kept for re-evaluation on other
// rule sets (scenario transfer, bootstrap).
struct FittedFamily {
  std::string family;
  rules::RuleMeta meta;
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  std::vector<std::unique_ptr<ProxyModel>> members;
  std::vector<ProxyTrainReport> training;
};

FittedFamily fit_family(std::string_view family, const RuleDataset& train_rules, int source_vocab,
                        int target_vocab, const MetricConfig& config);

// One checkpoint per member at `<prefix>.<KIND>.ckpt`, each carrying the
// family name, rule meta, training size and seed. Training logs are not kept.
std::vector<std::filesystem::path> save_family(const std::filesystem::path& prefix, const FittedFamily& fitted);
FittedFamily load_family(const std::filesystem::path& prefix, std::string_view family);

// Evaluates every member; the metric value is the minimum PPL. Test rules
// must carry the same method and k as the training rules (the scenario may
// differ, which is how scenario transfer is run).
MetricReport evaluate_family(const FittedFamily& fitted, const RuleDataset& test_rules);

// Fit on train rules, evaluate on test rules. Train and test
// meta (method, k, scenario) must match.
MetricReport metric_score(std::string_view family, const RuleDataset& train_rules, const RuleDataset& test_rules,
                          int source_vocab, int target_vocab, const MetricConfig& config);

// The frozen NMT model with every context word outside the rule zeroed.
// Contexts are rebuilt from `corpus` (sentence id = index) and the rule's
// provenance; real-decode prefixes are re-decoded greedily.
struct BaselineResult {
  double ppl = 0.0;
  std::vector<double> nlls;
};

BaselineResult baseline_score(const nmt::NmtModel& model, const RuleDataset& test_rules,
                              std::span<const nmt::SentencePair> corpus, int decode_max_len = 64);

}  // namespace fidelity::metric
