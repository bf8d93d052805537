#pragma once

#include "fidelity/metric/metric.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fidelity::analysis {

// Per-rule NLLs of one explanation method on its full test rule set, one
// vector per scorer (a frozen proxy kind or "Base"). Rule i of every method
// must be the same decision point.
struct MethodNlls {
  std::string method;
  std::map<std::string, std::vector<double>> by_scorer;
};

// A metric instantiation: the PPL of a resample is the minimum over its
// scorers (a single scorer for FN/RN/SA/Base, three for Comb).
struct Instantiation {
  std::string name;
  std::vector<std::string> scorers;
};

std::vector<Instantiation> default_instantiations(bool with_baseline);

enum class ResampleUnit { rule, sentence };

std::string to_string(ResampleUnit u);
ResampleUnit parse_resample_unit(std::string_view s);

struct StabilityConfig {
  std::vector<double> fractions{0.01, 0.05, 0.2, 0.5, 1.0};
  int resamples = 1000;
  std::uint64_t seed = 1;
  bool with_replacement = true;
  ResampleUnit unit = ResampleUnit::rule;
};

struct StabilityTable {
  std::vector<double> fractions;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rates;  // [fraction][column], percent
  int resamples = 0;
  ResampleUnit unit = ResampleUnit::rule;
  std::map<std::string, std::vector<std::string>> reference_rankings;  // best method first
};

// Ranking of methods by PPL on the full test set versus on each resample
// (same indices for every method); a cell is the share of resamples whose
// full ranking matches. `sentence_of_rule` is needed for sentence resampling.
StabilityTable bootstrap_stability(const std::vector<MethodNlls>& methods,
                                   const std::vector<Instantiation>& instantiations,
                                   const StabilityConfig& config,
                                   const std::vector<std::size_t>& sentence_of_rule = {});

// Frozen members of a fitted family (and optionally the baseline) scored on
// the test rules.
MethodNlls collect_nlls(const metric::FittedFamily& family, const rules::RuleDataset& test_rules,
                        const metric::BaselineResult* baseline = nullptr);

}  // namespace fidelity::analysis
