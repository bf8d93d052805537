#include "fidelity/analysis/stability.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fidelity::analysis {

std::vector<Instantiation> default_instantiations(bool with_baseline) {
  std::vector<Instantiation> out;
  if (with_baseline) out.push_back({"Base", {"Base"}});
  out.push_back({"FN", {"FN"}});
  out.push_back({"RN", {"RN"}});
  out.push_back({"SA", {"SA"}});
  out.push_back({"Comb", {"FN", "RN", "SA"}});
  return out;
}

std::string to_string(ResampleUnit u) { return u == ResampleUnit::rule ? "rule" : "sentence"; }

ResampleUnit parse_resample_unit(std::string_view s) {
  if (s == "rule") return ResampleUnit::rule;
  if (s == "sentence") return ResampleUnit::sentence;
  throw std::invalid_argument("unknown resample unit '" + std::string(s) + "'");
}

namespace {

std::vector<std::size_t> ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

}  // namespace

StabilityTable bootstrap_stability(const std::vector<MethodNlls>& methods,
                                   const std::vector<Instantiation>& instantiations, const StabilityConfig& config,
                                   const std::vector<std::size_t>& sentence_of_rule) {
  if (methods.size() < 2) throw std::invalid_argument("ranking stability needs at least two methods");
  if (instantiations.empty()) throw std::invalid_argument("no metric instantiations to compare");
  if (config.resamples < 1) throw std::invalid_argument("resample count must be positive");

  // Flatten to [instantiation][scorer][method] -> NLL vector.
  std::size_t n_rules = 0;
  bool sized = false;
  std::vector<std::vector<std::vector<const std::vector<double>*>>> table;
  for (const auto& inst : instantiations) {
    if (inst.scorers.empty()) throw std::invalid_argument("instantiation '" + inst.name + "' has no scorers");
    auto& per_scorer = table.emplace_back();
    for (const auto& scorer : inst.scorers) {
      auto& per_method = per_scorer.emplace_back();
      for (const auto& m : methods) {
        auto it = m.by_scorer.find(scorer);
        if (it == m.by_scorer.end()) {
          throw std::invalid_argument("method '" + m.method + "' has no NLLs for scorer '" + scorer + "'");
        }
        if (!sized) {
          n_rules = it->second.size();
          sized = true;
        }
        if (it->second.size() != n_rules) {
          throw std::invalid_argument("per-rule NLL vectors differ in length; resampling must be paired");
        }
        per_method.push_back(&it->second);
      }
    }
  }
  if (n_rules == 0) throw std::invalid_argument("no test rules to resample");

  // Resampling units: single rules or all rules of one sentence.
  std::vector<std::vector<std::size_t>> units;
  if (config.unit == ResampleUnit::rule) {
    units.resize(n_rules);
    for (std::size_t i = 0; i < n_rules; ++i) units[i] = {i};
  } else {
    if (sentence_of_rule.size() != n_rules) {
      throw std::invalid_argument("sentence resampling needs one sentence id per rule");
    }
    std::map<std::size_t, std::vector<std::size_t>> by_sentence;
    for (std::size_t i = 0; i < n_rules; ++i) by_sentence[sentence_of_rule[i]].push_back(i);
    for (auto& [_, rows] : by_sentence) units.push_back(std::move(rows));
  }

  const std::size_t n_methods = methods.size();
  auto instantiation_scores = [&](std::size_t inst, const std::vector<std::size_t>& rows) {
    std::vector<double> best(n_methods, std::numeric_limits<double>::infinity());
    for (const auto& per_method : table[inst]) {
      for (std::size_t m = 0; m < n_methods; ++m) {
        const auto& nll = *per_method[m];
        double sum = 0.0;
        for (std::size_t r : rows) sum += nll[r];
        best[m] = std::min(best[m], sum / static_cast<double>(rows.size()));
      }
    }
    return best;  // mean NLL, i.e. log PPL
  };

  StabilityTable out;
  out.fractions = config.fractions;
  out.resamples = config.resamples;
  out.unit = config.unit;
  std::vector<std::size_t> all(n_rules);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::vector<std::size_t>> reference;
  for (std::size_t i = 0; i < instantiations.size(); ++i) {
    out.columns.push_back(instantiations[i].name);
    reference.push_back(ranking(instantiation_scores(i, all)));
    auto& names = out.reference_rankings[instantiations[i].name];
    for (std::size_t m : reference.back()) names.push_back(methods[m].method);
  }

  for (std::size_t f = 0; f < config.fractions.size(); ++f) {
    const double fraction = config.fractions[f];
    if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("sample fractions must lie in (0, 1]");
    const auto draw = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(units.size())));
    if (draw == 0) {
      throw std::invalid_argument("sample fraction " + std::to_string(fraction) + " selects no test data");
    }
    std::mt19937_64 rng(config.seed * 1000003ULL + f);
    std::uniform_int_distribution<std::size_t> pick(0, units.size() - 1);
    std::vector<std::size_t> chosen_units(units.size());
    std::vector<std::size_t> rows;
    std::vector<int> matches(instantiations.size(), 0);
    for (int s = 0; s < config.resamples; ++s) {
      rows.clear();
      if (config.with_replacement) {
        for (std::size_t d = 0; d < draw; ++d) {
          const auto& u = units[pick(rng)];
          rows.insert(rows.end(), u.begin(), u.end());
        }
      } else {
        std::iota(chosen_units.begin(), chosen_units.end(), 0);
        for (std::size_t d = 0; d < draw; ++d) {
          std::uniform_int_distribution<std::size_t> rest(d, units.size() - 1);
          std::swap(chosen_units[d], chosen_units[rest(rng)]);
          const auto& u = units[chosen_units[d]];
          rows.insert(rows.end(), u.begin(), u.end());
        }
      }
      for (std::size_t i = 0; i < instantiations.size(); ++i) {
        if (ranking(instantiation_scores(i, rows)) == reference[i]) ++matches[i];
      }
    }
    auto& row = out.rates.emplace_back();
    for (int m : matches) row.push_back(100.0 * m / config.resamples);
  }
  return out;
}

MethodNlls collect_nlls(const metric::FittedFamily& family, const rules::RuleDataset& test_rules,
                        const metric::BaselineResult* baseline) {
  MethodNlls out;
  out.method = explain::to_string(test_rules.meta.method);
  for (const auto& q : family.members) out.by_scorer[metric::to_string(q->kind())] = metric::rule_nlls(*q, test_rules.rules);
  if (baseline) {
    if (baseline->nlls.size() != test_rules.rules.size()) {
      throw std::invalid_argument("baseline NLLs do not match the test rules");
    }
    out.by_scorer["Base"] = baseline->nlls;
  }
  return out;
}

}  // namespace fidelity::analysis
