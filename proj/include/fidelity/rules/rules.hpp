#pragma once

#include "fidelity/explain/relevance.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fidelity::rules {

using explain::Method;
using explain::RelevanceVector;
using explain::Side;
using nmt::SentencePair;
using nmt::TokenId;

enum class Scenario { teacher_forcing, real_decode, golden };

inline constexpr Scenario all_scenarios[] = {Scenario::teacher_forcing, Scenario::real_decode, Scenario::golden};

std::string to_string(Scenario s);
Scenario parse_scenario(std::string_view s);

struct Word {
  TokenId token = 0;
  int position = 0;  // 1-based position in x or in the prefix

  friend bool operator==(const Word&, const Word&) = default;
};

struct RuleInstance {
  std::vector<Word> source;
  std::vector<Word> target;
  TokenId label = 0;
  std::size_t sentence_id = 0;
  int t = 1;

  friend bool operator==(const RuleInstance&, const RuleInstance&) = default;
};

struct RuleMeta {
  Method method = Method::pd;
  int k = 1;
  Scenario scenario = Scenario::teacher_forcing;
  std::string model_id;
  std::string corpus_id;

  friend bool operator==(const RuleMeta&, const RuleMeta&) = default;
};

struct RuleDataset {
  RuleMeta meta;
  std::vector<RuleInstance> rules;
};

// The k highest-scoring positions of one side (ties to the smaller position),
// returned in position order. `tokens` are the words of that side.
std::vector<Word> topk_words(const RelevanceVector& rv, Side side, int k, std::span<const TokenId> tokens);

// Scores the decision for its own prediction f(c_t) and keeps the top k words
// of each side; the rule's label is f(c_t).
RuleInstance extract_rule(const nmt::NmtModel& model, Method method, const nmt::Context& ctx, int k);

// Relevance for every decision of a corpus under one scenario, independent of k.
struct ExplainedSentence {
  std::size_t sentence_id = 0;
  std::vector<TokenId> source;
  std::vector<TokenId> inputs;  // BOS + prefix words
  std::vector<TokenId> labels;  // rule label per decision
  std::vector<RelevanceVector> decisions;
};

struct ExplainedCorpus {
  Method method = Method::pd;
  Scenario scenario = Scenario::teacher_forcing;
  std::vector<ExplainedSentence> sentences;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
};

struct ExtractionOptions {
  int decode_max_len = 64;  // greedy decoding limit for real-decode
  std::size_t first_sentence_id = 0;
};

// Contexts come from the gold prefix (teacher-forcing, golden) or the greedy
// decode (real-decode). Relevance is scored for f(c_t) in every scenario; the
// golden scenario then labels each rule with the gold token.
ExplainedCorpus explain_corpus(const nmt::NmtModel& model, Method method, std::span<const SentencePair> corpus,
                               Scenario scenario, const ExtractionOptions& options = {});

RuleDataset make_rules(const ExplainedCorpus& explained, int k, std::string model_id = {},
                       std::string corpus_id = {});

// One rule per timestep per sentence, ordered by (sentence id, t).
RuleDataset build_rule_dataset(const nmt::NmtModel& model, Method method, std::span<const SentencePair> corpus,
                               Scenario scenario, int k, const ExtractionOptions& options = {});

// Unique rules (token multisets per side plus label) binned by frequency:
// (0,1], (1,10], (10,100], (100,1000], (1000,inf).
struct DensityHistogram {
  std::size_t total = 0;
  std::array<std::size_t, 5> bins{};
};

DensityHistogram density_histogram(const RuleDataset& ds);

// One JSON object per line:
// {"sid","t","scenario","method","k","src":[[tok,pos],...],"tgt":[...],"label"}.
// The full meta goes to a sidecar file `<path>.meta.json`.
void write_rules(const std::filesystem::path& path, const RuleDataset& ds);
RuleDataset read_rules(const std::filesystem::path& path);

}  // namespace fidelity::rules
