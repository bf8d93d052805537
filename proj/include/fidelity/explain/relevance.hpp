#pragma once

#include "fidelity/nmt/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fidelity::explain {

using nmt::Context;
using nmt::NmtModel;
using nmt::TokenId;
using nmt::Tensorf;

enum class Method { attn, pd, ngrad, wgrad };
enum class Side { source, target };

inline constexpr Method all_methods[] = {Method::attn, Method::pd, Method::ngrad, Method::wgrad};

std::string to_string(Method m);
Method parse_method(std::string_view s);
std::string to_string(Side s);

class UnsupportedMethod : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Scores for one decision. source[i-1] scores source position i (1..|x|);
// target[j-1] scores prefix position j (1..t-1).
struct RelevanceVector {
  Method method = Method::attn;
  std::size_t sentence_id = 0;
  int t = 1;
  TokenId label = 0;  // the y the scores were computed for
  std::vector<double> source;
  std::vector<double> target;
  bool target_scored = true;  // false for rnn-search attention

  // Throws UnsupportedMethod when the side was not scored.
  const std::vector<double>& side(Side s) const;
};

// Gradient of P(y | c_t) with respect to each embedding lookup, one row per
// occurrence: |x| source rows and t-1 prefix rows.
struct EmbeddingGradient {
  Tensorf source;
  Tensorf target;
};

// The looked-up embeddings of the same occurrences.
struct ContextEmbeddings {
  Tensorf source;
  Tensorf target;
};

RelevanceVector relevance_attention(const NmtModel& model, const Context& ctx, TokenId y);

// Exactly one backward pass. Throws std::runtime_error naming the decision
// when the gradient is not finite.
EmbeddingGradient relevance_gradient(const NmtModel& model, const Context& ctx, TokenId y,
                                     const nmt::Occlusion* occlusion = nullptr);

ContextEmbeddings context_embeddings(const NmtModel& model, const Context& ctx);

RelevanceVector relevance_ngrad(const EmbeddingGradient& g);
RelevanceVector relevance_wgrad(const EmbeddingGradient& g, const ContextEmbeddings& embeddings);

// P(y | c_t) - P(y | c_t with one occurrence's embedding zeroed), one forward
// pass per occurrence. `occlusion` is applied underneath every pass.
RelevanceVector relevance_pd(const NmtModel& model, const Context& ctx, TokenId y,
                             const nmt::Occlusion* occlusion = nullptr);

// Dispatches one decision to the named method.
RelevanceVector relevance(Method method, const NmtModel& model, const Context& ctx, TokenId y);

// Every decision of one decoder input sequence. Decision t (1-based) has the
// prefix inputs[1..t-1] and is scored for labels[t-1]; inputs[0] is BOS.
struct SentenceDecisions {
  std::size_t sentence_id = 0;
  std::vector<TokenId> source;
  std::vector<TokenId> inputs;
  std::vector<TokenId> labels;
};

struct SentenceExplanation {
  std::vector<RelevanceVector> decisions;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
};

// Same scores as calling relevance() per decision, computed with shared
// passes: gradient methods run one graph and |labels| backward passes, PD runs
// one occluded teacher-forced pass per context occurrence.
SentenceExplanation explain_sentence(Method method, const NmtModel& model, const SentenceDecisions& decisions);

// Line-delimited dump: {"sid","t","y","method","scores":[[side,pos,score],...]}.
nlohmann::ordered_json relevance_to_json(const RelevanceVector& rv);
void write_relevance_dump(const std::filesystem::path& path, std::span<const RelevanceVector> rows);

}  // namespace fidelity::explain
