#pragma once

#include "fidelity/autodiff/checkpoint.hpp"
#include "fidelity/autodiff/graph.hpp"
#include "fidelity/nmt/corpus.hpp"
#include "fidelity/nmt/vocab.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fidelity::nmt {

using ad::NodeId;
using ad::Tensorf;
using Graph = ad::Graph<float>;
using Parameters = ad::ParameterSet<float>;

enum class ModelKind { rnn_search, transformer };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view s);

struct ModelDims {
  int embedding = 64;
  int hidden = 128;
};

// Positions whose input embedding is replaced by the zero vector. `source`
// is indexed by source position (0-based); `target` by decoder input position,
// where index 0 is BOS and index j is the prefix word y_j.
struct Occlusion {
  std::vector<bool> source;
  std::vector<bool> target;

  bool source_occluded(std::size_t i) const { return i < source.size() && source[i]; }
  bool target_occluded(std::size_t j) const { return j < target.size() && target[j]; }
};

// Nodes recorded by one teacher-forced pass over `decoder_inputs` (T rows).
struct DecoderTrace {
  NodeId logits;             // T x |V_tgt|
  NodeId source_embeddings;  // |x| x d, lookup sites
  NodeId target_embeddings;  // T x d, lookup sites (row 0 is BOS)
  NodeId cross_attention;    // T x |x|
  std::optional<NodeId> self_attention;  // T x T, transformer only
  NodeId states;             // T x state width, s_t
};

class NmtModel {
 public:
  NmtModel(ModelKind kind, ModelDims dims, int source_vocab, int target_vocab)
      : kind_(kind), dims_(dims), source_vocab_(source_vocab), target_vocab_(target_vocab) {}
  virtual ~NmtModel() = default;

  ModelKind kind() const { return kind_; }
  const ModelDims& dims() const { return dims_; }
  int source_vocab_size() const { return source_vocab_; }
  int target_vocab_size() const { return target_vocab_; }

  Parameters& parameters() { return params_; }
  const Parameters& parameters() const { return params_; }

  virtual DecoderTrace build(Graph& g, std::span<const TokenId> source,
                             std::span<const TokenId> decoder_inputs,
                             const Occlusion* occlusion = nullptr) const = 0;

  virtual std::unique_ptr<NmtModel> clone() const = 0;

  virtual ad::ParamId source_embedding_table() const = 0;
  virtual ad::ParamId target_embedding_table() const = 0;

  // Zeroes the output projection and bias so every distribution is uniform.
  virtual void zero_output_layer() = 0;

  // Throws std::out_of_range for ids outside the vocabularies.
  void validate(std::span<const TokenId> source, std::span<const TokenId> decoder_inputs) const;

 protected:
  ModelKind kind_;
  ModelDims dims_;
  int source_vocab_;
  int target_vocab_;
  Parameters params_;
};

std::unique_ptr<NmtModel> make_model(ModelKind kind, ModelDims dims, int source_vocab, int target_vocab,
                                     std::uint64_t seed);

// Result of nmt_forward at a single decision point.
struct Prediction {
  std::vector<float> dist;
  std::vector<float> log_dist;
  std::vector<float> cross_attention;  // length |x|
  std::vector<float> self_attention;   // length t-1 (transformer only)
  std::vector<float> state;

  TokenId argmax() const;
};

Prediction nmt_forward(const NmtModel& model, const Context& ctx, const Occlusion* occlusion = nullptr);

// All decision points of one sentence in a single teacher-forced pass:
// row t-1 holds P(. | x, inputs[0..t-1]).
struct SequencePrediction {
  Tensorf log_probs;        // T x V
  Tensorf cross_attention;  // T x |x|
  Tensorf self_attention;   // T x T, empty for rnn-search

  TokenId argmax(int row) const;
};

SequencePrediction forward_sequence(const NmtModel& model, std::span<const TokenId> source,
                                    std::span<const TokenId> decoder_inputs,
                                    const Occlusion* occlusion = nullptr);

// Summed -log P(y_t | c_t) over the whole target (teacher forcing).
double sentence_nll(const NmtModel& model, const SentencePair& pair);

struct Decoded {
  std::vector<TokenId> tokens;  // without BOS; ends with EOS unless truncated
  bool truncated = false;
};

Decoded greedy_decode(const NmtModel& model, std::span<const TokenId> source, int max_len);

// Checkpoint = tensor file plus a header with kind, dims and vocab hashes.
void save_model(const std::filesystem::path& path, const NmtModel& model, const Vocab& source_vocab,
                const Vocab& target_vocab);
std::unique_ptr<NmtModel> load_model(const std::filesystem::path& path, const Vocab& source_vocab,
                                     const Vocab& target_vocab);

}  // namespace fidelity::nmt
