#include "fidelity/nmt/model.hpp"

#include "architectures.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace fidelity::nmt {

std::string to_string(ModelKind kind) {
  return kind == ModelKind::transformer ? "transformer" : "rnn-search";
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "transformer") return ModelKind::transformer;
  if (s == "rnn-search" || s == "rnn") return ModelKind::rnn_search;
  throw std::invalid_argument("unknown model kind '" + std::string(s) + "'");
}

void NmtModel::validate(std::span<const TokenId> source, std::span<const TokenId> decoder_inputs) const {
  if (source.empty() || decoder_inputs.empty()) throw std::invalid_argument("empty source or decoder input");
  for (TokenId id : source) {
    if (id < 0 || id >= source_vocab_) {
      throw std::out_of_range("source token id " + std::to_string(id) + " outside vocab of size " +
                              std::to_string(source_vocab_));
    }
  }
  for (TokenId id : decoder_inputs) {
    if (id < 0 || id >= target_vocab_) {
      throw std::out_of_range("target token id " + std::to_string(id) + " outside vocab of size " +
                              std::to_string(target_vocab_));
    }
  }
}

std::unique_ptr<NmtModel> make_model(ModelKind kind, ModelDims dims, int source_vocab, int target_vocab,
                                     std::uint64_t seed) {
  if (dims.embedding < 1 || dims.hidden < 1) throw std::invalid_argument("model dims must be positive");
  if (kind == ModelKind::transformer) return detail::make_transformer(dims, source_vocab, target_vocab, seed);
  return detail::make_rnn_search(dims, source_vocab, target_vocab, seed);
}

TokenId Prediction::argmax() const {
  return static_cast<TokenId>(std::max_element(dist.begin(), dist.end()) - dist.begin());
}

TokenId SequencePrediction::argmax(int row) const {
  Eigen::Index col = 0;
  log_probs.row(row).maxCoeff(&col);
  return static_cast<TokenId>(col);
}

Prediction nmt_forward(const NmtModel& model, const Context& ctx, const Occlusion* occlusion) {
  Graph g(model.parameters());
  const auto inputs = ctx.decoder_inputs();
  const auto trace = model.build(g, ctx.source, inputs, occlusion);
  const auto last = static_cast<Eigen::Index>(inputs.size()) - 1;
  const NodeId row = g.slice(trace.logits, ad::Axis::rows, last, 1);
  const NodeId probs_node = g.softmax(row);
  const NodeId logp_node = g.log_softmax(row);
  const auto& probs = g.value(probs_node);
  const auto& logp = g.value(logp_node);

  Prediction p;
  p.dist.assign(probs.data(), probs.data() + probs.size());
  p.log_dist.assign(logp.data(), logp.data() + logp.size());
  const auto& cross = g.value(trace.cross_attention);
  p.cross_attention.assign(cross.row(last).data(), cross.row(last).data() + cross.cols());
  if (trace.self_attention) {
    const auto& self = g.value(*trace.self_attention);
    for (Eigen::Index j = 1; j <= last; ++j) p.self_attention.push_back(self(last, j));
  }
  const auto& states = g.value(trace.states);
  p.state.assign(states.row(last).data(), states.row(last).data() + states.cols());
  return p;
}

SequencePrediction forward_sequence(const NmtModel& model, std::span<const TokenId> source,
                                    std::span<const TokenId> decoder_inputs, const Occlusion* occlusion) {
  Graph g(model.parameters());
  const auto trace = model.build(g, source, decoder_inputs, occlusion);
  SequencePrediction out;
  out.log_probs = g.value(g.log_softmax(trace.logits));
  out.cross_attention = g.value(trace.cross_attention);
  if (trace.self_attention) out.self_attention = g.value(*trace.self_attention);
  return out;
}

double sentence_nll(const NmtModel& model, const SentencePair& pair) {
  const auto inputs = std::span<const TokenId>(pair.target).first(pair.target.size() - 1);
  const auto seq = forward_sequence(model, pair.source, inputs);
  double nll = 0.0;
  for (int t = 0; t < pair.target_steps(); ++t) nll -= seq.log_probs(t, pair.target[static_cast<std::size_t>(t) + 1]);
  return nll;
}

Decoded greedy_decode(const NmtModel& model, std::span<const TokenId> source, int max_len) {
  Decoded out;
  std::vector<TokenId> inputs{bos_id};
  while (static_cast<int>(out.tokens.size()) < max_len) {
    Graph g(model.parameters());
    const auto trace = model.build(g, source, inputs);
    const auto& logits = g.value(trace.logits);
    Eigen::Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    const auto next = static_cast<TokenId>(best);
    out.tokens.push_back(next);
    if (next == eos_id) return out;
    inputs.push_back(next);
  }
  out.truncated = true;
  return out;
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << v;
  return ss.str();
}

}  // namespace

void save_model(const std::filesystem::path& path, const NmtModel& model, const Vocab& source_vocab,
                const Vocab& target_vocab) {
  ad::Metadata meta{
      {"format", "fidelity-nmt"},
      {"kind", to_string(model.kind())},
      {"embedding", std::to_string(model.dims().embedding)},
      {"hidden", std::to_string(model.dims().hidden)},
      {"source_vocab_size", std::to_string(source_vocab.size())},
      {"target_vocab_size", std::to_string(target_vocab.size())},
      {"source_vocab_hash", hex(source_vocab.content_hash())},
      {"target_vocab_hash", hex(target_vocab.content_hash())},
  };
  ad::save_checkpoint(path, model.parameters(), meta);
}

std::unique_ptr<NmtModel> load_model(const std::filesystem::path& path, const Vocab& source_vocab,
                                     const Vocab& target_vocab) {
  auto ck = ad::load_checkpoint(path);
  const auto get = [&](const std::string& key) {
    auto it = ck.metadata.find(key);
    if (it == ck.metadata.end()) throw ad::CheckpointError("model checkpoint lacks '" + key + "'");
    return it->second;
  };
  if (get("format") != "fidelity-nmt") throw ad::CheckpointError("not an NMT model checkpoint");
  if (get("source_vocab_hash") != hex(source_vocab.content_hash()) ||
      get("target_vocab_hash") != hex(target_vocab.content_hash())) {
    throw ad::CheckpointError("vocabularies do not match the checkpoint");
  }
  ModelDims dims{std::stoi(get("embedding")), std::stoi(get("hidden"))};
  auto model = make_model(parse_model_kind(get("kind")), dims, static_cast<int>(source_vocab.size()),
                          static_cast<int>(target_vocab.size()), 0);
  ad::assign_parameters(model->parameters(), ck.parameters);
  return model;
}

}  // namespace fidelity::nmt
