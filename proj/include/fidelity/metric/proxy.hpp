#pragma once

#include "fidelity/autodiff/graph.hpp"
#include "fidelity/nmt/layers.hpp"
#include "fidelity/rules/rules.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fidelity::metric {

using ad::NodeId;
using ad::Tensorf;
using Graph = ad::Graph<float>;
using Parameters = ad::ParameterSet<float>;
using rules::RuleDataset;
using rules::RuleInstance;
using rules::TokenId;

enum class ProxyKind { fn, rn, sa };

inline constexpr ProxyKind all_proxy_kinds[] = {ProxyKind::fn, ProxyKind::rn, ProxyKind::sa};

std::string to_string(ProxyKind k);
ProxyKind parse_proxy_kind(std::string_view s);

struct ProxyDims {
  int embedding = 64;
  int hidden = 128;     // RN: both directions together
  int fn_hidden = 256;  // width of the two hidden FN layers
};

// Predicts a rule's label from its words only. The input is 2k
// slots, k source then k target, PAD-filled and masked.
//   fn: summed source and target embeddings -> relu -> relu -> output
//   rn: BiLSTM over the slots, pooled by a learned query
//   sa: one self-attention layer over the slots, pooled by a learned query
// RN/SA slot inputs are token embedding + position encoding + side embedding.
class ProxyModel {
 public:
  ProxyModel(ProxyKind kind, int k, int source_vocab, int target_vocab, ProxyDims dims, std::uint64_t seed);

  ProxyKind kind() const { return kind_; }
  int k() const { return k_; }
  int source_vocab_size() const { return source_vocab_; }
  int target_vocab_size() const { return target_vocab_; }
  const ProxyDims& dims() const { return dims_; }
  Parameters& parameters() { return params_; }
  const Parameters& parameters() const { return params_; }

  // Logits for a batch of rules, one row each. Throws on vocab mismatch or
  // rules with more than k words per side.
  NodeId build(Graph& g, std::span<const RuleInstance* const> batch) const;

  void zero_output_layer();

 private:
  struct Slots;
  Slots layout(std::span<const RuleInstance* const> batch) const;
  NodeId build_fn(Graph& g, std::span<const RuleInstance* const> batch) const;
  NodeId slot_inputs(Graph& g, const Slots& s) const;
  NodeId pool(Graph& g, NodeId states, const Slots& s) const;

  ProxyKind kind_;
  int k_;
  int source_vocab_;
  int target_vocab_;
  ProxyDims dims_;
  Parameters params_;
  ad::ParamId src_emb_, tgt_emb_, out_w_, out_b_;
  ad::ParamId fc1_w_, fc1_b_, fc2_w_, fc2_b_;          // fn
  ad::ParamId side_emb_, pool_query_, pool_key_;        // rn, sa
  nmt::layers::LstmParams fwd_, bwd_;                   // rn
  nmt::layers::AttentionParams self_;                   // sa
  nmt::layers::NormParams ln1_, ln2_;                   // sa
  nmt::layers::FeedForwardParams ffn_;                  // sa
};

std::vector<float> proxy_forward(const ProxyModel& q, const RuleInstance& rule);

// -log Q(label | rule) per rule, in double, clamped at -log(1e-12).
std::vector<double> rule_nlls(const ProxyModel& q, std::span<const RuleInstance> rules, int batch_size = 64);

}  // namespace fidelity::metric
