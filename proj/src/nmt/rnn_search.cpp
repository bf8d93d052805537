#include "architectures.hpp"

#include "fidelity/nmt/layers.hpp"

namespace fidelity::nmt::detail {
namespace {

using namespace layers;

// Bidirectional LSTM encoder (hidden/2 per direction) and an LSTM decoder
// with additive attention: alpha_t = softmax(v . tanh(W_s s_{t-1} + W_h h_i)),
// s_t = LSTM([emb(y_{t-1}); context_t], s_{t-1}).
class RnnSearch final : public NmtModel {
 public:
  RnnSearch(ModelDims dims, int source_vocab, int target_vocab, std::uint64_t seed)
      : NmtModel(ModelKind::rnn_search, dims, source_vocab, target_vocab) {
    if (dims.hidden % 2 != 0) throw std::invalid_argument("rnn-search hidden size must be even");
    std::mt19937_64 rng(seed);
    const int d = dims.embedding;
    const int h = dims.hidden;
    src_emb_ = params_.add("enc.emb", ad::normal_tensor(source_vocab, d, 0.1, rng));
    enc_fwd_ = LstmParams::create(params_, "enc.fwd", d, h / 2, rng);
    enc_bwd_ = LstmParams::create(params_, "enc.bwd", d, h / 2, rng);
    init_w_ = params_.add("dec.init.w", ad::xavier_uniform(h, h, rng));
    init_b_ = params_.add("dec.init.b", Tensorf::Zero(1, h));
    att_s_ = params_.add("att.ws", ad::xavier_uniform(h, h, rng));
    att_h_ = params_.add("att.wh", ad::xavier_uniform(h, h, rng));
    att_v_ = params_.add("att.v", ad::xavier_uniform(h, 1, rng));
    tgt_emb_ = params_.add("dec.emb", ad::normal_tensor(target_vocab, d, 0.1, rng));
    dec_ = LstmParams::create(params_, "dec.lstm", d + h, h, rng);
    out_w_ = params_.add("out.w", ad::xavier_uniform(2 * h, target_vocab, rng));
    out_b_ = params_.add("out.b", Tensorf::Zero(1, target_vocab));
  }

  DecoderTrace build(Graph& g, std::span<const TokenId> source, std::span<const TokenId> decoder_inputs,
                     const Occlusion* occlusion) const override {
    validate(source, decoder_inputs);
    const auto src_len = static_cast<Eigen::Index>(source.size());
    const auto tgt_len = static_cast<Eigen::Index>(decoder_inputs.size());
    DecoderTrace trace;

    const auto src = embed(g, src_emb_, source, occlusion ? &occlusion->source : nullptr);
    trace.source_embeddings = src.lookup;
    const NodeId memory = bidirectional_lstm(g, src.output, enc_fwd_, enc_bwd_);
    const NodeId keys = g.matmul(memory, g.param(att_h_));

    const NodeId mean_row = g.input(Tensorf::Constant(1, src_len, 1.0f / static_cast<float>(src_len)));
    LstmState state{g.tanh(g.add(g.matmul(g.matmul(mean_row, memory), g.param(init_w_)), g.param(init_b_))),
                    g.input(Tensorf::Zero(1, dims_.hidden))};

    const auto tgt = embed(g, tgt_emb_, decoder_inputs, occlusion ? &occlusion->target : nullptr);
    trace.target_embeddings = tgt.lookup;

    std::vector<NodeId> alphas, features, states;
    for (Eigen::Index p = 0; p < tgt_len; ++p) {
      const NodeId query = g.matmul(state.h, g.param(att_s_));
      const NodeId energy = g.matmul(g.tanh(g.add(keys, query)), g.param(att_v_));
      const NodeId alpha = g.softmax(g.transpose(energy));
      const NodeId context = g.matmul(alpha, memory);
      const NodeId input = g.concat({g.slice(tgt.output, ad::Axis::rows, p, 1), context}, ad::Axis::cols);
      state = lstm_step(g, input, state, dec_);
      alphas.push_back(alpha);
      states.push_back(state.h);
      features.push_back(g.concat({state.h, context}, ad::Axis::cols));
    }
    trace.cross_attention = g.concat(alphas, ad::Axis::rows);
    trace.states = g.concat(states, ad::Axis::rows);
    const NodeId feats = g.concat(features, ad::Axis::rows);
    trace.logits = g.add(g.matmul(feats, g.param(out_w_)), g.param(out_b_));
    return trace;
  }

  std::unique_ptr<NmtModel> clone() const override { return std::make_unique<RnnSearch>(*this); }
  ad::ParamId source_embedding_table() const override { return src_emb_; }
  ad::ParamId target_embedding_table() const override { return tgt_emb_; }
  void zero_output_layer() override {
    params_.value(out_w_).setZero();
    params_.value(out_b_).setZero();
  }

 private:
  ad::ParamId src_emb_, tgt_emb_, init_w_, init_b_, att_s_, att_h_, att_v_, out_w_, out_b_;
  LstmParams enc_fwd_, enc_bwd_, dec_;
};

}  // namespace

std::unique_ptr<NmtModel> make_rnn_search(ModelDims dims, int source_vocab, int target_vocab,
                                          std::uint64_t seed) {
  return std::make_unique<RnnSearch>(dims, source_vocab, target_vocab, seed);
}

}  // namespace fidelity::nmt::detail
