#include "architectures.hpp"

#include "fidelity/nmt/layers.hpp"

namespace fidelity::nmt::detail {
namespace {

using namespace layers;

// One encoder layer and one decoder layer, single head, post-norm residuals.
// Decoder self-attention follows s_{t+1/2} = Attn(s_{t-1}, s_<t): the query at
// input position p attends to prefix positions 1..p only (BOS is never a key),
// so at t = 1 the self-attention block contributes nothing.
class Transformer final : public NmtModel {
 public:
  Transformer(ModelDims dims, int source_vocab, int target_vocab, std::uint64_t seed)
      : NmtModel(ModelKind::transformer, dims, source_vocab, target_vocab) {
    std::mt19937_64 rng(seed);
    const int d = dims.embedding;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    src_emb_ = params_.add("enc.emb", ad::normal_tensor(source_vocab, d, emb_std, rng));
    enc_self_ = AttentionParams::create(params_, "enc.self", d, rng);
    enc_ln1_ = NormParams::create(params_, "enc.ln1", d);
    enc_ffn_ = FeedForwardParams::create(params_, "enc.ffn", d, dims.hidden, rng);
    enc_ln2_ = NormParams::create(params_, "enc.ln2", d);

    tgt_emb_ = params_.add("dec.emb", ad::normal_tensor(target_vocab, d, emb_std, rng));
    dec_self_ = AttentionParams::create(params_, "dec.self", d, rng);
    dec_ln1_ = NormParams::create(params_, "dec.ln1", d);
    dec_cross_ = AttentionParams::create(params_, "dec.cross", d, rng);
    dec_ln2_ = NormParams::create(params_, "dec.ln2", d);
    dec_ffn_ = FeedForwardParams::create(params_, "dec.ffn", d, dims.hidden, rng);
    dec_ln3_ = NormParams::create(params_, "dec.ln3", d);
    out_w_ = params_.add("out.w", ad::xavier_uniform(d, target_vocab, rng));
    out_b_ = params_.add("out.b", Tensorf::Zero(1, target_vocab));
  }

  DecoderTrace build(Graph& g, std::span<const TokenId> source, std::span<const TokenId> decoder_inputs,
                     const Occlusion* occlusion) const override {
    validate(source, decoder_inputs);
    const int d = dims_.embedding;
    const auto src_len = static_cast<int>(source.size());
    const auto tgt_len = static_cast<int>(decoder_inputs.size());
    DecoderTrace trace;

    const auto src = embed(g, src_emb_, source, occlusion ? &occlusion->source : nullptr);
    trace.source_embeddings = src.lookup;
    NodeId x = g.add(src.output, g.input(sinusoidal_range(src_len, d)));
    x = norm(g, g.add(x, attention(g, x, x, enc_self_).output), enc_ln1_);
    const NodeId memory = norm(g, g.add(x, feed_forward(g, x, enc_ffn_)), enc_ln2_);

    const auto tgt = embed(g, tgt_emb_, decoder_inputs, occlusion ? &occlusion->target : nullptr);
    trace.target_embeddings = tgt.lookup;
    NodeId y = g.add(tgt.output, g.input(sinusoidal_range(tgt_len, d)));

    Tensorf mask = Tensorf::Zero(tgt_len, tgt_len);
    Tensorf row_keep = Tensorf::Ones(tgt_len, 1);
    for (int p = 0; p < tgt_len; ++p) {
      for (int c = 0; c < tgt_len; ++c) mask(p, c) = (c == 0 || c > p) ? 1.0f : 0.0f;
    }
    row_keep(0, 0) = 0.0f;
    const auto self = attention(g, y, y, dec_self_, &mask, &row_keep);
    trace.self_attention = self.weights;
    const NodeId half = norm(g, g.add(y, self.output), dec_ln1_);

    const auto cross = attention(g, half, memory, dec_cross_);
    trace.cross_attention = cross.weights;
    NodeId s = norm(g, g.add(half, cross.output), dec_ln2_);
    s = norm(g, g.add(s, feed_forward(g, s, dec_ffn_)), dec_ln3_);
    trace.states = s;
    trace.logits = g.add(g.matmul(s, g.param(out_w_)), g.param(out_b_));
    return trace;
  }

  std::unique_ptr<NmtModel> clone() const override { return std::make_unique<Transformer>(*this); }
  ad::ParamId source_embedding_table() const override { return src_emb_; }
  ad::ParamId target_embedding_table() const override { return tgt_emb_; }
  void zero_output_layer() override {
    params_.value(out_w_).setZero();
    params_.value(out_b_).setZero();
  }

 private:
  ad::ParamId src_emb_, tgt_emb_, out_w_, out_b_;
  AttentionParams enc_self_, dec_self_, dec_cross_;
  NormParams enc_ln1_, enc_ln2_, dec_ln1_, dec_ln2_, dec_ln3_;
  FeedForwardParams enc_ffn_, dec_ffn_;
};

}  // namespace

std::unique_ptr<NmtModel> make_transformer(ModelDims dims, int source_vocab, int target_vocab,
                                           std::uint64_t seed) {
  return std::make_unique<Transformer>(dims, source_vocab, target_vocab, seed);
}

}  // namespace fidelity::nmt::detail
