#include "fidelity/explain/relevance.hpp"

#include <cmath>
#include <fstream>

namespace fidelity::explain {

using nmt::Graph;
using nmt::NodeId;
using nmt::Occlusion;

std::string to_string(Method m) {
  switch (m) {
    case Method::attn: return "attn";
    case Method::pd: return "pd";
    case Method::ngrad: return "ngrad";
    case Method::wgrad: return "wgrad";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (Method m : all_methods) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown explanation method '" + std::string(s) + "'");
}

std::string to_string(Side s) { return s == Side::source ? "source" : "target"; }

const std::vector<double>& RelevanceVector::side(Side s) const {
  if (s == Side::source) return source;
  if (!target_scored) {
    throw UnsupportedMethod(to_string(method) + " does not score target-prefix words for this model");
  }
  return target;
}

namespace {

std::string decision_name(std::size_t sid, int t) {
  return "sentence " + std::to_string(sid) + ", t=" + std::to_string(t);
}

std::vector<double> row_l1(const Tensorf& g) {
  std::vector<double> out(static_cast<std::size_t>(g.rows()));
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < g.cols(); ++c) s += std::abs(static_cast<double>(g(r, c)));
    out[static_cast<std::size_t>(r)] = s;
  }
  return out;
}

std::vector<double> row_dot(const Tensorf& a, const Tensorf& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("gradient and embedding shapes differ");
  }
  std::vector<double> out(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) s += static_cast<double>(a(r, c)) * static_cast<double>(b(r, c));
    out[static_cast<std::size_t>(r)] = s;
  }
  return out;
}

void check_finite(const Tensorf& g, std::size_t sid, int t) {
  if (!g.allFinite()) throw std::runtime_error("non-finite embedding gradient at " + decision_name(sid, t));
}

// Rows 1..t-1 of a decoder-input-indexed tensor, i.e. the prefix words.
Tensorf prefix_rows(const Tensorf& m, int t) { return m.middleRows(1, t - 1); }

RelevanceVector attention_scores(const NmtModel& model, const Tensorf& cross, const Tensorf& self, int t) {
  RelevanceVector rv;
  rv.method = Method::attn;
  rv.t = t;
  const auto row = static_cast<Eigen::Index>(t - 1);
  rv.source.resize(static_cast<std::size_t>(cross.cols()));
  for (Eigen::Index i = 0; i < cross.cols(); ++i) rv.source[static_cast<std::size_t>(i)] = cross(row, i);
  if (model.kind() == nmt::ModelKind::transformer) {
    for (Eigen::Index j = 1; j < t; ++j) rv.target.push_back(self(row, j));
  } else {
    rv.target_scored = false;
  }
  return rv;
}

Occlusion with_one(const Occlusion* base, std::size_t source_len, std::size_t input_len, Side side,
                   std::size_t index) {
  Occlusion o;
  o.source.assign(source_len, false);
  o.target.assign(input_len, false);
  if (base) {
    for (std::size_t i = 0; i < source_len; ++i) o.source[i] = base->source_occluded(i);
    for (std::size_t j = 0; j < input_len; ++j) o.target[j] = base->target_occluded(j);
  }
  (side == Side::source ? o.source : o.target)[index] = true;
  return o;
}

double probability(const nmt::Prediction& p, TokenId y) { return p.dist.at(static_cast<std::size_t>(y)); }

void check_label(const NmtModel& model, TokenId y) {
  if (y < 0 || y >= model.target_vocab_size()) {
    throw std::out_of_range("label " + std::to_string(y) + " outside the target vocabulary");
  }
}

}  // namespace

RelevanceVector relevance_attention(const NmtModel& model, const Context& ctx, TokenId y) {
  check_label(model, y);
  const auto inputs = ctx.decoder_inputs();
  const auto seq = nmt::forward_sequence(model, ctx.source, inputs);
  auto rv = attention_scores(model, seq.cross_attention, seq.self_attention, ctx.timestep());
  rv.sentence_id = ctx.sentence_id;
  rv.label = y;
  return rv;
}

EmbeddingGradient relevance_gradient(const NmtModel& model, const Context& ctx, TokenId y,
                                     const Occlusion* occlusion) {
  check_label(model, y);
  const int t = ctx.timestep();
  const auto inputs = ctx.decoder_inputs();
  Graph g(model.parameters());
  const auto trace = model.build(g, ctx.source, inputs, occlusion);
  const NodeId probs = g.softmax(g.slice(trace.logits, ad::Axis::rows, t - 1, 1));
  const int col[] = {y};
  g.backward(g.gather(probs, col));
  EmbeddingGradient out{g.grad(trace.source_embeddings), prefix_rows(g.grad(trace.target_embeddings), t)};
  check_finite(out.source, ctx.sentence_id, t);
  check_finite(out.target, ctx.sentence_id, t);
  return out;
}

ContextEmbeddings context_embeddings(const NmtModel& model, const Context& ctx) {
  const auto& src = model.parameters().value(model.source_embedding_table());
  const auto& tgt = model.parameters().value(model.target_embedding_table());
  ContextEmbeddings e{Tensorf(static_cast<Eigen::Index>(ctx.source.size()), src.cols()),
                      Tensorf(static_cast<Eigen::Index>(ctx.prefix.size()), tgt.cols())};
  for (std::size_t i = 0; i < ctx.source.size(); ++i) e.source.row(static_cast<Eigen::Index>(i)) = src.row(ctx.source[i]);
  for (std::size_t j = 0; j < ctx.prefix.size(); ++j) e.target.row(static_cast<Eigen::Index>(j)) = tgt.row(ctx.prefix[j]);
  return e;
}

RelevanceVector relevance_ngrad(const EmbeddingGradient& g) {
  RelevanceVector rv;
  rv.method = Method::ngrad;
  rv.t = static_cast<int>(g.target.rows()) + 1;
  rv.source = row_l1(g.source);
  rv.target = row_l1(g.target);
  return rv;
}

RelevanceVector relevance_wgrad(const EmbeddingGradient& g, const ContextEmbeddings& embeddings) {
  RelevanceVector rv;
  rv.method = Method::wgrad;
  rv.t = static_cast<int>(g.target.rows()) + 1;
  rv.source = row_dot(g.source, embeddings.source);
  rv.target = row_dot(g.target, embeddings.target);
  return rv;
}

RelevanceVector relevance_pd(const NmtModel& model, const Context& ctx, TokenId y, const Occlusion* occlusion) {
  check_label(model, y);
  const auto input_len = ctx.prefix.size() + 1;
  const double full = probability(nmt::nmt_forward(model, ctx, occlusion), y);
  RelevanceVector rv;
  rv.method = Method::pd;
  rv.sentence_id = ctx.sentence_id;
  rv.t = ctx.timestep();
  rv.label = y;
  for (std::size_t i = 0; i < ctx.source.size(); ++i) {
    const auto o = with_one(occlusion, ctx.source.size(), input_len, Side::source, i);
    rv.source.push_back(full - probability(nmt::nmt_forward(model, ctx, &o), y));
  }
  for (std::size_t j = 1; j < input_len; ++j) {
    const auto o = with_one(occlusion, ctx.source.size(), input_len, Side::target, j);
    rv.target.push_back(full - probability(nmt::nmt_forward(model, ctx, &o), y));
  }
  return rv;
}

RelevanceVector relevance(Method method, const NmtModel& model, const Context& ctx, TokenId y) {
  RelevanceVector rv;
  switch (method) {
    case Method::attn: return relevance_attention(model, ctx, y);
    case Method::pd: return relevance_pd(model, ctx, y);
    case Method::ngrad: rv = relevance_ngrad(relevance_gradient(model, ctx, y)); break;
    case Method::wgrad:
      rv = relevance_wgrad(relevance_gradient(model, ctx, y), context_embeddings(model, ctx));
      break;
  }
  rv.sentence_id = ctx.sentence_id;
  rv.label = y;
  return rv;
}

namespace {

void validate_decisions(const NmtModel& model, const SentenceDecisions& d) {
  if (d.inputs.empty() || d.inputs.size() != d.labels.size()) {
    throw std::invalid_argument("sentence decisions need one label per decoder input");
  }
  if (d.inputs.front() != nmt::bos_id) throw std::invalid_argument("decoder inputs must start with BOS");
  for (TokenId y : d.labels) check_label(model, y);
}

SentenceExplanation explain_gradients(Method method, const NmtModel& model, const SentenceDecisions& d) {
  SentenceExplanation out;
  Graph g(model.parameters());
  const auto trace = model.build(g, d.source, d.inputs);
  out.forward_passes = 1;
  const NodeId probs = g.softmax(trace.logits);
  const Tensorf src_emb = g.value(trace.source_embeddings);
  const Tensorf tgt_emb = g.value(trace.target_embeddings);
  const auto steps = static_cast<int>(d.labels.size());
  std::vector<NodeId> picks;
  for (int t = 1; t <= steps; ++t) {
    const int col[] = {d.labels[static_cast<std::size_t>(t - 1)]};
    picks.push_back(g.gather(g.slice(probs, ad::Axis::rows, t - 1, 1), col));
  }
  for (int t = 1; t <= steps; ++t) {
    g.backward(picks[static_cast<std::size_t>(t - 1)]);
    EmbeddingGradient grad{g.grad(trace.source_embeddings), prefix_rows(g.grad(trace.target_embeddings), t)};
    check_finite(grad.source, d.sentence_id, t);
    check_finite(grad.target, d.sentence_id, t);
    RelevanceVector rv = method == Method::ngrad
                             ? relevance_ngrad(grad)
                             : relevance_wgrad(grad, ContextEmbeddings{src_emb, prefix_rows(tgt_emb, t)});
    rv.sentence_id = d.sentence_id;
    rv.label = d.labels[static_cast<std::size_t>(t - 1)];
    out.decisions.push_back(std::move(rv));
  }
  out.backward_passes = g.backward_count();
  return out;
}

SentenceExplanation explain_pd(const NmtModel& model, const SentenceDecisions& d) {
  SentenceExplanation out;
  const auto steps = d.labels.size();
  auto pass = [&](const Occlusion* o) {
    ++out.forward_passes;
    Graph g(model.parameters());
    const auto trace = model.build(g, d.source, d.inputs, o);
    return Tensorf(g.value(g.softmax(trace.logits)));
  };
  const Tensorf full = pass(nullptr);
  out.decisions.resize(steps);
  for (std::size_t r = 0; r < steps; ++r) {
    auto& rv = out.decisions[r];
    rv.method = Method::pd;
    rv.sentence_id = d.sentence_id;
    rv.t = static_cast<int>(r) + 1;
    rv.label = d.labels[r];
    rv.source.resize(d.source.size());
    rv.target.resize(r);
  }
  auto score = [&](const Tensorf& occluded, std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    const auto y = d.labels[r];
    return static_cast<double>(full(row, y)) - static_cast<double>(occluded(row, y));
  };
  for (std::size_t i = 0; i < d.source.size(); ++i) {
    const auto o = with_one(nullptr, d.source.size(), d.inputs.size(), Side::source, i);
    const Tensorf probs = pass(&o);
    for (std::size_t r = 0; r < steps; ++r) out.decisions[r].source[i] = score(probs, r);
  }
  // Occluding prefix word j only affects decisions t > j.
  for (std::size_t j = 1; j < d.inputs.size(); ++j) {
    const auto o = with_one(nullptr, d.source.size(), d.inputs.size(), Side::target, j);
    const Tensorf probs = pass(&o);
    for (std::size_t r = j; r < steps; ++r) out.decisions[r].target[j - 1] = score(probs, r);
  }
  return out;
}

}  // namespace

SentenceExplanation explain_sentence(Method method, const NmtModel& model, const SentenceDecisions& d) {
  validate_decisions(model, d);
  switch (method) {
    case Method::attn: {
      SentenceExplanation out;
      const auto seq = nmt::forward_sequence(model, d.source, d.inputs);
      out.forward_passes = 1;
      for (std::size_t r = 0; r < d.labels.size(); ++r) {
        auto rv = attention_scores(model, seq.cross_attention, seq.self_attention, static_cast<int>(r) + 1);
        rv.sentence_id = d.sentence_id;
        rv.label = d.labels[r];
        out.decisions.push_back(std::move(rv));
      }
      return out;
    }
    case Method::pd: return explain_pd(model, d);
    case Method::ngrad:
    case Method::wgrad: return explain_gradients(method, model, d);
  }
  throw std::logic_error("unreachable");
}

nlohmann::ordered_json relevance_to_json(const RelevanceVector& rv) {
  nlohmann::ordered_json j;
  j["sid"] = rv.sentence_id;
  j["t"] = rv.t;
  j["y"] = rv.label;
  j["method"] = to_string(rv.method);
  auto scores = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rv.source.size(); ++i) scores.push_back({"source", i + 1, rv.source[i]});
  if (rv.target_scored) {
    for (std::size_t i = 0; i < rv.target.size(); ++i) scores.push_back({"target", i + 1, rv.target[i]});
  }
  j["scores"] = std::move(scores);
  return j;
}

void write_relevance_dump(const std::filesystem::path& path, std::span<const RelevanceVector> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write relevance dump '" + path.string() + "'");
  for (const auto& rv : rows) out << relevance_to_json(rv).dump() << '\n';
}

}  // namespace fidelity::explain
