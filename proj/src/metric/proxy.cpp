#include "fidelity/metric/proxy.hpp"

#include "fidelity/autodiff/init.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fidelity::metric {

using namespace nmt::layers;

std::string to_string(ProxyKind k) {
  switch (k) {
    case ProxyKind::fn: return "FN";
    case ProxyKind::rn: return "RN";
    case ProxyKind::sa: return "SA";
  }
  return "?";
}

ProxyKind parse_proxy_kind(std::string_view s) {
  for (ProxyKind k : all_proxy_kinds) {
    if (to_string(k) == s) return k;
  }
  if (s == "fn") return ProxyKind::fn;
  if (s == "rn") return ProxyKind::rn;
  if (s == "sa") return ProxyKind::sa;
  throw std::invalid_argument("unknown proxy kind '" + std::string(s) + "'");
}

ProxyModel::ProxyModel(ProxyKind kind, int k, int source_vocab, int target_vocab, ProxyDims dims,
                       std::uint64_t seed)
    : kind_(kind), k_(k), source_vocab_(source_vocab), target_vocab_(target_vocab), dims_(dims) {
  if (k < 1) throw std::invalid_argument("proxy k must be at least 1");
  if (dims.embedding < 1 || dims.hidden < 2 || dims.fn_hidden < 1) throw std::invalid_argument("bad proxy dims");
  std::mt19937_64 rng(seed);
  const int d = dims.embedding;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  src_emb_ = params_.add("src.emb", ad::normal_tensor(source_vocab, d, emb_std, rng));
  tgt_emb_ = params_.add("tgt.emb", ad::normal_tensor(target_vocab, d, emb_std, rng));
  int width = d;
  switch (kind) {
    case ProxyKind::fn:
      fc1_w_ = params_.add("fc1.w", ad::xavier_uniform(2 * d, dims.fn_hidden, rng));
      fc1_b_ = params_.add("fc1.b", Tensorf::Zero(1, dims.fn_hidden));
      fc2_w_ = params_.add("fc2.w", ad::xavier_uniform(dims.fn_hidden, dims.fn_hidden, rng));
      fc2_b_ = params_.add("fc2.b", Tensorf::Zero(1, dims.fn_hidden));
      width = dims.fn_hidden;
      break;
    case ProxyKind::rn:
      if (dims.hidden % 2 != 0) throw std::invalid_argument("RN hidden size must be even");
      side_emb_ = params_.add("side.emb", ad::normal_tensor(2, d, emb_std, rng));
      fwd_ = LstmParams::create(params_, "rn.fwd", d, dims.hidden / 2, rng);
      bwd_ = LstmParams::create(params_, "rn.bwd", d, dims.hidden / 2, rng);
      width = dims.hidden;
      break;
    case ProxyKind::sa:
      side_emb_ = params_.add("side.emb", ad::normal_tensor(2, d, emb_std, rng));
      self_ = AttentionParams::create(params_, "sa.self", d, rng);
      ln1_ = NormParams::create(params_, "sa.ln1", d);
      ffn_ = FeedForwardParams::create(params_, "sa.ffn", d, dims.hidden, rng);
      ln2_ = NormParams::create(params_, "sa.ln2", d);
      break;
  }
  if (kind != ProxyKind::fn) {
    pool_query_ = params_.add("pool.query", ad::normal_tensor(1, width, 1.0 / std::sqrt(static_cast<double>(width)), rng));
    pool_key_ = params_.add("pool.key", ad::xavier_uniform(width, width, rng));
  }
  out_w_ = params_.add("out.w", ad::xavier_uniform(width, target_vocab, rng));
  out_b_ = params_.add("out.b", Tensorf::Zero(1, target_vocab));
}

void ProxyModel::zero_output_layer() {
  params_.value(out_w_).setZero();
  params_.value(out_b_).setZero();
}

// Slot-major layout: row i * B + b holds slot i of rule b.
struct ProxyModel::Slots {
  Eigen::Index batch = 0;
  int count = 0;
  std::vector<int> src_ids, tgt_ids, sides, positions;
  std::vector<bool> filled;
  Tensorf src_keep, tgt_keep;  // N x 1
};

namespace {

void check_rule(const RuleInstance& r, int k, int sv, int tv) {
  if (static_cast<int>(r.source.size()) > k || static_cast<int>(r.target.size()) > k) {
    throw std::invalid_argument("rule has more words than the proxy's k = " + std::to_string(k));
  }
  for (const auto& w : r.source) {
    if (w.token < 0 || w.token >= sv) throw std::out_of_range("source token outside the proxy vocabulary");
  }
  for (const auto& w : r.target) {
    if (w.token < 0 || w.token >= tv) throw std::out_of_range("target token outside the proxy vocabulary");
  }
}

}  // namespace

ProxyModel::Slots ProxyModel::layout(std::span<const RuleInstance* const> batch) const {
  Slots s;
  s.batch = static_cast<Eigen::Index>(batch.size());
  s.count = 2 * k_;
  const auto n = static_cast<std::size_t>(s.count) * batch.size();
  s.src_ids.assign(n, nmt::pad_id);
  s.tgt_ids.assign(n, nmt::pad_id);
  s.sides.assign(n, 0);
  s.positions.assign(n, 0);
  s.filled.assign(n, false);
  s.src_keep = Tensorf::Zero(static_cast<Eigen::Index>(n), 1);
  s.tgt_keep = Tensorf::Zero(static_cast<Eigen::Index>(n), 1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& r = *batch[b];
    check_rule(r, k_, source_vocab_, target_vocab_);
    for (int i = 0; i < s.count; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * batch.size() + b;
      const bool source_side = i < k_;
      s.sides[row] = source_side ? 0 : 1;
      const auto& words = source_side ? r.source : r.target;
      const auto idx = static_cast<std::size_t>(source_side ? i : i - k_);
      if (idx >= words.size()) continue;
      s.filled[row] = true;
      s.positions[row] = words[idx].position;
      if (source_side) {
        s.src_ids[row] = words[idx].token;
        s.src_keep(static_cast<Eigen::Index>(row), 0) = 1.0f;
      } else {
        s.tgt_ids[row] = words[idx].token;
        s.tgt_keep(static_cast<Eigen::Index>(row), 0) = 1.0f;
      }
    }
  }
  return s;
}

NodeId ProxyModel::build_fn(Graph& g, std::span<const RuleInstance* const> batch) const {
  const auto b = static_cast<Eigen::Index>(batch.size());
  Tensorf src_bag = Tensorf::Zero(b, source_vocab_);
  Tensorf tgt_bag = Tensorf::Zero(b, target_vocab_);
  for (Eigen::Index r = 0; r < b; ++r) {
    const auto& rule = *batch[static_cast<std::size_t>(r)];
    check_rule(rule, k_, source_vocab_, target_vocab_);
    for (const auto& w : rule.source) src_bag(r, w.token) += 1.0f;
    for (const auto& w : rule.target) tgt_bag(r, w.token) += 1.0f;
  }
  const NodeId bag = g.concat({g.matmul(g.input(std::move(src_bag)), g.param(src_emb_)),
                               g.matmul(g.input(std::move(tgt_bag)), g.param(tgt_emb_))},
                              ad::Axis::cols);
  const NodeId h1 = g.relu(g.add(g.matmul(bag, g.param(fc1_w_)), g.param(fc1_b_)));
  const NodeId h2 = g.relu(g.add(g.matmul(h1, g.param(fc2_w_)), g.param(fc2_b_)));
  return g.add(g.matmul(h2, g.param(out_w_)), g.param(out_b_));
}

NodeId ProxyModel::slot_inputs(Graph& g, const Slots& s) const {
  const NodeId src = g.mul(g.embedding(g.param(src_emb_), s.src_ids), g.input(s.src_keep));
  const NodeId tgt = g.mul(g.embedding(g.param(tgt_emb_), s.tgt_ids), g.input(s.tgt_keep));
  const NodeId side = g.embedding(g.param(side_emb_), s.sides);
  const NodeId pos = g.input(sinusoidal(s.positions, dims_.embedding));
  return g.add(g.add(g.add(src, tgt), side), pos);
}

NodeId ProxyModel::pool(Graph& g, NodeId states, const Slots& s) const {
  const auto n = static_cast<Eigen::Index>(s.filled.size());
  const NodeId keys = g.matmul(states, g.param(pool_key_));
  const NodeId scores = g.matmul(g.param(pool_query_), g.transpose(keys));  // 1 x N
  const NodeId spread = g.matmul(g.input(Tensorf::Ones(s.batch, 1)), scores);
  Tensorf mask = Tensorf::Ones(s.batch, n);
  for (Eigen::Index row = 0; row < n; ++row) {
    if (s.filled[static_cast<std::size_t>(row)]) mask(row % s.batch, row) = 0.0f;
  }
  const NodeId weights = g.softmax(g.masked_fill(spread, mask, -1e9f));
  const NodeId pooled = g.matmul(weights, states);
  return g.add(g.matmul(pooled, g.param(out_w_)), g.param(out_b_));
}

NodeId ProxyModel::build(Graph& g, std::span<const RuleInstance* const> batch) const {
  if (batch.empty()) throw std::invalid_argument("empty proxy batch");
  if (kind_ == ProxyKind::fn) return build_fn(g, batch);
  const Slots s = layout(batch);
  const NodeId x = slot_inputs(g, s);
  const auto b = s.batch;
  if (kind_ == ProxyKind::rn) {
    std::vector<NodeId> steps(static_cast<std::size_t>(s.count));
    for (int i = 0; i < s.count; ++i) steps[static_cast<std::size_t>(i)] = g.slice(x, ad::Axis::rows, i * b, b);
    std::vector<NodeId> fwd(steps.size()), bwd(steps.size());
    LstmState st{g.input(Tensorf::Zero(b, fwd_.hidden)), g.input(Tensorf::Zero(b, fwd_.hidden))};
    for (std::size_t i = 0; i < steps.size(); ++i) fwd[i] = (st = lstm_step(g, steps[i], st, fwd_)).h;
    st = {g.input(Tensorf::Zero(b, bwd_.hidden)), g.input(Tensorf::Zero(b, bwd_.hidden))};
    for (std::size_t i = steps.size(); i-- > 0;) bwd[i] = (st = lstm_step(g, steps[i], st, bwd_)).h;
    std::vector<NodeId> rows(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) rows[i] = g.concat({fwd[i], bwd[i]}, ad::Axis::cols);
    return pool(g, g.concat(rows, ad::Axis::rows), s);
  }
  const auto n = static_cast<Eigen::Index>(s.filled.size());
  Tensorf mask = Tensorf::Ones(n, n);
  for (Eigen::Index q = 0; q < n; ++q) {
    for (Eigen::Index kcol = q % b; kcol < n; kcol += b) {
      if (s.filled[static_cast<std::size_t>(kcol)]) mask(q, kcol) = 0.0f;
    }
  }
  NodeId h = norm(g, g.add(x, attention(g, x, x, self_, &mask).output), ln1_);
  h = norm(g, g.add(h, feed_forward(g, h, ffn_)), ln2_);
  return pool(g, h, s);
}

std::vector<float> proxy_forward(const ProxyModel& q, const RuleInstance& rule) {
  Graph g(q.parameters());
  const RuleInstance* one[] = {&rule};
  const NodeId probs = g.softmax(q.build(g, one));
  const auto& v = g.value(probs);
  return {v.data(), v.data() + v.size()};
}

std::vector<double> rule_nlls(const ProxyModel& q, std::span<const RuleInstance> rules, int batch_size) {
  static const double cap = -std::log(1e-12);
  std::vector<double> out;
  out.reserve(rules.size());
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  std::vector<const RuleInstance*> batch;
  for (std::size_t start = 0; start < rules.size(); start += step) {
    batch.clear();
    for (std::size_t i = start; i < std::min(rules.size(), start + step); ++i) {
      if (rules[i].label < 0 || rules[i].label >= q.target_vocab_size()) {
        throw std::out_of_range("rule label outside the proxy's target vocabulary");
      }
      batch.push_back(&rules[i]);
    }
    Graph g(q.parameters());
    const auto& logp = g.value(g.log_softmax(q.build(g, batch)));
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const double nll = -static_cast<double>(logp(static_cast<Eigen::Index>(r), batch[r]->label));
      out.push_back(std::min(nll, cap));
    }
  }
  return out;
}

}  // namespace fidelity::metric
