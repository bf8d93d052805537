#pragma once

// Building blocks shared by the NMT models and the proxy models.

#include "fidelity/autodiff/graph.hpp"
#include "fidelity/autodiff/init.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace fidelity::nmt::layers {

using ad::NodeId;
using ad::ParamId;
using ad::Tensorf;
using Graph = ad::Graph<float>;
using Parameters = ad::ParameterSet<float>;

// Sinusoidal encodings for arbitrary integer positions, one row each.
inline Tensorf sinusoidal(std::span<const int> positions, int width) {
  Tensorf pe(static_cast<Eigen::Index>(positions.size()), width);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / width);
      const double angle = positions[r] * rate;
      pe(static_cast<Eigen::Index>(r), i) = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

inline Tensorf sinusoidal_range(int count, int width) {
  std::vector<int> pos(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) pos[static_cast<std::size_t>(i)] = i;
  return sinusoidal(pos, width);
}

struct Embedded {
  NodeId lookup;  // raw lookup sites
  NodeId output;  // after occlusion
};

// Embedding lookup; rows flagged in `zeroed` are multiplied by zero.
inline Embedded embed(Graph& g, ParamId table, std::span<const int> ids, const std::vector<bool>* zeroed) {
  Embedded e;
  e.lookup = g.embedding(g.param(table), ids);
  e.output = e.lookup;
  if (zeroed) {
    bool any = false;
    Tensorf keep = Tensorf::Ones(static_cast<Eigen::Index>(ids.size()), 1);
    for (std::size_t i = 0; i < ids.size() && i < zeroed->size(); ++i) {
      if ((*zeroed)[i]) {
        keep(static_cast<Eigen::Index>(i), 0) = 0.0f;
        any = true;
      }
    }
    if (any) e.output = g.mul(e.lookup, g.input(std::move(keep)));
  }
  return e;
}

struct AttentionParams {
  ParamId wq, wk, wv, wo;

  static AttentionParams create(Parameters& ps, const std::string& prefix, int width, std::mt19937_64& rng) {
    return {ps.add(prefix + ".wq", ad::xavier_uniform(width, width, rng)),
            ps.add(prefix + ".wk", ad::xavier_uniform(width, width, rng)),
            ps.add(prefix + ".wv", ad::xavier_uniform(width, width, rng)),
            ps.add(prefix + ".wo", ad::xavier_uniform(width, width, rng))};
  }
};

struct AttentionResult {
  NodeId output;   // queries x width
  NodeId weights;  // queries x keys
};

// Single-head scaled dot-product attention. Entries where `mask` != 0 are
// excluded; rows where `row_keep` is 0 produce a zero output and zero weights.
inline AttentionResult attention(Graph& g, NodeId queries, NodeId keys_values, const AttentionParams& p,
                                 const Tensorf* mask = nullptr, const Tensorf* row_keep = nullptr) {
  const auto width = g.shape(queries).cols;
  const NodeId q = g.matmul(queries, g.param(p.wq));
  const NodeId k = g.matmul(keys_values, g.param(p.wk));
  const NodeId v = g.matmul(keys_values, g.param(p.wv));
  NodeId scores = g.scale(g.matmul(q, g.transpose(k)), 1.0f / std::sqrt(static_cast<float>(width)));
  if (mask) scores = g.masked_fill(scores, *mask, -1e9f);
  NodeId weights = g.softmax(scores);
  if (row_keep) weights = g.mul(weights, g.input(*row_keep));
  const NodeId context = g.matmul(g.matmul(weights, v), g.param(p.wo));
  return {context, weights};
}

struct NormParams {
  ParamId gain, bias;

  static NormParams create(Parameters& ps, const std::string& prefix, int width) {
    return {ps.add(prefix + ".gain", Tensorf::Ones(1, width)), ps.add(prefix + ".bias", Tensorf::Zero(1, width))};
  }
};

inline NodeId norm(Graph& g, NodeId x, const NormParams& p) {
  return g.layer_norm(x, g.param(p.gain), g.param(p.bias));
}

struct FeedForwardParams {
  ParamId w1, b1, w2, b2;

  static FeedForwardParams create(Parameters& ps, const std::string& prefix, int width, int hidden,
                                  std::mt19937_64& rng) {
    return {ps.add(prefix + ".w1", ad::xavier_uniform(width, hidden, rng)),
            ps.add(prefix + ".b1", Tensorf::Zero(1, hidden)),
            ps.add(prefix + ".w2", ad::xavier_uniform(hidden, width, rng)),
            ps.add(prefix + ".b2", Tensorf::Zero(1, width))};
  }
};

inline NodeId feed_forward(Graph& g, NodeId x, const FeedForwardParams& p) {
  const NodeId h = g.relu(g.add(g.matmul(x, g.param(p.w1)), g.param(p.b1)));
  return g.add(g.matmul(h, g.param(p.w2)), g.param(p.b2));
}

struct LstmParams {
  ParamId w, b;
  int hidden = 0;

  static LstmParams create(Parameters& ps, const std::string& prefix, int input, int hidden,
                           std::mt19937_64& rng) {
    Tensorf bias = Tensorf::Zero(1, 4 * hidden);
    bias.middleCols(hidden, hidden).setOnes();  // forget gate
    return {ps.add(prefix + ".w", ad::xavier_uniform(input + hidden, 4 * hidden, rng)),
            ps.add(prefix + ".b", std::move(bias)), hidden};
  }
};

struct LstmState {
  NodeId h, c;
};

inline LstmState lstm_step(Graph& g, NodeId x, LstmState s, const LstmParams& p) {
  const NodeId out = g.lstm_cell(x, s.h, s.c, g.param(p.w), g.param(p.b));
  return {g.slice(out, ad::Axis::cols, 0, p.hidden), g.slice(out, ad::Axis::cols, p.hidden, p.hidden)};
}

// Runs a bidirectional LSTM over the rows of `inputs`; returns rows x 2H.
inline NodeId bidirectional_lstm(Graph& g, NodeId inputs, const LstmParams& fwd, const LstmParams& bwd) {
  const auto n = g.shape(inputs).rows;
  std::vector<NodeId> rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = g.slice(inputs, ad::Axis::rows, i, 1);
  std::vector<NodeId> forward(rows.size()), backward(rows.size());
  LstmState s{g.input(Tensorf::Zero(1, fwd.hidden)), g.input(Tensorf::Zero(1, fwd.hidden))};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    s = lstm_step(g, rows[i], s, fwd);
    forward[i] = s.h;
  }
  s = {g.input(Tensorf::Zero(1, bwd.hidden)), g.input(Tensorf::Zero(1, bwd.hidden))};
  for (std::size_t i = rows.size(); i-- > 0;) {
    s = lstm_step(g, rows[i], s, bwd);
    backward[i] = s.h;
  }
  std::vector<NodeId> states(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) states[i] = g.concat({forward[i], backward[i]}, ad::Axis::cols);
  return g.concat(states, ad::Axis::rows);
}

}  // namespace fidelity::nmt::layers
