#pragma once

#include "fidelity/autodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <deque>
#include <vector>

namespace fidelity::ad {

// Named registry of trainable tensors. Names are unique.
template <typename Scalar>
class ParameterSet {
 public:
  using TensorType = Tensor<Scalar>;

  ParamId add(std::string name, TensorType value) {
    if (value.size() == 0) {
      throw ShapeError("parameter '" + name + "' has an empty shape");
    }
    if (index_.contains(name)) {
      throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    const auto id = static_cast<std::uint32_t>(values_.size());
    index_.emplace(name, id);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return ParamId{id};
  }

  std::optional<ParamId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return ParamId{it->second};
  }

  ParamId at(std::string_view name) const {
    if (auto id = find(name)) return *id;
    throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  }

  const TensorType& value(ParamId id) const { return values_.at(id.index); }
  TensorType& value(ParamId id) { return values_.at(id.index); }
  const std::string& name(ParamId id) const { return names_.at(id.index); }
  std::size_t size() const { return values_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<TensorType> values_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// Per-parameter gradients from one or more backward passes. Every registered
// parameter has a zero-initialised slot; `reached` marks the ones the loss
// actually depends on.
template <typename Scalar>
class Gradients {
 public:
  using TensorType = Tensor<Scalar>;

  Gradients() = default;
  explicit Gradients(const ParameterSet<Scalar>& params) { reset(params); }

  void reset(const ParameterSet<Scalar>& params) {
    values_.resize(params.size());
    reached_.assign(params.size(), false);
    for (std::uint32_t i = 0; i < params.size(); ++i) {
      const auto& p = params.value(ParamId{i});
      values_[i].setZero(p.rows(), p.cols());
    }
  }

  std::size_t size() const { return values_.size(); }
  bool reached(ParamId id) const { return reached_.at(id.index); }
  const TensorType& operator[](ParamId id) const { return values_.at(id.index); }

  TensorType& slot(ParamId id) {
    reached_.at(id.index) = true;
    return values_[id.index];
  }

  void accumulate(const Gradients& other, Scalar weight = Scalar(1)) {
    if (other.size() != size()) {
      throw std::invalid_argument("gradient maps cover different parameter sets");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!other.reached_[i]) continue;
      values_[i].noalias() += weight * other.values_[i];
      reached_[i] = true;
    }
  }

  void scale(Scalar s) {
    for (auto& v : values_) v *= s;
  }

 private:
  std::vector<TensorType> values_;
  std::vector<bool> reached_;
};

enum class Op : std::uint8_t {
  input,
  parameter,
  matmul,
  add,
  mul,
  concat,
  tanh,
  sigmoid,
  relu,
  softmax,
  log_softmax,
  log,
  mean,
  sum,
  embedding,
  lstm_cell,
  masked_fill,
  transpose,
  scale,
  slice,
  layer_norm,
  gather,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::parameter: return "parameter";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::concat: return "concat";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::log: return "log";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::embedding: return "embedding";
    case Op::lstm_cell: return "lstm_cell";
    case Op::masked_fill: return "masked_fill";
    case Op::transpose: return "transpose";
    case Op::scale: return "scale";
    case Op::slice: return "slice";
    case Op::layer_norm: return "layer_norm";
    case Op::gather: return "gather";
  }
  return "?";
}

// Tape of primitive applications over a frozen ParameterSet. Nodes are
// appended in topological order; backward() walks them in reverse. One graph
// per thread: the parameter set is only read.
template <typename Scalar>
class Graph {
 public:
  using TensorType = Tensor<Scalar>;

  static constexpr Scalar layer_norm_eps = Scalar(1e-5);
  // below this, exp() of a max-shifted logit underflows the normal range
  static constexpr Scalar exp_floor = std::is_same_v<Scalar, float> ? Scalar(-87) : Scalar(-708);

  explicit Graph(const ParameterSet<Scalar>& params) : params_(&params) {}

  const ParameterSet<Scalar>& parameters() const { return *params_; }

  void clear() {
    nodes_.clear();
    grads_.clear();
    touched_.clear();
    param_nodes_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_count() const { return backward_count_; }

  const TensorType& value(NodeId id) const {
    const Node& n = node(id);
    if (n.op == Op::parameter) return params_->value(ParamId{n.param});
    return n.value;
  }

  Shape shape(NodeId id) const { return shape_of(value(id)); }
  Op op(NodeId id) const { return node(id).op; }

  // Gradient of the last backward() loss w.r.t. a node's output; zero when
  // the node does not reach the loss.
  TensorType grad(NodeId id) const {
    if (id.index < touched_.size() && touched_[id.index]) return grads_[id.index];
    const auto s = shape(id);
    return TensorType::Zero(s.rows, s.cols);
  }

  // ---- leaves -------------------------------------------------------------

  NodeId input(TensorType v) {
    if (v.size() == 0) throw ShapeError("input tensor has an empty shape");
    Node n;
    n.op = Op::input;
    n.value = std::move(v);
    return push(std::move(n));
  }

  NodeId param(ParamId pid) {
    if (pid.index >= params_->size()) {
      throw std::out_of_range("parameter id " + std::to_string(pid.index) + " not registered");
    }
    if (auto it = param_nodes_.find(pid.index); it != param_nodes_.end()) {
      return NodeId{it->second};
    }
    Node n;
    n.op = Op::parameter;
    n.param = pid.index;
    const NodeId id = push(std::move(n));
    param_nodes_.emplace(pid.index, id.index);
    return id;
  }

  NodeId param(std::string_view name) { return param(params_->at(name)); }

  // ---- primitives ---------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const auto sa = shape(a), sb = shape(b);
    if (sa.cols != sb.rows) {
      throw ShapeError("matmul: " + sa.str() + " x " + sb.str() + " inner dimensions differ");
    }
    Node n = make(Op::matmul, {a, b});
    n.value.noalias() = value(a) * value(b);
    return push(std::move(n));
  }

  // Elementwise add; `b` may also be a 1xC row, an Rx1 column or a 1x1 scalar
  // broadcast over `a` (either argument order).
  NodeId add(NodeId a, NodeId b) { return broadcast_binary(Op::add, a, b); }
  NodeId mul(NodeId a, NodeId b) { return broadcast_binary(Op::mul, a, b); }

  NodeId concat(std::span<const NodeId> parts, Axis axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Eigen::Index rows = 0, cols = 0;
    const auto s0 = shape(parts[0]);
    for (NodeId p : parts) {
      const auto s = shape(p);
      if (axis == Axis::rows) {
        if (s.cols != s0.cols) throw ShapeError("concat rows: " + s0.str() + " vs " + s.str());
        rows += s.rows;
        cols = s.cols;
      } else {
        if (s.rows != s0.rows) throw ShapeError("concat cols: " + s0.str() + " vs " + s.str());
        cols += s.cols;
        rows = s.rows;
      }
    }
    Node n = make(Op::concat, parts);
    n.axis = axis;
    n.value.resize(rows, cols);
    Eigen::Index offset = 0;
    for (NodeId p : parts) {
      const auto& v = value(p);
      if (axis == Axis::rows) {
        n.value.middleRows(offset, v.rows()) = v;
        offset += v.rows();
      } else {
        n.value.middleCols(offset, v.cols()) = v;
        offset += v.cols();
      }
    }
    return push(std::move(n));
  }

  NodeId concat(std::initializer_list<NodeId> parts, Axis axis) {
    return concat(std::span<const NodeId>(parts.begin(), parts.size()), axis);
  }

  NodeId tanh(NodeId a) { return unary(Op::tanh, a, [](Scalar x) { return std::tanh(x); }); }
  NodeId sigmoid(NodeId a) { return unary(Op::sigmoid, a, &sigmoid_scalar); }
  NodeId relu(NodeId a) {
    return unary(Op::relu, a, [](Scalar x) { return x > Scalar(0) ? x : Scalar(0); });
  }

  NodeId log(NodeId a) {
    const auto& v = value(a);
    if ((v.array() <= Scalar(0)).any()) {
      throw std::domain_error("log: input " + shape(a).str() + " has non-positive entries");
    }
    return unary(Op::log, a, [](Scalar x) { return std::log(x); });
  }

  // Row-wise softmax, max-shifted.
  NodeId softmax(NodeId a) {
    Node n = make(Op::softmax, {a});
    n.value = value(a);
    for (Eigen::Index r = 0; r < n.value.rows(); ++r) {
      auto row = n.value.row(r);
      row.array() -= row.maxCoeff();
      row = (row.array() < exp_floor).select(Scalar(0), row.array().exp()).matrix();
      row /= row.sum();
    }
    return push(std::move(n));
  }

  // Row-wise log-softmax via log-sum-exp.
  NodeId log_softmax(NodeId a) {
    Node n = make(Op::log_softmax, {a});
    n.value = value(a);
    for (Eigen::Index r = 0; r < n.value.rows(); ++r) {
      auto row = n.value.row(r);
      const Scalar m = row.maxCoeff();
      const auto shifted = (row.array() - m).eval();
      const Scalar lse = m + std::log((shifted < exp_floor).select(Scalar(0), shifted.exp()).sum());
      row.array() -= lse;
    }
    return push(std::move(n));
  }

  NodeId mean(NodeId a) {
    Node n = make(Op::mean, {a});
    n.value.resize(1, 1);
    n.value(0, 0) = value(a).mean();
    return push(std::move(n));
  }

  NodeId sum(NodeId a) {
    Node n = make(Op::sum, {a});
    n.value.resize(1, 1);
    n.value(0, 0) = value(a).sum();
    return push(std::move(n));
  }

  // Rows of `table` selected by `ids`. The node's gradient is the per-site
  // gradient (one row per lookup), while the table receives the scatter-add.
  NodeId embedding(NodeId table, std::span<const int> ids) {
    const auto& t = value(table);
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    Node n = make(Op::embedding, {table});
    n.ids.assign(ids.begin(), ids.end());
    n.value.resize(static_cast<Eigen::Index>(ids.size()), t.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= t.rows()) {
        throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table " +
                                shape(table).str());
      }
      n.value.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
    }
    return push(std::move(n));
  }

  // LSTM cell. x: BxI, h, c: BxH, w: (I+H)x4H, b: 1x4H with gate order
  // input, forget, candidate, output. Output is Bx2H = [h' c'].
  NodeId lstm_cell(NodeId x, NodeId h, NodeId c, NodeId w, NodeId b) {
    const auto sx = shape(x), sh = shape(h), sc = shape(c), sw = shape(w), sb = shape(b);
    const Eigen::Index H = sh.cols;
    if (sh != sc || sx.rows != sh.rows || sw.rows != sx.cols + H || sw.cols != 4 * H ||
        sb != Shape{1, 4 * H}) {
      throw ShapeError("lstm_cell: x" + sx.str() + " h" + sh.str() + " c" + sc.str() + " w" +
                       sw.str() + " b" + sb.str());
    }
    Node n = make(Op::lstm_cell, {x, h, c, w, b});
    TensorType xh(sx.rows, sx.cols + H);
    xh << value(x), value(h);
    TensorType z = xh * value(w);
    z.rowwise() += value(b).row(0);
    n.aux.resize(sx.rows, 5 * H);
    auto gi = n.aux.middleCols(0, H), gf = n.aux.middleCols(H, H), gg = n.aux.middleCols(2 * H, H),
         go = n.aux.middleCols(3 * H, H), tc = n.aux.middleCols(4 * H, H);
    gi = z.middleCols(0, H).unaryExpr(&sigmoid_scalar);
    gf = z.middleCols(H, H).unaryExpr(&sigmoid_scalar);
    gg = z.middleCols(2 * H, H).array().tanh().matrix();
    go = z.middleCols(3 * H, H).unaryExpr(&sigmoid_scalar);
    n.value.resize(sx.rows, 2 * H);
    auto c_next = n.value.middleCols(H, H);
    c_next = gf.cwiseProduct(value(c)) + gi.cwiseProduct(gg);
    tc = c_next.array().tanh().matrix();
    n.value.middleCols(0, H) = go.cwiseProduct(tc);
    return push(std::move(n));
  }

  // Entries where mask != 0 are replaced by `fill`; they pass no gradient.
  NodeId masked_fill(NodeId a, TensorType mask, Scalar fill) {
    if (shape_of(mask) != shape(a)) {
      throw ShapeError("masked_fill: input " + shape(a).str() + " vs mask " +
                       shape_of(mask).str());
    }
    Node n = make(Op::masked_fill, {a});
    n.value = (mask.array() != Scalar(0)).select(TensorType::Constant(mask.rows(), mask.cols(), fill),
                                                 value(a));
    n.aux = std::move(mask);
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    Node n = make(Op::transpose, {a});
    n.value = value(a).transpose();
    return push(std::move(n));
  }

  NodeId scale(NodeId a, Scalar s) {
    Node n = make(Op::scale, {a});
    n.scalar = s;
    n.value = value(a) * s;
    return push(std::move(n));
  }

  NodeId slice(NodeId a, Axis axis, Eigen::Index begin, Eigen::Index count) {
    const auto s = shape(a);
    const Eigen::Index extent = axis == Axis::rows ? s.rows : s.cols;
    if (begin < 0 || count <= 0 || begin + count > extent) {
      throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                       ") outside " + s.str());
    }
    Node n = make(Op::slice, {a});
    n.axis = axis;
    n.begin = begin;
    n.value = axis == Axis::rows ? TensorType(value(a).middleRows(begin, count))
                                 : TensorType(value(a).middleCols(begin, count));
    return push(std::move(n));
  }

  // Row-wise layer normalisation with 1xC gain and bias.
  NodeId layer_norm(NodeId a, NodeId gain, NodeId bias) {
    const auto s = shape(a);
    if (shape(gain) != Shape{1, s.cols} || shape(bias) != Shape{1, s.cols}) {
      throw ShapeError("layer_norm: input " + s.str() + " gain " + shape(gain).str() + " bias " +
                       shape(bias).str());
    }
    Node n = make(Op::layer_norm, {a, gain, bias});
    // aux holds x_hat (RxC) followed by one column of 1/std.
    n.aux.resize(s.rows, s.cols + 1);
    n.value.resize(s.rows, s.cols);
    const auto& x = value(a);
    for (Eigen::Index r = 0; r < s.rows; ++r) {
      const Scalar mu = x.row(r).mean();
      const Scalar var = (x.row(r).array() - mu).square().mean();
      const Scalar inv_std = Scalar(1) / std::sqrt(var + layer_norm_eps);
      n.aux.row(r).head(s.cols) = (x.row(r).array() - mu) * inv_std;
      n.aux(r, s.cols) = inv_std;
      n.value.row(r) = n.aux.row(r).head(s.cols).cwiseProduct(value(gain).row(0)) + value(bias).row(0);
    }
    return push(std::move(n));
  }

  // out[r] = a[r, cols[r]]; result is Rx1.
  NodeId gather(NodeId a, std::span<const int> cols) {
    const auto s = shape(a);
    if (static_cast<Eigen::Index>(cols.size()) != s.rows) {
      throw ShapeError("gather: " + std::to_string(cols.size()) + " indices for " + s.str());
    }
    Node n = make(Op::gather, {a});
    n.ids.assign(cols.begin(), cols.end());
    n.value.resize(s.rows, 1);
    for (Eigen::Index r = 0; r < s.rows; ++r) {
      const int c = cols[static_cast<std::size_t>(r)];
      if (c < 0 || c >= s.cols) {
        throw std::out_of_range("gather: column " + std::to_string(c) + " outside " + s.str());
      }
      n.value(r, 0) = value(a)(r, c);
    }
    return push(std::move(n));
  }

  // ---- reverse pass -------------------------------------------------------

  Gradients<Scalar> backward(NodeId loss) {
    if (loss.index >= nodes_.size()) throw std::out_of_range("backward: unknown node");
    if (shape(loss) != Shape{1, 1}) {
      throw ShapeError("backward: loss must be scalar, got " + shape(loss).str());
    }
    ++backward_count_;
    grads_.resize(nodes_.size());
    touched_.assign(nodes_.size(), false);
    Gradients<Scalar> out(*params_);

    grads_[loss.index] = TensorType::Ones(1, 1);
    touched_[loss.index] = true;
    for (std::int64_t i = loss.index; i >= 0; --i) {
      if (!touched_[static_cast<std::size_t>(i)]) continue;
      propagate(static_cast<std::uint32_t>(i), out);
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::input;
    std::vector<std::uint32_t> inputs;
    TensorType value;
    TensorType aux;
    std::vector<int> ids;
    Scalar scalar = Scalar(0);
    Eigen::Index begin = 0;
    Axis axis = Axis::rows;
    std::uint8_t broadcast = 0;
    std::uint32_t param = 0;
  };

  static Scalar sigmoid_scalar(Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); }

  const Node& node(NodeId id) const {
    if (id.index >= nodes_.size()) throw std::out_of_range("unknown node id");
    return nodes_[id.index];
  }

  Node make(Op op, std::span<const NodeId> inputs) {
    Node n;
    n.op = op;
    n.inputs.reserve(inputs.size());
    for (NodeId in : inputs) {
      if (in.index >= nodes_.size()) throw std::out_of_range("input node not in graph");
      n.inputs.push_back(in.index);
    }
    return n;
  }

  Node make(Op op, std::initializer_list<NodeId> inputs) {
    return make(op, std::span<const NodeId>(inputs.begin(), inputs.size()));
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  template <typename F>
  NodeId unary(Op op, NodeId a, F f) {
    Node n = make(op, {a});
    n.value = value(a).unaryExpr(f);
    return push(std::move(n));
  }

  enum class Broadcast : std::uint8_t { none, row, col, scalar };

  static std::optional<Broadcast> broadcast_kind(Shape big, Shape small) {
    if (small == big) return Broadcast::none;
    if (small == Shape{1, 1}) return Broadcast::scalar;
    if (small.rows == 1 && small.cols == big.cols) return Broadcast::row;
    if (small.cols == 1 && small.rows == big.rows) return Broadcast::col;
    return std::nullopt;
  }

  NodeId broadcast_binary(Op op, NodeId a, NodeId b) {
    auto sa = shape(a), sb = shape(b);
    auto kind = broadcast_kind(sa, sb);
    if (!kind) {
      if (broadcast_kind(sb, sa)) {
        std::swap(a, b);
        std::swap(sa, sb);
        kind = broadcast_kind(sa, sb);
      } else {
        throw ShapeError(std::string(op_name(op)) + ": cannot broadcast " + sa.str() + " with " +
                         sb.str());
      }
    }
    Node n = make(op, {a, b});
    n.broadcast = static_cast<std::uint8_t>(*kind);
    n.value = value(a);
    const auto& vb = value(b);
    const bool is_add = op == Op::add;
    switch (*kind) {
      case Broadcast::none:
        if (is_add) n.value += vb;
        else n.value.array() *= vb.array();
        break;
      case Broadcast::row:
        if (is_add) n.value.rowwise() += vb.row(0);
        else n.value.array().rowwise() *= vb.row(0).array();
        break;
      case Broadcast::col:
        if (is_add) n.value.colwise() += vb.col(0);
        else n.value.array().colwise() *= vb.col(0).array();
        break;
      case Broadcast::scalar:
        if (is_add) n.value.array() += vb(0, 0);
        else n.value *= vb(0, 0);
        break;
    }
    return push(std::move(n));
  }

  void accumulate(std::uint32_t i, const TensorType& g) {
    if (touched_[i]) {
      grads_[i] += g;
    } else {
      grads_[i] = g;
      touched_[i] = true;
    }
  }

  template <typename Expr>
  void accumulate_expr(std::uint32_t i, const Expr& g) {
    if (touched_[i]) {
      grads_[i] += g;
    } else {
      grads_[i] = g;
      touched_[i] = true;
    }
  }

  // Reduce a gradient of the broadcast result back onto the smaller operand.
  static TensorType reduce(const TensorType& g, Broadcast kind) {
    switch (kind) {
      case Broadcast::none: return g;
      case Broadcast::row: return g.colwise().sum();
      case Broadcast::col: return g.rowwise().sum();
      case Broadcast::scalar: {
        TensorType s(1, 1);
        s(0, 0) = g.sum();
        return s;
      }
    }
    return g;
  }

  void propagate(std::uint32_t i, Gradients<Scalar>& out) {
    const Node& n = nodes_[i];
    const TensorType& g = grads_[i];
    const auto in = [&](std::size_t k) { return n.inputs[k]; };
    const auto val = [&](std::size_t k) -> const TensorType& { return value(NodeId{n.inputs[k]}); };

    switch (n.op) {
      case Op::input:
        break;
      case Op::parameter:
        out.slot(ParamId{n.param}) += g;
        break;
      case Op::matmul:
        accumulate_expr(in(0), g * val(1).transpose());
        accumulate_expr(in(1), val(0).transpose() * g);
        break;
      case Op::add: {
        const auto kind = static_cast<Broadcast>(n.broadcast);
        accumulate(in(0), g);
        accumulate(in(1), reduce(g, kind));
        break;
      }
      case Op::mul: {
        const auto kind = static_cast<Broadcast>(n.broadcast);
        const auto& a = val(0);
        const auto& b = val(1);
        TensorType ga = g;
        switch (kind) {
          case Broadcast::none: ga.array() *= b.array(); break;
          case Broadcast::row: ga.array().rowwise() *= b.row(0).array(); break;
          case Broadcast::col: ga.array().colwise() *= b.col(0).array(); break;
          case Broadcast::scalar: ga *= b(0, 0); break;
        }
        accumulate(in(0), ga);
        accumulate(in(1), reduce(TensorType(g.cwiseProduct(a)), kind));
        break;
      }
      case Op::concat: {
        Eigen::Index offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto s = shape_of(val(k));
          if (n.axis == Axis::rows) {
            accumulate(in(k), TensorType(g.middleRows(offset, s.rows)));
            offset += s.rows;
          } else {
            accumulate(in(k), TensorType(g.middleCols(offset, s.cols)));
            offset += s.cols;
          }
        }
        break;
      }
      case Op::tanh:
        accumulate_expr(in(0), g.cwiseProduct((Scalar(1) - n.value.array().square()).matrix()));
        break;
      case Op::sigmoid:
        accumulate_expr(in(0),
                        g.cwiseProduct((n.value.array() * (Scalar(1) - n.value.array())).matrix()));
        break;
      case Op::relu:
        accumulate_expr(in(0), (val(0).array() > Scalar(0)).select(g, TensorType::Zero(g.rows(), g.cols())));
        break;
      case Op::log:
        accumulate_expr(in(0), g.cwiseQuotient(val(0)));
        break;
      case Op::softmax: {
        const auto& y = n.value;
        TensorType dx = y.cwiseProduct(g);
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dx.rowwise().sum();
        dx.noalias() -= (y.array().colwise() * dots.array()).matrix();
        accumulate(in(0), dx);
        break;
      }
      case Op::log_softmax: {
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gsum = g.rowwise().sum();
        TensorType sm = (n.value.array() < exp_floor).select(Scalar(0), n.value.array().exp());
        sm.array().colwise() *= gsum.array();
        accumulate_expr(in(0), g - sm);
        break;
      }
      case Op::mean: {
        const auto s = shape_of(val(0));
        accumulate_expr(in(0), TensorType::Constant(s.rows, s.cols, g(0, 0) / Scalar(s.size())));
        break;
      }
      case Op::sum: {
        const auto s = shape_of(val(0));
        accumulate_expr(in(0), TensorType::Constant(s.rows, s.cols, g(0, 0)));
        break;
      }
      case Op::embedding: {
        const auto s = shape_of(val(0));
        TensorType gt = TensorType::Zero(s.rows, s.cols);
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          gt.row(n.ids[r]) += g.row(static_cast<Eigen::Index>(r));
        }
        accumulate(in(0), gt);
        break;
      }
      case Op::lstm_cell:
        propagate_lstm(n, g);
        break;
      case Op::masked_fill:
        accumulate_expr(in(0), (n.aux.array() != Scalar(0)).select(TensorType::Zero(g.rows(), g.cols()), g));
        break;
      case Op::transpose:
        accumulate_expr(in(0), g.transpose());
        break;
      case Op::scale:
        accumulate_expr(in(0), g * n.scalar);
        break;
      case Op::slice: {
        const auto s = shape_of(val(0));
        TensorType gx = TensorType::Zero(s.rows, s.cols);
        if (n.axis == Axis::rows) gx.middleRows(n.begin, g.rows()) = g;
        else gx.middleCols(n.begin, g.cols()) = g;
        accumulate(in(0), gx);
        break;
      }
      case Op::layer_norm: {
        const Eigen::Index C = n.value.cols();
        const auto x_hat = n.aux.leftCols(C);
        const auto inv_std = n.aux.col(C);
        const auto& gain = val(1);
        TensorType dxh = g;
        dxh.array().rowwise() *= gain.row(0).array();
        TensorType dx(g.rows(), C);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Scalar s1 = dxh.row(r).sum();
          const Scalar s2 = dxh.row(r).dot(x_hat.row(r));
          dx.row(r) = (inv_std(r) / Scalar(C)) *
                      (Scalar(C) * dxh.row(r).array() - s1 - x_hat.row(r).array() * s2).matrix();
        }
        accumulate(in(0), dx);
        accumulate(in(1), TensorType(g.cwiseProduct(x_hat).colwise().sum()));
        accumulate(in(2), TensorType(g.colwise().sum()));
        break;
      }
      case Op::gather: {
        const auto s = shape_of(val(0));
        TensorType gx = TensorType::Zero(s.rows, s.cols);
        for (Eigen::Index r = 0; r < s.rows; ++r) gx(r, n.ids[static_cast<std::size_t>(r)]) = g(r, 0);
        accumulate(in(0), gx);
        break;
      }
    }
  }

  void propagate_lstm(const Node& n, const TensorType& g) {
    const auto& x = value(NodeId{n.inputs[0]});
    const auto& h = value(NodeId{n.inputs[1]});
    const auto& c = value(NodeId{n.inputs[2]});
    const auto& w = value(NodeId{n.inputs[3]});
    const Eigen::Index H = h.cols();
    const Eigen::Index I = x.cols();
    const auto gi = n.aux.middleCols(0, H).array();
    const auto gf = n.aux.middleCols(H, H).array();
    const auto gg = n.aux.middleCols(2 * H, H).array();
    const auto go = n.aux.middleCols(3 * H, H).array();
    const auto tc = n.aux.middleCols(4 * H, H).array();
    const auto dh = g.middleCols(0, H).array();
    const TensorType dc = (g.middleCols(H, H).array() + dh * go * (Scalar(1) - tc.square())).matrix();

    TensorType dz(g.rows(), 4 * H);
    dz.middleCols(0, H) = (dc.array() * gg * gi * (Scalar(1) - gi)).matrix();
    dz.middleCols(H, H) = (dc.array() * c.array() * gf * (Scalar(1) - gf)).matrix();
    dz.middleCols(2 * H, H) = (dc.array() * gi * (Scalar(1) - gg.square())).matrix();
    dz.middleCols(3 * H, H) = (dh * tc * go * (Scalar(1) - go)).matrix();

    TensorType xh(x.rows(), I + H);
    xh << x, h;
    const TensorType dxh = dz * w.transpose();
    accumulate(n.inputs[0], TensorType(dxh.leftCols(I)));
    accumulate(n.inputs[1], TensorType(dxh.rightCols(H)));
    accumulate(n.inputs[2], TensorType(dc.array() * gf));
    accumulate(n.inputs[3], TensorType(xh.transpose() * dz));
    accumulate(n.inputs[4], TensorType(dz.colwise().sum()));
  }

  const ParameterSet<Scalar>* params_;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later appends
  std::vector<TensorType> grads_;
  std::vector<bool> touched_;
  std::unordered_map<std::uint32_t, std::uint32_t> param_nodes_;
  std::size_t backward_count_ = 0;
};

}  // namespace fidelity::ad
