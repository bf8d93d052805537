#pragma once

#include "support/finite_difference.hpp"

#include <span>
#include <string>
#include <vector>

namespace fidelity::testing {

struct PrimitiveCheck {
  std::string primitive;
  std::uint64_t seed = 0;
  double error = 0.0;
};

// One random gradient check per primitive per seed.
inline std::vector<PrimitiveCheck> run_primitive_gradient_checks(int seeds_per_primitive,
                                                                std::uint64_t base_seed = 7) {
  using ad::Axis;
  std::vector<PrimitiveCheck> results;
  for (int s = 0; s < seeds_per_primitive; ++s) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s) * 101;
    std::mt19937_64 rng(seed);
    auto record = [&](const std::string& name, const std::vector<Tensor<double>>& xs, auto build) {
      results.push_back({name, seed, max_gradient_error(xs, build, seed + 1)});
    };

    record("matmul", {random_tensor(3, 4, rng), random_tensor(4, 2, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.matmul(x[0], x[1]); });
    record("add", {random_tensor(3, 4, rng), random_tensor(1, 4, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.add(x[0], x[1]); });
    record("add_col", {random_tensor(3, 4, rng), random_tensor(3, 1, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.add(x[0], x[1]); });
    record("mul", {random_tensor(3, 4, rng), random_tensor(3, 4, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.mul(x[0], x[1]); });
    record("mul_scalar", {random_tensor(2, 3, rng), random_tensor(1, 1, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.mul(x[1], x[0]); });
    record("concat", {random_tensor(2, 3, rng), random_tensor(2, 2, rng)},
           [](auto& g, const std::vector<NodeId>& x) {
             return g.concat({x[0], x[1]}, Axis::cols);
           });
    record("tanh", {random_tensor(3, 3, rng, -2, 2)},
           [](auto& g, const std::vector<NodeId>& x) { return g.tanh(x[0]); });
    record("sigmoid", {random_tensor(3, 3, rng, -3, 3)},
           [](auto& g, const std::vector<NodeId>& x) { return g.sigmoid(x[0]); });
    record("relu", {random_away_from_zero(3, 3, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.relu(x[0]); });
    record("softmax", {random_tensor(3, 5, rng, -2, 2)},
           [](auto& g, const std::vector<NodeId>& x) { return g.softmax(x[0]); });
    record("log_softmax", {random_tensor(2, 5, rng, -2, 2)},
           [](auto& g, const std::vector<NodeId>& x) { return g.log_softmax(x[0]); });
    record("log", {random_tensor(2, 4, rng, 0.5, 2.0)},
           [](auto& g, const std::vector<NodeId>& x) { return g.log(x[0]); });
    record("mean", {random_tensor(3, 4, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.mean(x[0]); });
    record("embedding", {random_tensor(5, 4, rng)}, [](auto& g, const std::vector<NodeId>& x) {
      static const int ids[] = {2, 0, 2, 4};
      return g.embedding(x[0], std::span<const int>(ids));
    });
    record("lstm_cell",
           {random_tensor(2, 3, rng), random_tensor(2, 4, rng), random_tensor(2, 4, rng),
            random_tensor(7, 16, rng, -0.5, 0.5), random_tensor(1, 16, rng, -0.5, 0.5)},
           [](auto& g, const std::vector<NodeId>& x) {
             return g.lstm_cell(x[0], x[1], x[2], x[3], x[4]);
           });
    record("masked_fill", {random_tensor(3, 4, rng)}, [](auto& g, const std::vector<NodeId>& x) {
      using T = std::decay_t<decltype(g.value(x[0]))>;
      T mask = T::Zero(3, 4);
      mask(0, 1) = 1;
      mask(2, 3) = 1;
      return g.softmax(g.masked_fill(x[0], mask, -1e9));
    });
    record("transpose", {random_tensor(2, 3, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.transpose(x[0]); });
    record("scale", {random_tensor(2, 3, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.scale(x[0], 0.37); });
    record("slice", {random_tensor(4, 5, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.slice(x[0], Axis::cols, 1, 3); });
    record("layer_norm", {random_tensor(3, 5, rng), random_tensor(1, 5, rng), random_tensor(1, 5, rng)},
           [](auto& g, const std::vector<NodeId>& x) { return g.layer_norm(x[0], x[1], x[2]); });
    record("gather", {random_tensor(3, 4, rng)}, [](auto& g, const std::vector<NodeId>& x) {
      static const int cols[] = {3, 0, 2};
      return g.gather(x[0], std::span<const int>(cols));
    });
    record("composite_attention",
           {random_tensor(3, 4, rng), random_tensor(4, 4, rng, -0.5, 0.5), random_tensor(4, 4, rng, -0.5, 0.5)},
           [](auto& g, const std::vector<NodeId>& x) {
             const auto q = g.matmul(x[0], x[1]);
             const auto k = g.matmul(x[0], x[2]);
             const auto a = g.softmax(g.scale(g.matmul(q, g.transpose(k)), 0.5));
             return g.log_softmax(g.tanh(g.matmul(a, x[0])));
           });
  }
  return results;
}

}  // namespace fidelity::testing
