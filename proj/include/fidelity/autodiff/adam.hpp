#pragma once

#include "fidelity/autodiff/graph.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace fidelity::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Parameters whose gradient was not reached by the
// loss are left untouched, including their moments.
template <typename Scalar>
class Adam {
 public:
  using TensorType = Tensor<Scalar>;

  Adam(const ParameterSet<Scalar>& params, AdamConfig config = {}) : config_(config) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::uint32_t i = 0; i < params.size(); ++i) {
      const auto& p = params.value(ParamId{i});
      first_[i].setZero(p.rows(), p.cols());
      second_[i].setZero(p.rows(), p.cols());
    }
  }

  const AdamConfig& config() const { return config_; }
  std::int64_t step_count() const { return steps_; }
  std::int64_t skipped_updates() const { return skipped_; }
  const TensorType& first_moment(ParamId id) const { return first_.at(id.index); }
  const TensorType& second_moment(ParamId id) const { return second_.at(id.index); }

  void step(ParameterSet<Scalar>& params, const Gradients<Scalar>& grads) {
    if (grads.size() != params.size() || first_.size() != params.size()) {
      throw std::invalid_argument("adam: gradient map does not match parameter set");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(config_.beta1);
    const auto b2 = static_cast<Scalar>(config_.beta2);
    const auto step_size = static_cast<Scalar>(config_.learning_rate / bc1);
    const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(config_.epsilon);

    for (std::uint32_t i = 0; i < params.size(); ++i) {
      const ParamId id{i};
      if (!grads.reached(id)) continue;
      const auto& g = grads[id];
      if (!g.allFinite()) {
        ++skipped_;
        continue;
      }
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * g;
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
      params.value(id).array() -=
          step_size * first_[i].array() / (second_[i].array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

 private:
  AdamConfig config_;
  std::vector<TensorType> first_;
  std::vector<TensorType> second_;
  std::int64_t steps_ = 0;
  std::int64_t skipped_ = 0;
};

}  // namespace fidelity::ad
