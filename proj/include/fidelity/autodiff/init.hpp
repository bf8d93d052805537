#pragma once

#include "fidelity/autodiff/tensor.hpp"

#include <cmath>
#include <random>

namespace fidelity::ad {

// Glorot-uniform initialisation from a caller-owned engine.
template <typename Scalar = float>
Tensor<Scalar> xavier_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<Scalar> t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar = float>
Tensor<Scalar> normal_tensor(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<Scalar> t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace fidelity::ad
