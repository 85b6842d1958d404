#pragma once

#include <cstdint>
#include <vector>

#include "compprobe/tensor.hpp"

namespace compprobe::optim {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Adam with bias correction. Moment buffers are kept in double regardless of
// the parameter dtype.
template <typename T>
class Adam {
 public:
  Adam(std::vector<tensor::Tensor<T>> params, AdamOptions options = {});

  // One update using each parameter's accumulated gradient at learning rate
  // `lr`. Throws Error when a parameter has no gradient.
  void step(double lr);
  void step() { step(options_.lr); }
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<tensor::Tensor<T>> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t step_ = 0;
};

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<tensor::Tensor<T>>& params, double max_norm);

}  // namespace compprobe::optim
