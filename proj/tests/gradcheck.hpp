#pragma once

#include <functional>
#include <vector>

#include "compprobe/rng.hpp"
#include "compprobe/tensor.hpp"
#include "oracles.hpp"

namespace testutil {

using T64 = compprobe::tensor::Tensor<double>;

inline T64 random_tensor(compprobe::Rng& rng, compprobe::tensor::Shape shape, double scale = 1.0,
                         bool requires_grad = true) {
  std::vector<double> v(compprobe::tensor::numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return T64::from(std::move(shape), std::move(v), requires_grad);
}

// Worst relative error between backward() and central differences of the
// scalar `f` over every entry of every input.
inline double gradcheck(const std::function<T64(const std::vector<T64>&)>& f, std::vector<T64> inputs,
                        double h = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  compprobe::tensor::backward(f(inputs));
  std::vector<double> analytic, numeric;
  for (auto& x : inputs) {
    const auto g = x.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      analytic.push_back(g.empty() ? 0.0 : g[i]);
      auto data = x.mutable_data();
      const double keep = data[i];
      data[i] = keep + h;
      const double up = f(inputs).item();
      data[i] = keep - h;
      const double down = f(inputs).item();
      data[i] = keep;
      numeric.push_back((up - down) / (2 * h));
    }
  }
  return oracle::rel_error(analytic, numeric);
}

// sum(y * w) for a fixed random w, so every output entry carries weight.
inline T64 weighted_sum(const T64& y, compprobe::Rng rng) {
  auto w = random_tensor(rng, y.shape(), 1.0, false);
  return compprobe::tensor::sum(compprobe::tensor::mul(y, w));
}

}  // namespace testutil
