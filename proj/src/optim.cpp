#include "compprobe/optim.hpp"

#include <cmath>

#include "compprobe/error.hpp"

namespace compprobe::optim {

template <typename T>
Adam<T>::Adam(std::vector<tensor::Tensor<T>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!params_[i].has_grad()) throw Error("parameter " + std::to_string(i) + " has no gradient");
  ++step_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gj;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
double clip_grad_norm(std::vector<tensor::Tensor<T>>& params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params)
    for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (T& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(std::vector<tensor::Tensor<float>>&, double);
template double clip_grad_norm(std::vector<tensor::Tensor<double>>&, double);

}  // namespace compprobe::optim
