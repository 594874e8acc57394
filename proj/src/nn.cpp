#include "phonhal/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace phonhal::nn {

template <typename T>
Tensor<T> glorot_uniform(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor<T> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
  return w;
}

template <typename T>
Tensor<T> gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Tensor<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal());
  return m;
}

template <typename T>
Linear make_linear(ParameterStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
  Linear layer;
  layer.in = in;
  layer.out = out;
  layer.weight = store.add(name + ".weight", glorot_uniform<T>(in, out, rng));
  layer.bias = store.add(name + ".bias", Tensor<T>::Zero(1, out));
  return layer;
}

template <typename T>
Var<T> multihead_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  const Eigen::Index hidden = q.cols();
  if (heads <= 0 || hidden % heads != 0) {
    throw Error(ErrorCode::invalid_argument,
                "hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (k.cols() != hidden || v.cols() != hidden || k.rows() != v.rows()) {
    throw Error(ErrorCode::invalid_argument, "attention: inconsistent q/k/v shapes");
  }
  const Eigen::Index head_dim = hidden / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(head_dim));
  if (heads == 1) return matmul(softmax_rows(scale(matmul_nt(q, k), scale_factor)), v);
  std::vector<Var<T>> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index off = h * head_dim;
    auto qh = slice_cols(q, off, head_dim);
    auto kh = slice_cols(k, off, head_dim);
    auto vh = slice_cols(v, off, head_dim);
    auto weights = softmax_rows(scale(matmul_nt(qh, kh), scale_factor));
    outs.push_back(matmul(weights, vh));
  }
  return concat_cols<T>(std::span<const Var<T>>(outs));
}

template <typename T>
Var<T> gaussian_log_density(const Var<T>& x, const Var<T>& mu, const Var<T>& logvar) {
  const T log2pi = static_cast<T>(std::log(2.0 * std::numbers::pi));
  auto sq = square(sub(x, mu));
  auto inv_var = exp(scale(logvar, T(-1)));
  auto per_entry = add_scalar(add(mul(sq, inv_var), logvar), log2pi);
  return scale(sum(per_entry), T(-0.5));
}

template <typename T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar) {
  auto per_entry = add_scalar(sub(add(square(mu), exp(logvar)), logvar), T(-1));
  return scale(sum(per_entry), T(0.5));
}

template <typename T>
Var<T> kl_diagonal(const Var<T>& mu_q, const Var<T>& logvar_q, const Var<T>& mu_p, const Var<T>& logvar_p) {
  // 0.5 * sum(lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) / exp(lv_p) - 1)
  auto inv_var_p = exp(scale(logvar_p, T(-1)));
  auto ratio = mul(add(exp(logvar_q), square(sub(mu_q, mu_p))), inv_var_p);
  auto per_entry = add_scalar(add(sub(logvar_p, logvar_q), ratio), T(-1));
  return scale(sum(per_entry), T(0.5));
}

template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state) {
  if (state.first.size() != params.size()) {
    state.first.clear();
    state.second.clear();
    for (size_t i = 0; i < params.size(); ++i) {
      state.first.push_back(Tensor<T>::Zero(params[i].value.rows(), params[i].value.cols()));
      state.second.push_back(Tensor<T>::Zero(params[i].value.rows(), params[i].value.cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(state.lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(state.eps);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
  }
}

template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (size_t i = 0; i < params.size(); ++i) sq += params[i].grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (size_t i = 0; i < params.size(); ++i) params[i].grad *= factor;
  }
  return norm;
}

template <typename T>
std::vector<Tensor<T>> gradients(const ParameterStore<T>& params, const LossFn<T>& loss) {
  Tape<T> tape;
  auto out = loss(tape, params);
  tape.backward(out);
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    grads.push_back(Tensor<T>::Zero(params[i].value.rows(), params[i].value.cols()));
  }
  tape.accumulate_param_grads(grads);
  return grads;
}

template <typename T>
GradCheckReport compare_with_finite_differences(ParameterStore<T>& params, const LossFn<T>& loss,
                                                const std::vector<Tensor<T>>& analytic, double epsilon,
                                                size_t coords_per_param, Rng& rng) {
  auto eval = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(loss(tape, params).item());
  };
  GradCheckReport report;
  for (size_t pid = 0; pid < params.size(); ++pid) {
    auto& value = params[pid].value;
    const auto n = static_cast<size_t>(value.size());
    std::vector<size_t> coords;
    if (n <= coords_per_param) {
      for (size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (size_t i = 0; i < coords_per_param; ++i) coords.push_back(static_cast<size_t>(rng.uniform_int(0, n - 1)));
    }
    for (size_t c : coords) {
      T& slot = value.data()[c];
      const T saved = slot;
      slot = static_cast<T>(static_cast<double>(saved) + epsilon);
      const double up = eval();
      slot = static_cast<T>(static_cast<double>(saved) - epsilon);
      const double down = eval();
      slot = saved;
      const double fd = (up - down) / (2.0 * epsilon);
      const double ad = static_cast<double>(analytic[pid].data()[c]);
      const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
      const double err = std::abs(fd - ad) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = params[pid].name + "[" + std::to_string(c) + "]";
      }
    }
  }
  return report;
}

template <typename T>
GradCheckReport grad_check(ParameterStore<T>& params, const LossFn<T>& loss, double epsilon, size_t coords_per_param,
                           Rng& rng) {
  const auto analytic = gradients(params, loss);
  return compare_with_finite_differences(params, loss, analytic, epsilon, coords_per_param, rng);
}

#define PHONHAL_INSTANTIATE_NN(T)                                                                              \
  template Tensor<T> glorot_uniform<T>(Eigen::Index, Eigen::Index, Rng&);                                      \
  template Tensor<T> gaussian<T>(Eigen::Index, Eigen::Index, Rng&);                                            \
  template Linear make_linear<T>(ParameterStore<T>&, const std::string&, Eigen::Index, Eigen::Index, Rng&);    \
  template Var<T> multihead_attention(const Var<T>&, const Var<T>&, const Var<T>&, int);                       \
  template Var<T> gaussian_log_density(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> kl_standard_normal(const Var<T>&, const Var<T>&);                                            \
  template Var<T> kl_diagonal(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template void adam_step(ParameterStore<T>&, AdamState<T>&);                                                  \
  template double clip_grad_norm(ParameterStore<T>&, double);                                                  \
  template std::vector<Tensor<T>> gradients(const ParameterStore<T>&, const LossFn<T>&);                       \
  template GradCheckReport compare_with_finite_differences(ParameterStore<T>&, const LossFn<T>&,               \
                                                           const std::vector<Tensor<T>>&, double, size_t, Rng&); \
  template GradCheckReport grad_check(ParameterStore<T>&, const LossFn<T>&, double, size_t, Rng&);

PHONHAL_INSTANTIATE_NN(float)
PHONHAL_INSTANTIATE_NN(double)

}  // namespace phonhal::nn
