#pragma once

#include <functional>
#include <string>
#include <vector>

#include "phonhal/autodiff.hpp"
#include "phonhal/rng.hpp"

namespace phonhal::nn {

inline constexpr double kLeakySlope = 0.2;

// Binds a tape to the parameter store it reads from.
template <typename T>
struct Context {
  Tape<T>& tape;
  const ParameterStore<T>& params;

  Var<T> p(ParamId id) const { return tape.param(params, id); }
  Var<T> constant(Tensor<T> v) const { return tape.constant(std::move(v)); }
};

struct Linear {
  ParamId weight = 0;
  ParamId bias = 0;
  Eigen::Index in = 0;
  Eigen::Index out = 0;
};

// Weights uniform in +-sqrt(6 / (in + out)), bias zero.
template <typename T>
Linear make_linear(ParameterStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng);

template <typename T>
Var<T> apply(const Context<T>& ctx, const Linear& layer, const Var<T>& x) {
  return linear(x, ctx.p(layer.weight), ctx.p(layer.bias));
}

template <typename T>
Tensor<T> glorot_uniform(Eigen::Index in, Eigen::Index out, Rng& rng);
template <typename T>
Tensor<T> gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// Scaled dot-product attention over already-projected q, k, v, split into
// `heads` column groups and concatenated back.
template <typename T>
Var<T> multihead_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);

// Diagonal-Gaussian log density summed over all entries; mu and logvar have the
// shape of x.
template <typename T>
Var<T> gaussian_log_density(const Var<T>& x, const Var<T>& mu, const Var<T>& logvar);
// KL(N(mu, exp(logvar)) || N(0, I)) summed over all entries.
template <typename T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar);
// KL between two diagonal Gaussians of the same shape, summed.
template <typename T>
Var<T> kl_diagonal(const Var<T>& mu_q, const Var<T>& logvar_q, const Var<T>& mu_p, const Var<T>& logvar_p);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  uint64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update from the gradients stored in `params`.
template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state);

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm);

template <typename T>
using LossFn = std::function<Var<T>(Tape<T>&, const ParameterStore<T>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t coordinates = 0;
  std::string worst;  // "param[index]" of the worst coordinate
};

// Central differences against reverse-mode gradients on up to
// `coords_per_param` sampled coordinates per parameter tensor.
template <typename T>
GradCheckReport grad_check(ParameterStore<T>& params, const LossFn<T>& loss, double epsilon, size_t coords_per_param,
                           Rng& rng);

// Same comparison against caller-supplied analytic gradients.
template <typename T>
GradCheckReport compare_with_finite_differences(ParameterStore<T>& params, const LossFn<T>& loss,
                                                const std::vector<Tensor<T>>& analytic, double epsilon,
                                                size_t coords_per_param, Rng& rng);

// Reverse-mode gradients of `loss` for every parameter.
template <typename T>
std::vector<Tensor<T>> gradients(const ParameterStore<T>& params, const LossFn<T>& loss);

}  // namespace phonhal::nn
