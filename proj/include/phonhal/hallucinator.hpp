#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "phonhal/feature_store.hpp"
#include "phonhal/nn.hpp"
#include "phonhal/set_transformer.hpp"

namespace phonhal {

using nn::Tensor;
using nn::Var;

// Which conditioning mechanisms are active (PEQ / CAT / MOD).
struct AblationFlags {
  bool peq = true;  // per-slot equivariant embedding g_i
  bool cat = true;  // theta and g_i concatenated to the MLP inputs
  bool mod = true;  // sigmoid gates on every MLP layer

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

enum class ZPrior {
  standard_normal,  // p(z | theta, g) = N(0, I)
  conditional,      // diagonal Gaussian from an affine head over [theta, g]
};

struct HallucinatorConfig {
  uint32_t feature_dim = 1024;
  Eigen::Index theta_dim = 256;
  Eigen::Index z_dim = 256;
  Eigen::Index g_dim = 256;
  int mlp_layers = 4;
  Eigen::Index mlp_hidden = 512;
  int flow_layers = 4;
  Eigen::Index flow_hidden = 256;
  Eigen::Index set_hidden = 256;
  int set_blocks = 4;
  int set_inducing = 16;
  int heads = 4;
  AblationFlags flags;
  ZPrior z_prior = ZPrior::standard_normal;
  size_t train_set_cardinality = 200;
  size_t inference_observed_cap = 100;

  // Published sizes.
  static HallucinatorConfig paper(uint32_t feature_dim);
  // Reduced widths for CPU training on the synthetic corpus.
  static HallucinatorConfig desk(uint32_t feature_dim);
  // Every width divided by 8; used by gradient checks.
  static HallucinatorConfig toy(uint32_t feature_dim);

  void validate() const;
  nlohmann::json to_json() const;
  static HallucinatorConfig from_json(const nlohmann::json& j);
};

struct ModulatedMlp {
  std::vector<nn::Linear> layers;
  std::vector<nn::Linear> gates;  // over [theta, g]; empty when MOD is off
};

struct CouplingLayer {
  bool transform_upper = true;  // which half of theta is rescaled
  nn::Linear hidden;            // [kept half, pooled embedding] -> flow_hidden
  nn::Linear out;               // -> [log-scale, shift] for the transformed half
};

template <typename T>
class HallucinatorModel {
 public:
  HallucinatorModel(const HallucinatorConfig& config, uint64_t seed);
  HallucinatorModel(const HallucinatorConfig& config, nn::ParameterStore<T> params);

  const HallucinatorConfig& config() const { return config_; }
  nn::ParameterStore<T>& params() { return params_; }
  const nn::ParameterStore<T>& params() const { return params_; }

  // Number of optimizer steps applied so far (0 means untrained).
  uint64_t trained_steps = 0;

  set::SetEncoder posterior_encoder;
  set::GaussianHead posterior_head;
  set::SetEncoder prior_encoder;
  set::GaussianHead prior_head;
  std::optional<set::SetEncoder> g_encoder;  // absent when PEQ is off
  std::vector<CouplingLayer> flow;
  ModulatedMlp encoder_mlp;
  set::GaussianHead encoder_head;  // -> (mu_z, logvar_z)
  ModulatedMlp decoder_mlp;
  nn::Linear decoder_out;
  std::optional<set::GaussianHead> z_prior_head;

  template <typename U>
  HallucinatorModel<U> cast() const;

 private:
  void build(Rng& rng);

  HallucinatorConfig config_;
  nn::ParameterStore<T> params_;
};

template <typename T>
struct GaussianVars {
  Var<T> mu;
  Var<T> logvar;
};

template <typename T>
struct PriorVars {
  Var<T> mu;  // base Gaussian
  Var<T> logvar;
  Var<T> pooled;  // conditions every coupling layer
};

template <typename T>
struct ElboVars {
  Var<T> recon;
  Var<T> kl_z;
  Var<T> kl_theta;
  Var<T> total;  // recon - kl_z - kl_theta, maximized
};

struct ElboBreakdown {
  double recon = 0.0;
  double kl_z = 0.0;
  double kl_theta = 0.0;
  double total = 0.0;
};

// Slot matrix for the posterior: every slot carries its true value; the flag
// still separates observed from held-out members. `missing_values` row j fills
// the j-th unobserved slot in ascending slot order.
template <typename T>
Tensor<T> posterior_slots(const MaskedSet& masked, const FeatureMatrix& missing_values);

template <typename T>
GaussianVars<T> posterior_theta(const nn::Context<T>& ctx, const HallucinatorModel<T>& model,
                                const Tensor<T>& full_slots);

template <typename T>
PriorVars<T> prior_theta(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Tensor<T>& masked_slots);

// Base sample -> theta. Adds sum of log-scales to *log_det when given.
template <typename T>
Var<T> flow_forward(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& base,
                    const Var<T>& pooled, Var<T>* log_det = nullptr);
// theta -> base sample. Adds log|d base / d theta| to *log_det when given.
template <typename T>
Var<T> flow_inverse(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& theta,
                    const Var<T>& pooled, Var<T>* log_det = nullptr);

template <typename T>
Var<T> prior_log_prob(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const PriorVars<T>& prior,
                      const Var<T>& theta);

// N x g_dim; zero rows when PEQ is off.
template <typename T>
Var<T> embed_g(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Tensor<T>& masked_slots);

// Gated MLP over `input` (rows). theta is 1 x theta_dim, g is rows x g_dim.
template <typename T>
Var<T> modulated_mlp(const nn::Context<T>& ctx, const HallucinatorConfig& config, const ModulatedMlp& mlp,
                     const Var<T>& input, const Var<T>& theta, const Var<T>& g);

template <typename T>
GaussianVars<T> vae_encode(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& x,
                           const Var<T>& theta, const Var<T>& g);

template <typename T>
Var<T> vae_decode(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& z, const Var<T>& theta,
                  const Var<T>& g);

// p(z | theta, g) parameters; zeros for the standard-normal prior.
template <typename T>
GaussianVars<T> z_prior(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& theta,
                        const Var<T>& g);

// Log-likelihood of x under N(x_hat, I), summed.
template <typename T>
Var<T> unit_gaussian_log_likelihood(const Var<T>& x, const Var<T>& x_hat);

template <typename T>
struct SlotTerms {
  Var<T> recon;
  Var<T> kl_z;
};

// Per-element terms of the inner bound for fixed theta and explicit noise.
template <typename T>
SlotTerms<T> element_terms(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& x,
                           const Var<T>& theta, const Var<T>& g, const Tensor<T>& z_noise);

// One-sample estimate of the full bound for a masked set whose unobserved
// slots hold the rows of `missing_values` (normalized space).
template <typename T>
ElboVars<T> elbo(const nn::Context<T>& ctx, const HallucinatorModel<T>& model, const FeatureMatrix& missing_values,
                 const MaskedSet& masked, Rng& rng);

template <typename T>
ElboBreakdown evaluate_elbo(const HallucinatorModel<T>& model, const FeatureMatrix& missing_values,
                            const MaskedSet& masked, Rng& rng);

// Frozen prior p(theta | X^t) for one masked set.
template <typename T>
class ThetaPrior {
 public:
  ThetaPrior(const HallucinatorModel<T>& model, const MaskedSet& masked);

  Tensor<T> sample(Rng& rng) const;
  T log_prob(const Tensor<T>& theta) const;
  const Tensor<T>& base_mu() const { return mu_; }
  const Tensor<T>& base_logvar() const { return logvar_; }
  const Tensor<T>& pooled() const { return pooled_; }

 private:
  const HallucinatorModel<T>* model_;
  Tensor<T> mu_, logvar_, pooled_;
};

struct HallucinateOptions {
  uint64_t seed = 0;
  // Worker threads for independent batches; 0 picks the environment default.
  unsigned threads = 0;
};

// Samples `count` new vectors conditioned on `target` (normalized space).
template <typename T>
FeatureSet hallucinate(const HallucinatorModel<T>& model, const FeatureSet& target, size_t count,
                       const HallucinateOptions& options);

// Batches needed for `count` samples given the target cardinality.
size_t hallucination_batches(const HallucinatorConfig& config, size_t target_cardinality, size_t count);

// Worker count from PHONHAL_NUM_THREADS, else hardware concurrency.
unsigned default_thread_count();

}  // namespace phonhal
