#include "phonhal/hallucinator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numbers>
#include <thread>

namespace phonhal {

using nn::Context;
using nn::Tape;

// ---- configuration ---------------------------------------------------------

HallucinatorConfig HallucinatorConfig::paper(uint32_t feature_dim) {
  HallucinatorConfig c;
  c.feature_dim = feature_dim;
  return c;
}

HallucinatorConfig HallucinatorConfig::desk(uint32_t feature_dim) {
  HallucinatorConfig c;
  c.feature_dim = feature_dim;
  c.theta_dim = 32;
  c.z_dim = 16;
  c.g_dim = 32;
  c.mlp_hidden = 128;
  c.flow_hidden = 64;
  c.set_hidden = 64;
  c.set_blocks = 2;
  c.set_inducing = 8;
  return c;
}

HallucinatorConfig HallucinatorConfig::toy(uint32_t feature_dim) {
  HallucinatorConfig c;
  c.feature_dim = feature_dim;
  c.theta_dim = 32;
  c.z_dim = 32;
  c.g_dim = 32;
  c.mlp_hidden = 64;
  c.flow_hidden = 32;
  c.set_hidden = 32;
  c.set_inducing = 2;
  c.train_set_cardinality = 8;
  c.inference_observed_cap = 4;
  return c;
}

void HallucinatorConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::config, what); };
  if (!flags.cat && !flags.mod) fail("at least one of CAT and MOD must be enabled");
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (theta_dim < 1 || z_dim < 1 || g_dim < 1) fail("latent sizes must be positive");
  if (mlp_layers < 1 || mlp_hidden < 1) fail("MLP needs at least one layer of positive width");
  if (flow_layers < 0) fail("flow_layers must be non-negative");
  if (flow_layers > 0 && (theta_dim < 2 || flow_hidden < 1)) fail("coupling layers need theta_dim >= 2");
  if (heads < 1 || set_hidden % heads != 0) fail("set_hidden must be divisible by heads");
  if (flags.peq && g_dim % heads != 0) fail("g_dim must be divisible by heads");
  if (set_blocks < 1 || set_inducing < 1) fail("set encoders need >= 1 block and >= 1 inducing point");
  if (train_set_cardinality < 2) fail("train_set_cardinality must be at least 2");
  if (inference_observed_cap < 1 || inference_observed_cap >= train_set_cardinality) {
    fail("inference_observed_cap must be in [1, train_set_cardinality)");
  }
}

nlohmann::json HallucinatorConfig::to_json() const {
  return nlohmann::json{
      {"feature_dim", feature_dim},
      {"theta_dim", theta_dim},
      {"z_dim", z_dim},
      {"g_dim", g_dim},
      {"mlp_layers", mlp_layers},
      {"mlp_hidden", mlp_hidden},
      {"flow_layers", flow_layers},
      {"flow_hidden", flow_hidden},
      {"set_hidden", set_hidden},
      {"set_blocks", set_blocks},
      {"set_inducing", set_inducing},
      {"heads", heads},
      {"peq", flags.peq},
      {"cat", flags.cat},
      {"mod", flags.mod},
      {"z_prior", z_prior == ZPrior::standard_normal ? "standard_normal" : "conditional"},
      {"train_set_cardinality", train_set_cardinality},
      {"inference_observed_cap", inference_observed_cap},
  };
}

HallucinatorConfig HallucinatorConfig::from_json(const nlohmann::json& j) {
  HallucinatorConfig c;
  try {
    c.feature_dim = j.at("feature_dim").get<uint32_t>();
    c.theta_dim = j.at("theta_dim").get<Eigen::Index>();
    c.z_dim = j.at("z_dim").get<Eigen::Index>();
    c.g_dim = j.at("g_dim").get<Eigen::Index>();
    c.mlp_layers = j.at("mlp_layers").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<Eigen::Index>();
    c.flow_layers = j.at("flow_layers").get<int>();
    c.flow_hidden = j.at("flow_hidden").get<Eigen::Index>();
    c.set_hidden = j.at("set_hidden").get<Eigen::Index>();
    c.set_blocks = j.at("set_blocks").get<int>();
    c.set_inducing = j.at("set_inducing").get<int>();
    c.heads = j.at("heads").get<int>();
    c.flags.peq = j.at("peq").get<bool>();
    c.flags.cat = j.at("cat").get<bool>();
    c.flags.mod = j.at("mod").get<bool>();
    const auto zp = j.at("z_prior").get<std::string>();
    if (zp == "standard_normal") {
      c.z_prior = ZPrior::standard_normal;
    } else if (zp == "conditional") {
      c.z_prior = ZPrior::conditional;
    } else {
      throw Error(ErrorCode::config, "unknown z_prior '" + zp + "'");
    }
    c.train_set_cardinality = j.at("train_set_cardinality").get<size_t>();
    c.inference_observed_cap = j.at("inference_observed_cap").get<size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config, std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- model -----------------------------------------------------------------

template <typename T>
HallucinatorModel<T>::HallucinatorModel(const HallucinatorConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  build(rng);
}

template <typename T>
HallucinatorModel<T>::HallucinatorModel(const HallucinatorConfig& config, nn::ParameterStore<T> params)
    : config_(config) {
  config_.validate();
  Rng rng(0);
  build(rng);
  if (params.size() != params_.size()) {
    throw Error(ErrorCode::corrupt, "parameter table has " + std::to_string(params.size()) + " records, model needs " +
                                        std::to_string(params_.size()));
  }
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto* id = params.find(params_[i].name);
    if (id == nullptr) throw Error(ErrorCode::corrupt, "missing parameter " + params_[i].name);
    const auto& src = params[*id].value;
    if (src.rows() != params_[i].value.rows() || src.cols() != params_[i].value.cols()) {
      throw Error(ErrorCode::corrupt, "shape mismatch for parameter " + params_[i].name);
    }
    params_[i].value = src;
  }
}

template <typename T>
void HallucinatorModel<T>::build(Rng& rng) {
  const auto& c = config_;
  const Eigen::Index slot_width = static_cast<Eigen::Index>(c.feature_dim) + 1;

  set::SetEncoderConfig sc{slot_width, c.set_hidden, c.set_blocks, c.set_inducing, c.heads};
  posterior_encoder = set::make_set_encoder(params_, "posterior", sc, rng);
  posterior_head = set::make_gaussian_head(params_, "posterior.head", c.set_hidden, c.theta_dim, rng);
  prior_encoder = set::make_set_encoder(params_, "prior", sc, rng);
  prior_head = set::make_gaussian_head(params_, "prior.head", c.set_hidden, c.theta_dim, rng);
  // Both theta distributions start at N(0, I); with random mean heads the
  // unnormalized encoders put them hundreds of units apart.
  params_[posterior_head.mu.weight].value.setZero();
  params_[prior_head.mu.weight].value.setZero();
  if (c.flags.peq) {
    set::SetEncoderConfig gc{slot_width, c.g_dim, c.set_blocks, c.set_inducing, c.heads};
    g_encoder = set::make_set_encoder(params_, "g", gc, rng);
  }

  const Eigen::Index lower = c.theta_dim / 2;
  const Eigen::Index upper = c.theta_dim - lower;
  for (int k = 0; k < c.flow_layers; ++k) {
    CouplingLayer layer;
    layer.transform_upper = (k % 2 == 0);
    const Eigen::Index kept = layer.transform_upper ? lower : upper;
    const Eigen::Index moved = layer.transform_upper ? upper : lower;
    const std::string name = "flow" + std::to_string(k);
    layer.hidden = nn::make_linear(params_, name + ".hidden", kept + c.set_hidden, c.flow_hidden, rng);
    layer.out = nn::make_linear(params_, name + ".out", c.flow_hidden, 2 * moved, rng);
    params_[layer.out.weight].value.setZero();  // identity flow at init
    flow.push_back(layer);
  }

  const Eigen::Index cond = c.theta_dim + c.g_dim;
  auto make_mlp = [&](const std::string& name, Eigen::Index in) {
    ModulatedMlp mlp;
    for (int l = 0; l < c.mlp_layers; ++l) {
      const Eigen::Index layer_in = l == 0 ? in : c.mlp_hidden;
      mlp.layers.push_back(nn::make_linear(params_, name + ".layer" + std::to_string(l), layer_in, c.mlp_hidden, rng));
      if (c.flags.mod) {
        mlp.gates.push_back(nn::make_linear(params_, name + ".gate" + std::to_string(l), cond, c.mlp_hidden, rng));
      }
    }
    return mlp;
  };
  const Eigen::Index extra = c.flags.cat ? cond : 0;
  encoder_mlp = make_mlp("encoder", static_cast<Eigen::Index>(c.feature_dim) + extra);
  encoder_head = set::make_gaussian_head(params_, "encoder.head", c.mlp_hidden, c.z_dim, rng);
  decoder_mlp = make_mlp("decoder", c.z_dim + extra);
  decoder_out = nn::make_linear(params_, "decoder.out", c.mlp_hidden, static_cast<Eigen::Index>(c.feature_dim), rng);
  if (c.z_prior == ZPrior::conditional) {
    z_prior_head = set::make_gaussian_head(params_, "zprior", cond, c.z_dim, rng);
  }
}

template <typename T>
template <typename U>
HallucinatorModel<U> HallucinatorModel<T>::cast() const {
  HallucinatorModel<U> out(config_, params_.template cast<U>());
  out.trained_steps = trained_steps;
  return out;
}

// ---- building blocks -------------------------------------------------------

template <typename T>
Tensor<T> posterior_slots(const MaskedSet& masked, const FeatureMatrix& missing_values) {
  Tensor<T> slots = set::slot_matrix<T>(masked);
  const size_t missing = masked.size() - masked.observed_count();
  if (missing_values.count() != missing) {
    throw Error(ErrorCode::invalid_argument, "misaligned held-out set: " + std::to_string(missing_values.count()) +
                                                 " values for " + std::to_string(missing) + " unobserved slots");
  }
  if (missing > 0 && missing_values.dim() != masked.dim()) {
    throw Error(ErrorCode::invalid_argument, "held-out values have the wrong dim");
  }
  size_t j = 0;
  for (size_t i = 0; i < masked.size(); ++i) {
    if (masked.observed(i)) continue;
    const auto row = missing_values.row(j++);
    for (size_t c = 0; c < row.size(); ++c) {
      slots(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<T>(row[c]);
    }
  }
  return slots;
}

template <typename T>
GaussianVars<T> posterior_theta(const Context<T>& ctx, const HallucinatorModel<T>& model, const Tensor<T>& full_slots) {
  auto enc = set::encode_invariant(ctx, model.posterior_encoder, model.posterior_head, full_slots);
  return {enc.mu, enc.logvar};
}

template <typename T>
PriorVars<T> prior_theta(const Context<T>& ctx, const HallucinatorModel<T>& model, const Tensor<T>& masked_slots) {
  auto enc = set::encode_invariant(ctx, model.prior_encoder, model.prior_head, masked_slots);
  return {enc.mu, enc.logvar, enc.pooled};
}

namespace {

template <typename T>
Var<T> coupling(const Context<T>& ctx, const HallucinatorConfig& config, const CouplingLayer& layer, const Var<T>& x,
                const Var<T>& pooled, bool inverse, Var<T>* log_det) {
  const Eigen::Index lower = config.theta_dim / 2;
  const Eigen::Index upper = config.theta_dim - lower;
  auto lo = nn::slice_cols(x, 0, lower);
  auto hi = nn::slice_cols(x, lower, upper);
  const Var<T>& kept = layer.transform_upper ? lo : hi;
  const Var<T>& moved = layer.transform_upper ? hi : lo;
  const Eigen::Index n_moved = moved.cols();

  auto cond_pooled = x.rows() == 1 ? pooled : nn::broadcast_rows(pooled, x.rows());
  auto h = nn::leaky_relu(nn::apply(ctx, layer.hidden, nn::concat_cols<T>({kept, cond_pooled})),
                          static_cast<T>(nn::kLeakySlope));
  auto o = nn::apply(ctx, layer.out, h);
  auto log_scale = nn::tanh(nn::slice_cols(o, 0, n_moved));
  auto shift = nn::slice_cols(o, n_moved, n_moved);

  Var<T> moved_out;
  if (!inverse) {
    moved_out = nn::add(nn::mul(moved, nn::exp(log_scale)), shift);
  } else {
    moved_out = nn::mul(nn::sub(moved, shift), nn::exp(nn::scale(log_scale, T(-1))));
  }
  if (log_det != nullptr) {
    auto s = nn::sum(log_scale);
    if (inverse) s = nn::scale(s, T(-1));
    *log_det = log_det->valid() ? nn::add(*log_det, s) : s;
  }
  return layer.transform_upper ? nn::concat_cols<T>({kept, moved_out}) : nn::concat_cols<T>({moved_out, kept});
}

template <typename T>
Var<T> zero_log_det(const Context<T>& ctx) {
  return ctx.constant(Tensor<T>::Zero(1, 1));
}

template <typename T>
Tensor<T> normal_tensor(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  return nn::gaussian<T>(rows, cols, rng);
}

}  // namespace

template <typename T>
Var<T> flow_forward(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& base, const Var<T>& pooled,
                    Var<T>* log_det) {
  if (log_det != nullptr && !log_det->valid()) *log_det = zero_log_det(ctx);
  Var<T> x = base;
  for (const auto& layer : model.flow) x = coupling(ctx, model.config(), layer, x, pooled, false, log_det);
  return x;
}

template <typename T>
Var<T> flow_inverse(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& theta, const Var<T>& pooled,
                    Var<T>* log_det) {
  if (log_det != nullptr && !log_det->valid()) *log_det = zero_log_det(ctx);
  Var<T> x = theta;
  for (auto it = model.flow.rbegin(); it != model.flow.rend(); ++it) {
    x = coupling(ctx, model.config(), *it, x, pooled, true, log_det);
  }
  return x;
}

template <typename T>
Var<T> prior_log_prob(const Context<T>& ctx, const HallucinatorModel<T>& model, const PriorVars<T>& prior,
                      const Var<T>& theta) {
  Var<T> log_det;
  auto base = flow_inverse(ctx, model, theta, prior.pooled, &log_det);
  return nn::add(nn::gaussian_log_density(base, prior.mu, prior.logvar), log_det);
}

template <typename T>
Var<T> embed_g(const Context<T>& ctx, const HallucinatorModel<T>& model, const Tensor<T>& masked_slots) {
  if (!model.g_encoder) return ctx.constant(Tensor<T>::Zero(masked_slots.rows(), model.config().g_dim));
  return set::encode_equivariant(ctx, *model.g_encoder, masked_slots);
}

template <typename T>
Var<T> modulated_mlp(const Context<T>& ctx, const HallucinatorConfig& config, const ModulatedMlp& mlp,
                     const Var<T>& input, const Var<T>& theta, const Var<T>& g) {
  const T slope = static_cast<T>(nn::kLeakySlope);
  Var<T> gate_in;
  if (config.flags.mod) {
    gate_in = nn::concat_cols<T>({nn::broadcast_rows(theta, input.rows()), g});
  }
  Var<T> h = input;
  for (size_t l = 0; l < mlp.layers.size(); ++l) {
    h = nn::leaky_relu(nn::apply(ctx, mlp.layers[l], h), slope);
    if (config.flags.mod) h = nn::mul(h, nn::sigmoid(nn::apply(ctx, mlp.gates[l], gate_in)));
  }
  return h;
}

namespace {

template <typename T>
Var<T> conditioned_input(const HallucinatorConfig& config, const Var<T>& x, const Var<T>& theta, const Var<T>& g) {
  if (!config.flags.cat) return x;
  return nn::concat_cols<T>({x, nn::broadcast_rows(theta, x.rows()), g});
}

template <typename T>
void check_conditioning(const HallucinatorConfig& config, const Var<T>& rows, const Var<T>& theta, const Var<T>& g) {
  if (theta.rows() != 1 || theta.cols() != config.theta_dim) {
    throw Error(ErrorCode::invalid_argument, "theta must be 1 x theta_dim");
  }
  if (g.rows() != rows.rows() || g.cols() != config.g_dim) {
    throw Error(ErrorCode::invalid_argument, "g must have one g_dim row per input row");
  }
}

}  // namespace

template <typename T>
GaussianVars<T> vae_encode(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& x,
                           const Var<T>& theta, const Var<T>& g) {
  const auto& c = model.config();
  if (x.cols() != static_cast<Eigen::Index>(c.feature_dim)) {
    throw Error(ErrorCode::invalid_argument, "vae_encode: feature dim mismatch");
  }
  check_conditioning(c, x, theta, g);
  auto h = modulated_mlp(ctx, c, model.encoder_mlp, conditioned_input(c, x, theta, g), theta, g);
  return {nn::apply(ctx, model.encoder_head.mu, h), nn::apply(ctx, model.encoder_head.logvar, h)};
}

template <typename T>
Var<T> vae_decode(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& z, const Var<T>& theta,
                  const Var<T>& g) {
  const auto& c = model.config();
  if (z.cols() != c.z_dim) throw Error(ErrorCode::invalid_argument, "vae_decode: latent dim mismatch");
  check_conditioning(c, z, theta, g);
  auto h = modulated_mlp(ctx, c, model.decoder_mlp, conditioned_input(c, z, theta, g), theta, g);
  return nn::apply(ctx, model.decoder_out, h);
}

template <typename T>
GaussianVars<T> z_prior(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& theta,
                        const Var<T>& g) {
  if (!model.z_prior_head) {
    auto zeros = ctx.constant(Tensor<T>::Zero(g.rows(), model.config().z_dim));
    return {zeros, zeros};
  }
  auto in = nn::concat_cols<T>({nn::broadcast_rows(theta, g.rows()), g});
  return {nn::apply(ctx, model.z_prior_head->mu, in), nn::apply(ctx, model.z_prior_head->logvar, in)};
}

template <typename T>
Var<T> unit_gaussian_log_likelihood(const Var<T>& x, const Var<T>& x_hat) {
  const T half_log2pi = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi));
  const T n = static_cast<T>(x.value().size());
  return nn::add_scalar(nn::scale(nn::sum(nn::square(nn::sub(x, x_hat))), T(-0.5)), -half_log2pi * n);
}

template <typename T>
SlotTerms<T> element_terms(const Context<T>& ctx, const HallucinatorModel<T>& model, const Var<T>& x,
                           const Var<T>& theta, const Var<T>& g, const Tensor<T>& z_noise) {
  auto q = vae_encode(ctx, model, x, theta, g);
  auto z = nn::add(q.mu, nn::mul(nn::exp(nn::scale(q.logvar, T(0.5))), ctx.constant(z_noise)));
  auto x_hat = vae_decode(ctx, model, z, theta, g);
  auto recon = unit_gaussian_log_likelihood(x, x_hat);
  Var<T> kl;
  if (model.z_prior_head) {
    auto p = z_prior(ctx, model, theta, g);
    kl = nn::kl_diagonal(q.mu, q.logvar, p.mu, p.logvar);
  } else {
    kl = nn::kl_standard_normal(q.mu, q.logvar);
  }
  return {recon, kl};
}

template <typename T>
ElboVars<T> elbo(const Context<T>& ctx, const HallucinatorModel<T>& model, const FeatureMatrix& missing_values,
                 const MaskedSet& masked, Rng& rng) {
  const auto& c = model.config();
  if (masked.dim() != c.feature_dim) throw Error(ErrorCode::invalid_argument, "masked set dim does not match model");
  const Tensor<T> full = posterior_slots<T>(masked, missing_values);
  const Tensor<T> observed = set::slot_matrix<T>(masked);

  std::vector<Eigen::Index> missing;
  for (size_t i = 0; i < masked.size(); ++i) {
    if (!masked.observed(i)) missing.push_back(static_cast<Eigen::Index>(i));
  }
  if (missing.empty()) throw Error(ErrorCode::invalid_argument, "elbo needs at least one unobserved slot");

  auto post = posterior_theta(ctx, model, full);
  auto prior = prior_theta(ctx, model, observed);
  auto g_all = embed_g(ctx, model, observed);

  auto eps = ctx.constant(normal_tensor<T>(1, c.theta_dim, rng));
  auto theta = nn::add(post.mu, nn::mul(nn::exp(nn::scale(post.logvar, T(0.5))), eps));
  auto log_q = nn::gaussian_log_density(theta, post.mu, post.logvar);
  auto log_p = prior_log_prob(ctx, model, prior, theta);
  auto kl_theta = nn::sub(log_q, log_p);

  auto g = nn::gather_rows(g_all, std::span<const Eigen::Index>(missing));
  Tensor<T> x_rows(static_cast<Eigen::Index>(missing.size()), static_cast<Eigen::Index>(c.feature_dim));
  for (size_t j = 0; j < missing.size(); ++j) {
    const auto row = missing_values.row(j);
    for (size_t k = 0; k < row.size(); ++k) {
      x_rows(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = static_cast<T>(row[k]);
    }
  }
  auto x = ctx.constant(std::move(x_rows));
  const Tensor<T> z_noise = normal_tensor<T>(x.rows(), c.z_dim, rng);
  auto terms = element_terms(ctx, model, x, theta, g, z_noise);
  auto total = nn::sub(nn::sub(terms.recon, terms.kl_z), kl_theta);
  return {terms.recon, terms.kl_z, kl_theta, total};
}

template <typename T>
ElboBreakdown evaluate_elbo(const HallucinatorModel<T>& model, const FeatureMatrix& missing_values,
                            const MaskedSet& masked, Rng& rng) {
  Tape<T> tape(false);
  Context<T> ctx{tape, model.params()};
  auto e = elbo(ctx, model, missing_values, masked, rng);
  return {static_cast<double>(e.recon.item()), static_cast<double>(e.kl_z.item()),
          static_cast<double>(e.kl_theta.item()), static_cast<double>(e.total.item())};
}

// ---- frozen prior ----------------------------------------------------------

template <typename T>
ThetaPrior<T>::ThetaPrior(const HallucinatorModel<T>& model, const MaskedSet& masked) : model_(&model) {
  Tape<T> tape(false);
  Context<T> ctx{tape, model.params()};
  auto p = prior_theta(ctx, model, set::slot_matrix<T>(masked));
  mu_ = p.mu.value();
  logvar_ = p.logvar.value();
  pooled_ = p.pooled.value();
}

template <typename T>
Tensor<T> ThetaPrior<T>::sample(Rng& rng) const {
  Tape<T> tape(false);
  Context<T> ctx{tape, model_->params()};
  Tensor<T> noise = normal_tensor<T>(1, mu_.cols(), rng);
  Tensor<T> base = mu_.array() + (logvar_.array() * T(0.5)).exp() * noise.array();
  return flow_forward(ctx, *model_, ctx.constant(base), ctx.constant(pooled_)).value();
}

template <typename T>
T ThetaPrior<T>::log_prob(const Tensor<T>& theta) const {
  Tape<T> tape(false);
  Context<T> ctx{tape, model_->params()};
  PriorVars<T> p{ctx.constant(mu_), ctx.constant(logvar_), ctx.constant(pooled_)};
  return prior_log_prob(ctx, *model_, p, ctx.constant(theta)).item();
}

// ---- sampling --------------------------------------------------------------

unsigned default_thread_count() {
  if (const char* env = std::getenv("PHONHAL_NUM_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

size_t hallucination_batches(const HallucinatorConfig& config, size_t target_cardinality, size_t count) {
  const size_t observed = std::min(target_cardinality, config.inference_observed_cap);
  const size_t per_batch = config.train_set_cardinality - observed;
  return (count + per_batch - 1) / per_batch;
}

namespace {

MaskedSet observed_first(const FeatureMatrix& observed, size_t slots) {
  MaskedSet masked(observed.dim(), slots);
  for (size_t i = 0; i < observed.count(); ++i) masked.set_observed(i, observed.row(i));
  return masked;
}

template <typename T>
struct BatchConditioning {
  std::optional<ThetaPrior<T>> prior;
  Tensor<T> g;  // rows of the generation slots
};

template <typename T>
BatchConditioning<T> condition_on(const HallucinatorModel<T>& model, const FeatureMatrix& observed) {
  const auto& c = model.config();
  const MaskedSet masked = observed_first(observed, c.train_set_cardinality);
  BatchConditioning<T> out;
  out.prior.emplace(model, masked);
  Tape<T> tape(false);
  Context<T> ctx{tape, model.params()};
  const Tensor<T> g_all = embed_g(ctx, model, set::slot_matrix<T>(masked)).value();
  const auto first = static_cast<Eigen::Index>(observed.count());
  out.g = g_all.bottomRows(g_all.rows() - first);
  return out;
}

template <typename T>
void generate_batch(const HallucinatorModel<T>& model, const BatchConditioning<T>& cond, Rng& rng, size_t take,
                    float* out) {
  const auto& c = model.config();
  Tape<T> tape(false);
  Context<T> ctx{tape, model.params()};
  auto theta = ctx.constant(cond.prior->sample(rng));
  auto g = ctx.constant(cond.g);
  Tensor<T> noise = normal_tensor<T>(cond.g.rows(), c.z_dim, rng);
  Var<T> z;
  if (model.z_prior_head) {
    auto p = z_prior(ctx, model, theta, g);
    Tensor<T> zv = p.mu.value().array() + (p.logvar.value().array() * T(0.5)).exp() * noise.array();
    z = ctx.constant(std::move(zv));
  } else {
    z = ctx.constant(std::move(noise));
  }
  const Tensor<T>& x_hat = vae_decode(ctx, model, z, theta, g).value();
  const auto d = static_cast<Eigen::Index>(c.feature_dim);
  for (size_t r = 0; r < take; ++r) {
    for (Eigen::Index k = 0; k < d; ++k) out[r * static_cast<size_t>(d) + static_cast<size_t>(k)] =
        static_cast<float>(x_hat(static_cast<Eigen::Index>(r), k));
  }
}

}  // namespace

template <typename T>
FeatureSet hallucinate(const HallucinatorModel<T>& model, const FeatureSet& target, size_t count,
                       const HallucinateOptions& options) {
  const auto& c = model.config();
  if (target.dim() != c.feature_dim) {
    throw Error(ErrorCode::invalid_argument, "target dim " + std::to_string(target.dim()) +
                                                 " does not match model dim " + std::to_string(c.feature_dim));
  }
  FeatureSet out{FeatureMatrix(c.feature_dim, count), target.speaker_tag};
  if (count == 0) return out;
  if (target.cardinality() == 0) throw Error(ErrorCode::invalid_argument, "target set is empty");
  if (model.trained_steps == 0) warn("hallucinating with an untrained model (parameters at initialization)");

  const size_t observed = std::min(target.cardinality(), c.inference_observed_cap);
  const size_t per_batch = c.train_set_cardinality - observed;
  const size_t batches = hallucination_batches(c, target.cardinality(), count);

  // With N_t <= cap every batch observes the whole target, so the prior and
  // g rows are shared.
  std::optional<BatchConditioning<T>> shared;
  if (target.cardinality() <= c.inference_observed_cap) shared = condition_on(model, target.features);

  auto run = [&](size_t b) {
    Rng rng(Rng::derive(options.seed, b));
    const size_t take = std::min(per_batch, count - b * per_batch);
    float* dst = out.features.values().data() + b * per_batch * c.feature_dim;
    if (shared) {
      generate_batch(model, *shared, rng, take, dst);
    } else {
      const FeatureSet subset = subsample_set(target, observed, rng);
      generate_batch(model, condition_on(model, subset.features), rng, take, dst);
    }
  };

  const unsigned threads = std::min<size_t>(options.threads ? options.threads : default_thread_count(), batches);
  if (threads <= 1) {
    for (size_t b = 0; b < batches; ++b) run(b);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (size_t b = next++; b < batches; b = next++) {
          try {
            run(b);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  if (!out.features.all_finite()) throw Error(ErrorCode::numeric, "hallucinated features contain non-finite values");
  return out;
}

#define PHONHAL_INSTANTIATE_HALLUCINATOR(T)                                                                        \
  template class HallucinatorModel<T>;                                                                             \
  template Tensor<T> posterior_slots<T>(const MaskedSet&, const FeatureMatrix&);                                   \
  template GaussianVars<T> posterior_theta(const Context<T>&, const HallucinatorModel<T>&, const Tensor<T>&);      \
  template PriorVars<T> prior_theta(const Context<T>&, const HallucinatorModel<T>&, const Tensor<T>&);             \
  template Var<T> flow_forward(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&, const Var<T>&,       \
                               Var<T>*);                                                                           \
  template Var<T> flow_inverse(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&, const Var<T>&,       \
                               Var<T>*);                                                                           \
  template Var<T> prior_log_prob(const Context<T>&, const HallucinatorModel<T>&, const PriorVars<T>&,              \
                                 const Var<T>&);                                                                   \
  template Var<T> embed_g(const Context<T>&, const HallucinatorModel<T>&, const Tensor<T>&);                       \
  template Var<T> modulated_mlp(const Context<T>&, const HallucinatorConfig&, const ModulatedMlp&, const Var<T>&,  \
                                const Var<T>&, const Var<T>&);                                                     \
  template GaussianVars<T> vae_encode(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&,               \
                                      const Var<T>&, const Var<T>&);                                               \
  template Var<T> vae_decode(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&, const Var<T>&,         \
                             const Var<T>&);                                                                       \
  template GaussianVars<T> z_prior(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&, const Var<T>&);  \
  template Var<T> unit_gaussian_log_likelihood(const Var<T>&, const Var<T>&);                                      \
  template SlotTerms<T> element_terms(const Context<T>&, const HallucinatorModel<T>&, const Var<T>&,               \
                                      const Var<T>&, const Var<T>&, const Tensor<T>&);                             \
  template ElboVars<T> elbo(const Context<T>&, const HallucinatorModel<T>&, const FeatureMatrix&,                  \
                            const MaskedSet&, Rng&);                                                               \
  template ElboBreakdown evaluate_elbo(const HallucinatorModel<T>&, const FeatureMatrix&, const MaskedSet&, Rng&); \
  template class ThetaPrior<T>;                                                                                    \
  template FeatureSet hallucinate(const HallucinatorModel<T>&, const FeatureSet&, size_t, const HallucinateOptions&);

PHONHAL_INSTANTIATE_HALLUCINATOR(float)
PHONHAL_INSTANTIATE_HALLUCINATOR(double)

template HallucinatorModel<double> HallucinatorModel<float>::cast<double>() const;
template HallucinatorModel<float> HallucinatorModel<double>::cast<float>() const;

}  // namespace phonhal
