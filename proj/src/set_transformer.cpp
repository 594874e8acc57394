#include "phonhal/set_transformer.hpp"

#include <algorithm>
#include <numeric>

namespace phonhal::set {

void SetEncoderConfig::validate() const {
  if (input_dim <= 0) throw Error(ErrorCode::config, "set encoder input_dim must be positive");
  if (hidden <= 0 || heads <= 0 || hidden % heads != 0) {
    throw Error(ErrorCode::config, "set encoder hidden size must be divisible by the head count");
  }
  if (blocks < 1) throw Error(ErrorCode::config, "set encoder needs at least one block");
  if (inducing < 1) throw Error(ErrorCode::config, "set encoder needs at least one inducing point");
}

namespace {

template <typename T>
MabParams make_mab(nn::ParameterStore<T>& store, const std::string& name, Eigen::Index hidden, Rng& rng) {
  MabParams p;
  p.query = nn::make_linear(store, name + ".q", hidden, hidden, rng);
  p.key = nn::make_linear(store, name + ".k", hidden, hidden, rng);
  p.value = nn::make_linear(store, name + ".v", hidden, hidden, rng);
  p.ff_in = nn::make_linear(store, name + ".ff1", hidden, hidden, rng);
  p.ff_out = nn::make_linear(store, name + ".ff2", hidden, hidden, rng);
  return p;
}

}  // namespace

template <typename T>
SetEncoder make_set_encoder(nn::ParameterStore<T>& store, const std::string& name, const SetEncoderConfig& config,
                            Rng& rng) {
  config.validate();
  SetEncoder enc;
  enc.config = config;
  enc.input = nn::make_linear(store, name + ".input", config.input_dim, config.hidden, rng);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string prefix = name + ".isab" + std::to_string(b);
    IsabParams block;
    block.inducing = store.add(prefix + ".inducing", nn::gaussian<T>(config.inducing, config.hidden, rng));
    block.gather = make_mab(store, prefix + ".mab0", config.hidden, rng);
    block.scatter = make_mab(store, prefix + ".mab1", config.hidden, rng);
    enc.blocks.push_back(block);
  }
  return enc;
}

template <typename T>
GaussianHead make_gaussian_head(nn::ParameterStore<T>& store, const std::string& name, Eigen::Index in,
                                Eigen::Index out, Rng& rng) {
  GaussianHead head{nn::make_linear(store, name + ".mu", in, out, rng),
                    nn::make_linear(store, name + ".logvar", in, out, rng)};
  // Unit variance at init; a random logvar head overflows exp() on large inputs.
  store[head.logvar.weight].value.setZero();
  return head;
}

template <typename T>
Var<T> mab(const Context<T>& ctx, const MabParams& p, const Var<T>& x, const Var<T>& y, int heads) {
  auto q = nn::apply(ctx, p.query, x);
  auto k = nn::apply(ctx, p.key, y);
  auto v = nn::apply(ctx, p.value, y);
  auto h = nn::add(x, nn::multihead_attention(q, k, v, heads));
  auto ff = nn::apply(ctx, p.ff_out, nn::leaky_relu(nn::apply(ctx, p.ff_in, h), static_cast<T>(nn::kLeakySlope)));
  return nn::add(h, ff);
}

template <typename T>
Var<T> isab(const Context<T>& ctx, const IsabParams& p, const Var<T>& x, int heads) {
  auto summary = mab(ctx, p.gather, ctx.p(p.inducing), x, heads);
  return mab(ctx, p.scatter, x, summary, heads);
}

template <typename T>
Tensor<T> slot_matrix(const MaskedSet& slots) {
  const Eigen::Index dim = slots.dim();
  Tensor<T> m(static_cast<Eigen::Index>(slots.size()), dim + 1);
  for (size_t i = 0; i < slots.size(); ++i) {
    const auto row = slots.value(i);
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < dim; ++j) m(r, j) = static_cast<T>(row[static_cast<size_t>(j)]);
    m(r, dim) = slots.observed(i) ? T(1) : T(0);
  }
  return m;
}

template <typename T>
std::vector<Eigen::Index> canonical_row_order(const Tensor<T>& rows) {
  std::vector<Eigen::Index> order(static_cast<size_t>(rows.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index cols = rows.cols();
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const T* ra = rows.row(a).data();
    const T* rb = rows.row(b).data();
    return std::lexicographical_compare(ra, ra + cols, rb, rb + cols);
  });
  return order;
}

template <typename T>
Var<T> encode_equivariant(const Context<T>& ctx, const SetEncoder& encoder, const Tensor<T>& slots) {
  if (slots.cols() != encoder.config.input_dim) {
    throw Error(ErrorCode::invalid_argument, "set encoder expects " + std::to_string(encoder.config.input_dim) +
                                                 " input columns, got " + std::to_string(slots.cols()));
  }
  if (slots.rows() < 1) throw Error(ErrorCode::invalid_argument, "set encoder input is empty");
  const auto order = canonical_row_order(slots);
  std::vector<Eigen::Index> inverse(order.size());
  for (size_t i = 0; i < order.size(); ++i) inverse[static_cast<size_t>(order[i])] = static_cast<Eigen::Index>(i);

  Tensor<T> sorted(slots.rows(), slots.cols());
  for (size_t i = 0; i < order.size(); ++i) sorted.row(static_cast<Eigen::Index>(i)) = slots.row(order[i]);

  auto h = nn::apply(ctx, encoder.input, ctx.constant(std::move(sorted)));
  for (const auto& block : encoder.blocks) h = isab(ctx, block, h, encoder.config.heads);
  return nn::gather_rows(h, std::span<const Eigen::Index>(inverse));
}

template <typename T>
InvariantEncoding<T> encode_invariant(const Context<T>& ctx, const SetEncoder& encoder, const GaussianHead& head,
                                      const Tensor<T>& slots) {
  // Pooling over the canonical order keeps the mean's summation order fixed.
  const auto order = canonical_row_order(slots);
  Tensor<T> sorted(slots.rows(), slots.cols());
  for (size_t i = 0; i < order.size(); ++i) sorted.row(static_cast<Eigen::Index>(i)) = slots.row(order[i]);
  auto h = nn::apply(ctx, encoder.input, ctx.constant(std::move(sorted)));
  for (const auto& block : encoder.blocks) h = isab(ctx, block, h, encoder.config.heads);
  auto pooled = nn::mean_rows(h);
  return InvariantEncoding<T>{nn::apply(ctx, head.mu, pooled), nn::apply(ctx, head.logvar, pooled), pooled};
}

#define PHONHAL_INSTANTIATE_SET(T)                                                                              \
  template SetEncoder make_set_encoder<T>(nn::ParameterStore<T>&, const std::string&, const SetEncoderConfig&, \
                                          Rng&);                                                                \
  template GaussianHead make_gaussian_head<T>(nn::ParameterStore<T>&, const std::string&, Eigen::Index,         \
                                              Eigen::Index, Rng&);                                              \
  template Var<T> mab(const Context<T>&, const MabParams&, const Var<T>&, const Var<T>&, int);                  \
  template Var<T> isab(const Context<T>&, const IsabParams&, const Var<T>&, int);                               \
  template Tensor<T> slot_matrix<T>(const MaskedSet&);                                                          \
  template std::vector<Eigen::Index> canonical_row_order(const Tensor<T>&);                                     \
  template Var<T> encode_equivariant(const Context<T>&, const SetEncoder&, const Tensor<T>&);                   \
  template InvariantEncoding<T> encode_invariant(const Context<T>&, const SetEncoder&, const GaussianHead&,     \
                                                 const Tensor<T>&);

PHONHAL_INSTANTIATE_SET(float)
PHONHAL_INSTANTIATE_SET(double)

}  // namespace phonhal::set
