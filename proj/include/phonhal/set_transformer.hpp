#pragma once

#include <string>
#include <vector>

#include "phonhal/feature_store.hpp"
#include "phonhal/nn.hpp"

namespace phonhal::set {

using nn::Context;
using nn::Linear;
using nn::ParamId;
using nn::Tensor;
using nn::Var;

struct SetEncoderConfig {
  Eigen::Index input_dim = 0;
  Eigen::Index hidden = 256;
  int blocks = 4;
  int inducing = 16;
  int heads = 4;

  void validate() const;
};

// Multihead attention block: H = X + MHA(XWq, YWk, YWv); out = H + FF(H).
// No normalization layers.
struct MabParams {
  Linear query, key, value;
  Linear ff_in, ff_out;
};

// Induced set attention block with its own learned inducing points.
struct IsabParams {
  ParamId inducing = 0;
  MabParams gather;   // inducing points attend to the set
  MabParams scatter;  // set attends to the gathered summary
};

struct SetEncoder {
  SetEncoderConfig config;
  Linear input;
  std::vector<IsabParams> blocks;
};

// Affine heads over the mean-pooled embedding.
struct GaussianHead {
  Linear mu;
  Linear logvar;
};

template <typename T>
SetEncoder make_set_encoder(nn::ParameterStore<T>& store, const std::string& name, const SetEncoderConfig& config,
                            Rng& rng);

template <typename T>
GaussianHead make_gaussian_head(nn::ParameterStore<T>& store, const std::string& name, Eigen::Index in,
                                Eigen::Index out, Rng& rng);

template <typename T>
Var<T> mab(const Context<T>& ctx, const MabParams& p, const Var<T>& x, const Var<T>& y, int heads);

template <typename T>
Var<T> isab(const Context<T>& ctx, const IsabParams& p, const Var<T>& x, int heads);

// Slot matrix N x (dim + 1): value followed by the observed flag.
template <typename T>
Tensor<T> slot_matrix(const MaskedSet& slots);

// Lexicographic row order. Running the stack on canonically ordered rows makes
// permutation laws hold bit-for-bit instead of up to summation-order rounding.
template <typename T>
std::vector<Eigen::Index> canonical_row_order(const Tensor<T>& rows);

// Per-slot embeddings (N x hidden); row i belongs to slot i.
template <typename T>
Var<T> encode_equivariant(const Context<T>& ctx, const SetEncoder& encoder, const Tensor<T>& slots);

template <typename T>
struct InvariantEncoding {
  Var<T> mu;
  Var<T> logvar;
  Var<T> pooled;  // 1 x hidden mean of the equivariant rows
};

template <typename T>
InvariantEncoding<T> encode_invariant(const Context<T>& ctx, const SetEncoder& encoder, const GaussianHead& head,
                                      const Tensor<T>& slots);

}  // namespace phonhal::set
