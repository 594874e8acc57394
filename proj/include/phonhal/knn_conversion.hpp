#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "phonhal/feature_store.hpp"
#include "phonhal/hallucinator.hpp"

namespace phonhal {

struct KnnConfig {
  size_t k = 4;
  unsigned threads = 0;  // 0 picks the environment default
};

// Exact cosine-similarity search. A float pass over unit-normalized targets
// prunes candidates; survivors are rescored in double, so results equal an
// exhaustive double-precision scan. Ties go to the lower insertion index.
class NeighborIndex {
 public:
  explicit NeighborIndex(const FeatureSet& target);

  size_t size() const { return vectors_.count(); }
  uint32_t dim() const { return vectors_.dim(); }
  const FeatureMatrix& vectors() const { return vectors_; }

  // Indices of the k most similar targets, most similar first.
  std::vector<size_t> query(std::span<const float> q, size_t k) const;
  // Row i of the result answers row i of `queries`.
  std::vector<std::vector<size_t>> query_batch(const FeatureMatrix& queries, size_t k, unsigned threads = 1) const;

  // Cosine similarity as used for ranking: sequential double dot over the
  // product of sequential double norms.
  double similarity(std::span<const float> q, size_t target) const;

 private:
  std::vector<size_t> select(std::span<const float> q, double q_norm, const float* approx, size_t k) const;

  FeatureMatrix vectors_;
  std::vector<double> norms_;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> unit_;
  float slack_ = 0.0f;
};

// Unweighted mean of the k nearest targets (accumulated in double, ascending
// index order).
std::vector<float> knn_regress(std::span<const float> query, const NeighborIndex& index, size_t k);

FeatureSequence convert_sequence(const FeatureSequence& source, const NeighborIndex& index, const KnnConfig& config);
FeatureSequence convert_sequence(const FeatureSequence& source, const FeatureSet& target, const KnnConfig& config);

// X^t plus `count` hallucinations; both raw (un-normalized), X^t rows first.
FeatureSet expand_target(const FeatureSet& target, const HallucinatorModel<float>& model, size_t count,
                         const HallucinateOptions& options);

}  // namespace phonhal
