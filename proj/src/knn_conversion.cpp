#include "phonhal/knn_conversion.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

namespace phonhal {

namespace {

double sequential_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

double sequential_dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename F>
void parallel_for(size_t n, unsigned threads, F&& body) {
  threads = static_cast<unsigned>(std::min<size_t>(std::max(1u, threads), n));
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

constexpr size_t kQueryBlock = 256;

}  // namespace

NeighborIndex::NeighborIndex(const FeatureSet& target) : vectors_(target.features) {
  if (target.cardinality() == 0) throw Error(ErrorCode::invalid_argument, "neighbor index needs at least one vector");
  const size_t n = vectors_.count();
  const auto d = static_cast<Eigen::Index>(vectors_.dim());
  norms_.resize(n);
  unit_.resize(static_cast<Eigen::Index>(n), d);
  for (size_t i = 0; i < n; ++i) {
    const auto row = vectors_.row(i);
    norms_[i] = sequential_norm(row);
    if (!(norms_[i] > 0.0) || !std::isfinite(norms_[i])) {
      throw Error(ErrorCode::invalid_argument, "target vector " + std::to_string(i) + " has zero or non-finite norm");
    }
    for (Eigen::Index j = 0; j < d; ++j) {
      unit_(static_cast<Eigen::Index>(i), j) = static_cast<float>(row[static_cast<size_t>(j)] / norms_[i]);
    }
  }
  // Worst-case float error of a unit-vector dot product, with headroom for
  // the rounding of the normalized entries themselves.
  slack_ = static_cast<float>(4.0 * (static_cast<double>(d) + 4.0) * std::numeric_limits<float>::epsilon());
}

double NeighborIndex::similarity(std::span<const float> q, size_t target) const {
  const double qn = sequential_norm(q);
  if (qn == 0.0) return 0.0;
  return sequential_dot(q, vectors_.row(target)) / (qn * norms_[target]);
}

std::vector<size_t> NeighborIndex::select(std::span<const float> q, double q_norm, const float* approx, size_t k) const {
  const size_t n = size();
  std::vector<size_t> candidates;
  if (q_norm == 0.0) {
    // Every similarity is 0; insertion order decides.
    candidates.resize(k);
    std::iota(candidates.begin(), candidates.end(), size_t{0});
    return candidates;
  }
  std::vector<float> scratch(approx, approx + n);
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end(),
                   std::greater<float>());
  const float threshold = scratch[k - 1] - 2.0f * slack_;
  for (size_t i = 0; i < n; ++i) {
    if (approx[i] >= threshold) candidates.push_back(i);
  }
  std::vector<std::pair<double, size_t>> scored;
  scored.reserve(candidates.size());
  for (size_t i : candidates) scored.emplace_back(sequential_dot(q, vectors_.row(i)) / (q_norm * norms_[i]), i);
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<size_t> out(k);
  for (size_t i = 0; i < k; ++i) out[i] = scored[i].second;
  return out;
}

std::vector<size_t> NeighborIndex::query(std::span<const float> q, size_t k) const {
  FeatureMatrix one(dim(), 0);
  one.append(q);
  return query_batch(one, k, 1).front();
}

std::vector<std::vector<size_t>> NeighborIndex::query_batch(const FeatureMatrix& queries, size_t k,
                                                            unsigned threads) const {
  if (k == 0) throw Error(ErrorCode::invalid_argument, "k must be at least 1");
  if (k > size()) {
    throw Error(ErrorCode::invalid_argument,
                "k=" + std::to_string(k) + " exceeds target cardinality " + std::to_string(size()));
  }
  if (queries.count() > 0 && queries.dim() != dim()) {
    throw Error(ErrorCode::invalid_argument,
                "query dim " + std::to_string(queries.dim()) + " does not match index dim " + std::to_string(dim()));
  }
  const size_t nq = queries.count();
  std::vector<std::vector<size_t>> out(nq);
  const size_t blocks = (nq + kQueryBlock - 1) / kQueryBlock;
  const auto d = static_cast<Eigen::Index>(dim());
  parallel_for(blocks, threads, [&](size_t b) {
    const size_t first = b * kQueryBlock;
    const size_t rows = std::min(kQueryBlock, nq - first);
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> qs(static_cast<Eigen::Index>(rows), d);
    std::vector<double> qn(rows);
    for (size_t r = 0; r < rows; ++r) {
      const auto row = queries.row(first + r);
      qn[r] = sequential_norm(row);
      const double inv = qn[r] > 0.0 ? 1.0 / qn[r] : 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        qs(static_cast<Eigen::Index>(r), j) = static_cast<float>(row[static_cast<size_t>(j)] * inv);
      }
    }
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sims = qs * unit_.transpose();
    for (size_t r = 0; r < rows; ++r) {
      out[first + r] = select(queries.row(first + r), qn[r], sims.row(static_cast<Eigen::Index>(r)).data(), k);
    }
  });
  return out;
}

namespace {

std::vector<float> mean_of(const NeighborIndex& index, std::vector<size_t> ids) {
  std::sort(ids.begin(), ids.end());
  const size_t d = index.dim();
  std::vector<double> acc(d, 0.0);
  for (size_t i : ids) {
    const auto row = index.vectors().row(i);
    for (size_t j = 0; j < d; ++j) acc[j] += row[j];
  }
  std::vector<float> out(d);
  const double k = static_cast<double>(ids.size());
  for (size_t j = 0; j < d; ++j) out[j] = static_cast<float>(acc[j] / k);
  return out;
}

}  // namespace

std::vector<float> knn_regress(std::span<const float> query, const NeighborIndex& index, size_t k) {
  return mean_of(index, index.query(query, k));
}

FeatureSequence convert_sequence(const FeatureSequence& source, const NeighborIndex& index, const KnnConfig& config) {
  if (source.length() == 0) return FeatureSequence{FeatureMatrix(index.dim(), 0)};
  if (source.dim() != index.dim()) {
    throw Error(ErrorCode::invalid_argument, "source dim " + std::to_string(source.dim()) + " does not match target dim " +
                                                 std::to_string(index.dim()));
  }
  const unsigned threads = config.threads ? config.threads : default_thread_count();
  const auto neighbors = index.query_batch(source.frames, config.k, threads);
  FeatureSequence out{FeatureMatrix(index.dim(), source.length())};
  for (size_t i = 0; i < neighbors.size(); ++i) {
    const auto mean = mean_of(index, neighbors[i]);
    std::copy(mean.begin(), mean.end(), out.frames.row(i).begin());
  }
  return out;
}

FeatureSequence convert_sequence(const FeatureSequence& source, const FeatureSet& target, const KnnConfig& config) {
  if (source.length() > 0 && source.dim() != target.dim()) {
    throw Error(ErrorCode::invalid_argument, "source dim " + std::to_string(source.dim()) + " does not match target dim " +
                                                 std::to_string(target.dim()));
  }
  return convert_sequence(source, NeighborIndex(target), config);
}

FeatureSet expand_target(const FeatureSet& target, const HallucinatorModel<float>& model, size_t count,
                         const HallucinateOptions& options) {
  if (count == 0) return target;
  const FeatureSet unit{normalize(target.features), target.speaker_tag};
  const FeatureSet extra = hallucinate(model, unit, count, options);
  FeatureSet out = target;
  out.features.append(denormalize(extra.features));
  return out;
}

}  // namespace phonhal
