// Shared fixtures and independent reference implementations for the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "phonhal/feature_store.hpp"
#include "phonhal/rng.hpp"

namespace testing {

// Scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("phonhal_" + tag + "_" + std::to_string(phonhal::Rng::mix(reinterpret_cast<uintptr_t>(this) ^
                                                                        static_cast<uint64_t>(std::rand()))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline phonhal::FeatureMatrix random_matrix(uint32_t dim, size_t count, phonhal::Rng& rng, double sd = 1.0) {
  phonhal::FeatureMatrix m(dim, count);
  for (float& v : m.values()) v = static_cast<float>(sd * rng.normal());
  return m;
}

inline phonhal::FeatureSet random_set(uint32_t dim, size_t count, phonhal::Rng& rng, double sd = 1.0) {
  return phonhal::FeatureSet{random_matrix(dim, count, rng, sd), std::nullopt};
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Exhaustive cosine-similarity scan with the ranking contract of the index:
// double accumulation in index order, ties to the lower index.
inline std::vector<size_t> brute_force_knn(const phonhal::FeatureMatrix& targets, std::span<const float> q, size_t k) {
  double qn = 0;
  for (float v : q) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  std::vector<std::pair<double, size_t>> scored;
  for (size_t i = 0; i < targets.count(); ++i) {
    const auto r = targets.row(i);
    double dot = 0, rn = 0;
    for (size_t j = 0; j < r.size(); ++j) dot += static_cast<double>(q[j]) * r[j];
    for (size_t j = 0; j < r.size(); ++j) rn += static_cast<double>(r[j]) * r[j];
    scored.emplace_back(qn == 0 ? 0.0 : dot / (qn * std::sqrt(rn)), i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<size_t> out;
  for (size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

// Regularized upper incomplete gamma Q(a, x) by series / continued fraction.
inline double gamma_q(double a, double x) {
  if (x <= 0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 10000; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
  }
  double b = x + 1.0 - a, c = 1.0 / 1e-300, d = 1.0 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

// p-value of a chi-square goodness-of-fit test against equal cell probabilities.
inline double chi_square_uniform_p(const std::vector<size_t>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0;
  for (size_t c : counts) stat += (c - expected) * (c - expected) / expected;
  return gamma_q(0.5 * static_cast<double>(counts.size() - 1), 0.5 * stat);
}

// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major n x n).
// Returns eigenvalues descending with matching unit eigenvectors (columns).
struct Eigen2 {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};

inline Eigen2 jacobi_eigen(std::vector<std::vector<double>> a) {
  const size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (size_t p = 0; p < n; ++p)
      for (size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (size_t p = 0; p < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return a[i][i] > a[j][j]; });
  Eigen2 out;
  for (size_t i : order) {
    out.values.push_back(a[i][i]);
    std::vector<double> col(n);
    for (size_t k = 0; k < n; ++k) col[k] = v[k][i];
    out.vectors.push_back(col);
  }
  return out;
}

}  // namespace testing
