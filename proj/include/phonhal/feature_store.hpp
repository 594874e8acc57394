#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "phonhal/rng.hpp"

namespace phonhal {

// Row-major block of f32 frame features: count rows of dim values each.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(uint32_t dim, size_t count);
  FeatureMatrix(uint32_t dim, std::vector<float> values);

  uint32_t dim() const { return dim_; }
  size_t count() const { return dim_ == 0 ? 0 : values_.size() / dim_; }
  bool empty() const { return values_.empty(); }

  std::span<const float> row(size_t i) const { return {values_.data() + i * dim_, dim_}; }
  std::span<float> row(size_t i) { return {values_.data() + i * dim_, dim_}; }
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  void append(std::span<const float> row);
  void append(const FeatureMatrix& other);
  bool all_finite() const;

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  uint32_t dim_ = 0;
  std::vector<float> values_;
};

// Unordered collection (X^t, X^e and their union).
struct FeatureSet {
  FeatureMatrix features;
  std::optional<std::string> speaker_tag;

  uint32_t dim() const { return features.dim(); }
  size_t cardinality() const { return features.count(); }
};

// Ordered collection (source and converted sequences).
struct FeatureSequence {
  FeatureMatrix frames;

  uint32_t dim() const { return frames.dim(); }
  size_t length() const { return frames.count(); }
};

using FeatureCollection = std::variant<FeatureSet, FeatureSequence>;

// Fixed-cardinality set with per-slot observed flags. Unobserved slots hold
// zeros. Slot order is not meaningful.
class MaskedSet {
 public:
  MaskedSet() = default;
  MaskedSet(uint32_t dim, size_t slots);

  uint32_t dim() const { return values_.dim(); }
  size_t size() const { return observed_.size(); }

  void set_observed(size_t slot, std::span<const float> value);
  void set_missing(size_t slot);
  bool observed(size_t slot) const { return observed_[slot] != 0; }
  std::span<const float> value(size_t slot) const { return values_.row(slot); }
  size_t observed_count() const;

  const FeatureMatrix& values() const { return values_; }
  const std::vector<uint8_t>& flags() const { return observed_; }

  // Returns a copy whose slot i is this set's slot perm[i].
  MaskedSet permuted(std::span<const size_t> perm) const;

 private:
  FeatureMatrix values_;
  std::vector<uint8_t> observed_;
};

struct Manifest {
  std::optional<std::string> speaker_tag;
  std::optional<std::string> source;
  std::optional<double> frame_period_ms;
};

// FSF binary layout: "PHFS", version u8, kind u8 (0 set / 1 sequence),
// dtype u8 (0 = f32 LE), reserved u8, dim u32 LE, count u64 LE, payload.
inline constexpr uint8_t kFsfVersion = 1;
inline constexpr size_t kFsfHeaderBytes = 20;

void write_feature_file(const std::filesystem::path& path, const FeatureCollection& collection,
                        const std::optional<Manifest>& manifest = std::nullopt);
FeatureCollection read_feature_file(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& path);
std::optional<Manifest> read_manifest(const std::filesystem::path& path);

// Scale contract shared by every module: the model sees features / 10.
inline constexpr float kFeatureScale = 10.0f;

FeatureMatrix normalize(const FeatureMatrix& m);
FeatureMatrix denormalize(const FeatureMatrix& m);
FeatureCollection normalize(const FeatureCollection& c);
FeatureCollection denormalize(const FeatureCollection& c);

// Uniform subset without replacement, in draw order.
FeatureSet subsample_set(const FeatureSet& set, size_t target_cardinality, Rng& rng);
// Index form of the same draw (partial Fisher-Yates over 0..n-1).
std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng);

// Frames of either collection kind.
const FeatureMatrix& matrix_of(const FeatureCollection& c);

}  // namespace phonhal
