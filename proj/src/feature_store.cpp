#include "phonhal/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "phonhal/error.hpp"

namespace phonhal {

static_assert(std::endian::native == std::endian::little, "FSF I/O assumes a little-endian host");

FeatureMatrix::FeatureMatrix(uint32_t dim, size_t count) : dim_(dim), values_(size_t(dim) * count, 0.0f) {}

FeatureMatrix::FeatureMatrix(uint32_t dim, std::vector<float> values) : dim_(dim), values_(std::move(values)) {
  if (dim_ == 0) throw Error(ErrorCode::invalid_argument, "feature dim must be positive");
  if (values_.size() % dim_ != 0) throw Error(ErrorCode::invalid_argument, "value count is not a multiple of dim");
}

void FeatureMatrix::append(std::span<const float> row) {
  if (row.size() != dim_) throw Error(ErrorCode::invalid_argument, "row length does not match dim");
  values_.insert(values_.end(), row.begin(), row.end());
}

void FeatureMatrix::append(const FeatureMatrix& other) {
  if (other.empty()) return;
  if (other.dim_ != dim_) throw Error(ErrorCode::invalid_argument, "dim mismatch in append");
  values_.insert(values_.end(), other.values_.begin(), other.values_.end());
}

bool FeatureMatrix::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

MaskedSet::MaskedSet(uint32_t dim, size_t slots) : values_(dim, slots), observed_(slots, 0) {
  if (slots == 0) throw Error(ErrorCode::invalid_argument, "masked set needs at least one slot");
}

void MaskedSet::set_observed(size_t slot, std::span<const float> value) {
  if (value.size() != dim()) throw Error(ErrorCode::invalid_argument, "slot value length does not match dim");
  std::copy(value.begin(), value.end(), values_.row(slot).begin());
  observed_[slot] = 1;
}

void MaskedSet::set_missing(size_t slot) {
  auto r = values_.row(slot);
  std::fill(r.begin(), r.end(), 0.0f);
  observed_[slot] = 0;
}

size_t MaskedSet::observed_count() const {
  return static_cast<size_t>(std::count(observed_.begin(), observed_.end(), uint8_t{1}));
}

MaskedSet MaskedSet::permuted(std::span<const size_t> perm) const {
  if (perm.size() != size()) throw Error(ErrorCode::invalid_argument, "permutation length mismatch");
  MaskedSet out(dim(), size());
  for (size_t i = 0; i < perm.size(); ++i) {
    if (observed(perm[i])) {
      out.set_observed(i, value(perm[i]));
    }
  }
  return out;
}

const FeatureMatrix& matrix_of(const FeatureCollection& c) {
  return std::visit(
      [](const auto& v) -> const FeatureMatrix& {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, FeatureSet>) {
          return v.features;
        } else {
          return v.frames;
        }
      },
      c);
}

namespace {

template <typename U>
void put_le(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  return v;
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest.json");
}

void write_feature_file(const std::filesystem::path& path, const FeatureCollection& collection,
                        const std::optional<Manifest>& manifest) {
  const FeatureMatrix& m = matrix_of(collection);
  const bool is_set = std::holds_alternative<FeatureSet>(collection);
  if (is_set && m.count() == 0) throw Error(ErrorCode::invalid_argument, "cardinality must be >= 1");
  if (m.dim() == 0) throw Error(ErrorCode::invalid_argument, "dim must be positive");
  for (size_t i = 0; i < m.values().size(); ++i) {
    if (!std::isfinite(m.values()[i])) {
      std::ostringstream msg;
      msg << "non-finite value at row " << i / m.dim() << ", column " << i % m.dim();
      throw Error(ErrorCode::non_finite, msg.str());
    }
  }

  std::string header;
  header.append("PHFS", 4);
  header.push_back(static_cast<char>(kFsfVersion));
  header.push_back(static_cast<char>(is_set ? 0 : 1));
  header.push_back(0);  // f32
  header.push_back(0);
  put_le<uint32_t>(header, m.dim());
  put_le<uint64_t>(header, static_cast<uint64_t>(m.count()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(m.values().data()),
            static_cast<std::streamsize>(m.values().size() * sizeof(float)));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());

  std::optional<Manifest> meta = manifest;
  if (is_set && std::get<FeatureSet>(collection).speaker_tag) {
    if (!meta) meta = Manifest{};
    if (!meta->speaker_tag) meta->speaker_tag = std::get<FeatureSet>(collection).speaker_tag;
  }
  if (meta) {
    nlohmann::json j = nlohmann::json::object();
    if (meta->speaker_tag) j["speaker_tag"] = *meta->speaker_tag;
    if (meta->source) j["source"] = *meta->source;
    if (meta->frame_period_ms) j["frame_period_ms"] = *meta->frame_period_ms;
    std::ofstream mf(manifest_path(path), std::ios::trunc);
    if (!mf) throw Error(ErrorCode::io, "cannot write manifest for " + path.string());
    mf << j.dump(2) << '\n';
  }
}

std::optional<Manifest> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(manifest_path(path));
  if (!in) return std::nullopt;
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt, "malformed manifest for " + path.string() + ": " + e.what());
  }
  Manifest m;
  if (j.contains("speaker_tag")) m.speaker_tag = j["speaker_tag"].get<std::string>();
  if (j.contains("source")) m.source = j["source"].get<std::string>();
  if (j.contains("frame_period_ms")) m.frame_period_ms = j["frame_period_ms"].get<double>();
  return m;
}

FeatureCollection read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  unsigned char header[kFsfHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kFsfHeaderBytes);
  const auto got = static_cast<size_t>(in.gcount());
  if (got < 4 || std::memcmp(header, "PHFS", 4) != 0) {
    throw Error(ErrorCode::bad_magic, "bad magic in " + path.string() + " (expected PHFS)");
  }
  if (got < kFsfHeaderBytes) throw Error(ErrorCode::truncated, "truncated header in " + path.string());
  if (header[4] != kFsfVersion) {
    throw Error(ErrorCode::unsupported_version,
                "unsupported version " + std::to_string(header[4]) + " in " + path.string());
  }
  const uint8_t kind = header[5];
  if (kind > 1) throw Error(ErrorCode::corrupt, "unknown collection kind " + std::to_string(kind));
  if (header[6] != 0) throw Error(ErrorCode::corrupt, "unsupported dtype " + std::to_string(header[6]));
  const uint32_t dim = get_le<uint32_t>(header + 8);
  const uint64_t count = get_le<uint64_t>(header + 12);
  if (dim == 0) throw Error(ErrorCode::corrupt, "dim is zero in " + path.string());

  const uint64_t expected = uint64_t(dim) * count;
  if (count != 0 && expected / count != dim) throw Error(ErrorCode::corrupt, "dim*count overflows");
  std::vector<float> values;
  // Grow in chunks so a lying header cannot force a huge allocation.
  constexpr uint64_t kChunk = uint64_t(1) << 20;
  uint64_t read_so_far = 0;
  while (read_so_far < expected) {
    const uint64_t n = std::min(kChunk, expected - read_so_far);
    values.resize(static_cast<size_t>(read_so_far + n));
    in.read(reinterpret_cast<char*>(values.data() + read_so_far), static_cast<std::streamsize>(n * sizeof(float)));
    const auto floats = static_cast<uint64_t>(in.gcount()) / sizeof(float);
    read_so_far += floats;
    if (floats < n) {
      throw Error(ErrorCode::truncated, "truncated payload in " + path.string() + ": header count=" +
                                            std::to_string(count) + " but only " +
                                            std::to_string(read_so_far / dim) + " complete rows present");
    }
  }

  FeatureMatrix m(dim, std::move(values));
  if (kind == 0) {
    FeatureSet set{std::move(m), std::nullopt};
    if (auto meta = read_manifest(path); meta && meta->speaker_tag) set.speaker_tag = meta->speaker_tag;
    return set;
  }
  return FeatureSequence{std::move(m)};
}

FeatureMatrix normalize(const FeatureMatrix& m) {
  FeatureMatrix out = m;
  for (float& v : out.values()) v /= kFeatureScale;
  return out;
}

FeatureMatrix denormalize(const FeatureMatrix& m) {
  FeatureMatrix out = m;
  for (float& v : out.values()) v *= kFeatureScale;
  return out;
}

FeatureCollection normalize(const FeatureCollection& c) {
  return std::visit(
      [](const auto& v) -> FeatureCollection {
        auto out = v;
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, FeatureSet>) {
          out.features = normalize(v.features);
        } else {
          out.frames = normalize(v.frames);
        }
        return out;
      },
      c);
}

FeatureCollection denormalize(const FeatureCollection& c) {
  return std::visit(
      [](const auto& v) -> FeatureCollection {
        auto out = v;
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, FeatureSet>) {
          out.features = denormalize(v.features);
        } else {
          out.frames = denormalize(v.frames);
        }
        return out;
      },
      c);
}

std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng) {
  if (k > n) {
    throw Error(ErrorCode::invalid_argument,
                "target cardinality " + std::to_string(k) + " exceeds set cardinality " + std::to_string(n));
  }
  std::vector<size_t> pool(n);
  std::iota(pool.begin(), pool.end(), size_t{0});
  for (size_t i = 0; i < k; ++i) {
    const auto j = static_cast<size_t>(rng.uniform_int(i, n - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

FeatureSet subsample_set(const FeatureSet& set, size_t target_cardinality, Rng& rng) {
  if (target_cardinality == 0) throw Error(ErrorCode::invalid_argument, "target cardinality must be positive");
  const auto picks = sample_without_replacement(set.cardinality(), target_cardinality, rng);
  FeatureSet out{FeatureMatrix(set.dim(), std::vector<float>{}), set.speaker_tag};
  out.features.values().reserve(picks.size() * set.dim());
  for (size_t i : picks) out.features.append(set.features.row(i));
  return out;
}

}  // namespace phonhal
