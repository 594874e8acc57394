#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phonhal/feature_store.hpp"
#include "phonhal/hallucinator.hpp"
#include "phonhal/trainer.hpp"

namespace phonhal::synth {

// Generator settings. Geometry lives in a unit space; files hold 10x that,
// matching the scale of real encoder features.
struct CorpusParams {
  uint64_t seed = 0;
  size_t phonemes = 16;
  uint32_t dim = 32;
  size_t train_speakers = 20;
  size_t heldout_speakers = 4;
  size_t frames_per_utterance = 500;
  size_t utterances_per_speaker = 8;
  double sigma = 0.05;            // RMS norm of within-cluster noise
  double rotation = 0.05;         // strength of the speaker rotation away from identity
  double offset_norm = 15.0;      // typical speaker offset length
  size_t offset_rank = 4;         // offsets share a random subspace of this rank (0 = full)
  double center_sd = 2.0;         // per-dimension spread of the codebook centers
  double scale_min = 0.8, scale_max = 1.2;
  double stay_probability = 0.9;  // Markov label chain self-transition
  double validation_fraction = 0.1;

  nlohmann::json to_json() const;
  static CorpusParams from_json(const nlohmann::json& j);
};

struct Codebook {
  Eigen::MatrixXd centers;  // P x d, unit space
  double sigma = 0.05;

  size_t phonemes() const { return static_cast<size_t>(centers.rows()); }
  uint32_t dim() const { return static_cast<uint32_t>(centers.cols()); }
};

struct Speaker {
  std::string id;
  Eigen::MatrixXd map;     // d x d
  Eigen::VectorXd offset;  // d
  bool heldout = false;

  // Mean singular value of the map.
  double scale() const;
  // Raw-space image of a codebook center.
  Eigen::VectorXd center(const Codebook& codebook, size_t label) const;
};

struct Utterance {
  size_t speaker = 0;
  FeatureSequence frames;  // raw space
  std::vector<uint16_t> labels;
};

struct Corpus {
  CorpusParams params;
  Codebook codebook;
  std::vector<Speaker> speakers;
  std::vector<Utterance> utterances;
  std::vector<size_t> train;       // utterance indices of training speakers
  std::vector<size_t> validation;  // held back from training speakers
  std::vector<size_t> heldout;     // utterances of unseen speakers

  std::vector<FeatureSet> sets(const std::vector<size_t>& which) const;
  std::vector<size_t> utterances_of(size_t speaker) const;
};

Corpus gen_corpus(const CorpusParams& params);

// spkNN/uttMMM.fsf (+ manifest, + .labels) and corpus.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);
std::filesystem::path labels_path(const std::filesystem::path& fsf);
std::vector<uint16_t> read_labels(const std::filesystem::path& path);

// Fraction of the speaker's transformed centers with a set element within
// 3 * sigma * scale (raw units).
double coverage_metric(const FeatureSet& set, const Speaker& speaker, const Codebook& codebook);
// Fraction of vectors whose Euclidean nearest reference frame belongs to
// references[true_speaker].
double fidelity_metric(const FeatureSet& hallucinated, size_t true_speaker, const std::vector<FeatureSet>& references);
// Fraction of converted frames whose nearest transformed center (target map)
// differs from the source label.
double content_error_metric(const std::vector<uint16_t>& source_labels, const FeatureSequence& converted,
                            const Speaker& target, const Codebook& codebook);
// Nearest transformed center for every row.
std::vector<uint16_t> nearest_labels(const FeatureMatrix& frames, const Speaker& speaker, const Codebook& codebook);

struct Variant {
  std::string name;
  AblationFlags flags;
};
// V1..V6 flag patterns.
std::vector<Variant> ablation_variants();

struct BenchConfig {
  HallucinatorConfig model;  // feature_dim is taken from the corpus
  TrainConfig train;
  size_t observed = 100;           // target frames given to the model
  size_t sources_per_target = 2;   // source utterances converted per held-out speaker
  size_t reference_frames = 1000;  // dense reference set size per speaker
  size_t k = 4;
  uint64_t seed = 0;
};

// Settings tuned for the desk preset on the default corpus: small batches and
// a larger step size than the published recipe, fixed epoch count.
BenchConfig desk_bench(uint32_t dim, int epochs = 250);

struct BenchRow {
  std::string variant;
  AblationFlags flags;
  size_t count = 0;
  double content_error = 0.0;
  double fidelity = 0.0;
  double coverage = 0.0;
};

// Metrics averaged over held-out speakers, one row per count.
std::vector<BenchRow> evaluate_model(const HallucinatorModel<float>& model, const Corpus& corpus,
                                     const std::vector<size_t>& counts, const BenchConfig& config,
                                     const std::string& variant = "V1");

// Oracle row for real data: dense same-speaker targets, identity-style
// conversion and real frames judged for fidelity.
BenchRow ground_truth_row(const Corpus& corpus, const BenchConfig& config);

struct AblationResult {
  std::vector<BenchRow> rows;
  std::vector<TrainResult> training;  // one per variant
};

AblationResult run_ablation_suite(const Corpus& corpus, const std::vector<Variant>& variants,
                                  const std::vector<size_t>& counts, const BenchConfig& config);

void write_results(const std::filesystem::path& path, const std::vector<BenchRow>& rows);

struct Projection {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // 2 x d, unit rows, largest-magnitude entry positive
  Eigen::MatrixXd coords;      // n x 2
  Eigen::Vector2d variance;    // along each component
};

Projection principal_projection(const FeatureMatrix& data);

struct LabeledSet {
  std::string label;
  FeatureSet set;
};

// PCA of the union; writes "x,y,label" rows.
Projection export_projection(const std::vector<LabeledSet>& sets, const std::filesystem::path& path);

}  // namespace phonhal::synth
