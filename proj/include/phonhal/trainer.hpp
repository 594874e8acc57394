#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "phonhal/checkpoint.hpp"
#include "phonhal/hallucinator.hpp"

namespace phonhal {

// One training example: a full set split into held-out X^e and observed X^t.
struct MCARSplit {
  FeatureSet full;
  std::vector<size_t> missing_indices;  // ascending
  FeatureSet missing;                   // X^e, rows in missing_indices order
  MaskedSet masked;                     // X^t with zeroed held-out slots
};

// N_e ~ U{1..N}, then N_e slots chosen uniformly without replacement.
MCARSplit mcar_split(const FeatureSet& x, size_t n, Rng& rng);

// Drops sets smaller than `min_cardinality`, warning once per dropped set.
std::vector<FeatureSet> trainable_sets(const std::vector<FeatureSet>& corpus, size_t min_cardinality);

// batch_size splits; each draws an utterance uniformly, subsamples it to n
// elements and splits it. Sets smaller than n are skipped with a warning.
std::vector<MCARSplit> make_batch(const std::vector<FeatureSet>& corpus, Rng& rng, size_t batch_size, size_t n);

struct TrainConfig {
  int epochs = 250;
  size_t batch_size = 50;
  double lr = 1e-4;
  size_t min_utterance_cardinality = 200;
  uint64_t seed = 0;
  int validate_every = 1;     // epochs between validation passes
  int patience = 0;           // early stop after this many non-improving validations; 0 disables
  double clip_norm = 5.0;
  double max_seconds = 0.0;   // stop after the epoch that crosses this wall time; 0 disables
  size_t validation_splits = 0;  // fixed validation batch size; 0 means one per validation set
  std::optional<std::filesystem::path> checkpoint;  // best model; "<checkpoint>.last" holds resumable state
  std::optional<std::filesystem::path> history;     // CSV loss history
  bool verbose = false;
};

struct HistoryEntry {
  int epoch = 0;
  double train_elbo = 0.0;
  double val_elbo = 0.0;
  double recon = 0.0;  // validation terms
  double kl_z = 0.0;
  double kl_theta = 0.0;
};

struct TrainResult {
  HallucinatorModel<float> model;  // best validation parameters
  std::vector<HistoryEntry> history;
  double initial_val_elbo = 0.0;
  double best_val_elbo = 0.0;
  int best_epoch = 0;
  bool stopped_early = false;
};

void write_history(const std::filesystem::path& path, const std::vector<HistoryEntry>& history);

// Optimizer loop over raw (un-normalized) sets; the ÷10 scaling happens here.
class Trainer {
 public:
  Trainer(const HallucinatorConfig& model_config, const TrainConfig& config, const std::vector<FeatureSet>& train,
          const std::vector<FeatureSet>& validation);
  // Continues from a checkpoint carrying trainer state.
  Trainer(const Checkpoint& resume, const TrainConfig& config, const std::vector<FeatureSet>& train,
          const std::vector<FeatureSet>& validation);

  // One Adam step on -mean(total). Returns mean total over the batch.
  double step(const std::vector<MCARSplit>& batch);
  // One pass where every training set contributes one split.
  double run_epoch();
  // Mean bound components over the fixed validation batch.
  ElboBreakdown validate() const;
  TrainResult run();

  const HallucinatorModel<float>& model() const { return model_; }
  const nn::AdamState<float>& optimizer() const { return adam_; }
  int epoch() const { return epoch_; }
  Checkpoint snapshot() const;

 private:
  void init();

  TrainConfig config_;
  HallucinatorModel<float> model_;
  nn::AdamState<float> adam_;
  std::vector<FeatureSet> train_;
  std::vector<MCARSplit> validation_;
  std::vector<HistoryEntry> history_;
  int epoch_ = 0;
  double initial_val_ = 0.0;
  double best_val_ = 0.0;
  int best_epoch_ = 0;
  int stale_ = 0;
  bool have_initial_ = false;
  std::optional<HallucinatorModel<float>> best_;
};

// Convenience wrapper: Trainer(...).run().
TrainResult train(const HallucinatorConfig& model_config, const TrainConfig& config,
                  const std::vector<FeatureSet>& train_sets, const std::vector<FeatureSet>& validation_sets);

}  // namespace phonhal
