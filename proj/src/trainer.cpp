#include "phonhal/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace phonhal {

namespace {

constexpr uint64_t kValidationStream = 0x76616c69ULL;
constexpr uint64_t kEpochStream = 0x65706f63ULL;
constexpr uint64_t kStepStream = 0x73746570ULL;

FeatureSet normalized(const FeatureSet& s) { return FeatureSet{normalize(s.features), s.speaker_tag}; }

std::string describe(const FeatureSet& s, size_t index) {
  return s.speaker_tag ? "set " + std::to_string(index) + " (" + *s.speaker_tag + ")" : "set " + std::to_string(index);
}

}  // namespace

MCARSplit mcar_split(const FeatureSet& x, size_t n, Rng& rng) {
  if (x.cardinality() != n) {
    throw Error(ErrorCode::invalid_argument,
                "mcar_split needs a set of cardinality " + std::to_string(n) + ", got " + std::to_string(x.cardinality()));
  }
  const auto n_missing = static_cast<size_t>(rng.uniform_int(1, n));
  auto chosen = sample_without_replacement(n, n_missing, rng);
  std::sort(chosen.begin(), chosen.end());

  MCARSplit split;
  split.full = x;
  split.missing_indices = chosen;
  split.missing.speaker_tag = x.speaker_tag;
  split.missing.features = FeatureMatrix(x.dim(), 0);
  split.masked = MaskedSet(x.dim(), n);
  size_t next = 0;
  for (size_t i = 0; i < n; ++i) {
    if (next < chosen.size() && chosen[next] == i) {
      split.missing.features.append(x.features.row(i));
      split.masked.set_missing(i);
      ++next;
    } else {
      split.masked.set_observed(i, x.features.row(i));
    }
  }
  return split;
}

std::vector<FeatureSet> trainable_sets(const std::vector<FeatureSet>& corpus, size_t min_cardinality) {
  std::vector<FeatureSet> out;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].cardinality() < min_cardinality) {
      warn("skipping " + describe(corpus[i], i) + ": " + std::to_string(corpus[i].cardinality()) + " elements < " +
           std::to_string(min_cardinality));
      continue;
    }
    out.push_back(corpus[i]);
  }
  return out;
}

std::vector<MCARSplit> make_batch(const std::vector<FeatureSet>& corpus, Rng& rng, size_t batch_size, size_t n) {
  const auto usable = trainable_sets(corpus, n);
  if (usable.empty()) throw Error(ErrorCode::invalid_argument, "no trainable utterances");
  std::vector<MCARSplit> batch;
  batch.reserve(batch_size);
  for (size_t b = 0; b < batch_size; ++b) {
    const auto& source = usable[static_cast<size_t>(rng.uniform_int(0, usable.size() - 1))];
    batch.push_back(mcar_split(subsample_set(source, n, rng), n, rng));
  }
  return batch;
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryEntry>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write loss history to " + path.string());
  out << "epoch,train_elbo,val_elbo,recon,kl_z,kl_theta\n";
  out << std::setprecision(9);
  for (const auto& h : history) {
    out << h.epoch << ',' << h.train_elbo << ',' << h.val_elbo << ',' << h.recon << ',' << h.kl_z << ','
        << h.kl_theta << '\n';
  }
}

Trainer::Trainer(const HallucinatorConfig& model_config, const TrainConfig& config,
                 const std::vector<FeatureSet>& train, const std::vector<FeatureSet>& validation)
    : config_(config), model_(model_config, Rng::derive(config.seed, 0)) {
  adam_.lr = config_.lr;
  for (const auto& s : train) train_.push_back(normalized(s));
  for (const auto& s : validation) validation_.push_back(MCARSplit{normalized(s), {}, {}, {}});
  init();
}

Trainer::Trainer(const Checkpoint& resume, const TrainConfig& config, const std::vector<FeatureSet>& train,
                 const std::vector<FeatureSet>& validation)
    : config_(config), model_(model_from(resume)) {
  if (resume.adam) adam_ = *resume.adam;
  adam_.lr = config_.lr;
  const auto& st = resume.train_state;
  if (!st.is_null()) {
    try {
      const auto seed = st.at("seed").get<uint64_t>();
      if (seed != config_.seed) warn("resuming with the checkpoint's seed " + std::to_string(seed));
      config_.seed = seed;
      epoch_ = st.at("epoch").get<int>();
      initial_val_ = st.at("initial_val_elbo").get<double>();
      best_val_ = st.at("best_val_elbo").get<double>();
      best_epoch_ = st.at("best_epoch").get<int>();
      stale_ = st.at("stale").get<int>();
      have_initial_ = true;
      for (const auto& row : st.at("history")) {
        history_.push_back(HistoryEntry{row.at(0).get<int>(), row.at(1).get<double>(), row.at(2).get<double>(),
                                        row.at(3).get<double>(), row.at(4).get<double>(), row.at(5).get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::corrupt, std::string("bad trainer state in checkpoint: ") + e.what());
    }
  }
  for (const auto& s : train) train_.push_back(normalized(s));
  for (const auto& s : validation) validation_.push_back(MCARSplit{normalized(s), {}, {}, {}});
  init();
  if (have_initial_ && config_.checkpoint && std::filesystem::exists(*config_.checkpoint)) {
    best_ = load_checkpoint(*config_.checkpoint);
  }
}

void Trainer::init() {
  const size_t n = model_.config().train_set_cardinality;
  if (model_.config().feature_dim == 0) throw Error(ErrorCode::config, "model has no feature dim");
  const size_t min_card = std::max(config_.min_utterance_cardinality, n);
  train_ = trainable_sets(train_, min_card);
  if (train_.empty()) throw Error(ErrorCode::invalid_argument, "no trainable utterances");
  for (const auto& s : train_) {
    if (s.dim() != model_.config().feature_dim) {
      throw Error(ErrorCode::invalid_argument, "training set dim " + std::to_string(s.dim()) + " does not match model dim " +
                                                   std::to_string(model_.config().feature_dim));
    }
  }

  std::vector<FeatureSet> pool;
  for (auto& v : validation_) pool.push_back(std::move(v.full));
  validation_.clear();
  pool = trainable_sets(pool, n);
  if (pool.empty()) {
    warn("no usable validation sets; validating on training sets");
    pool = train_;
  }
  const size_t count = config_.validation_splits ? config_.validation_splits : pool.size();
  Rng rng(Rng::derive(config_.seed, kValidationStream));
  for (size_t i = 0; i < count; ++i) {
    validation_.push_back(mcar_split(subsample_set(pool[i % pool.size()], n, rng), n, rng));
  }
}

double Trainer::step(const std::vector<MCARSplit>& batch) {
  if (batch.empty()) throw Error(ErrorCode::invalid_argument, "empty batch");
  auto& params = model_.params();
  params.zero_grad();
  const uint64_t step_seed = Rng::derive(Rng::derive(config_.seed, kStepStream), adam_.step);
  const float weight = -1.0f / static_cast<float>(batch.size());
  double total = 0.0;
  for (size_t j = 0; j < batch.size(); ++j) {
    Rng rng(Rng::derive(step_seed, j));
    nn::Tape<float> tape;
    nn::Context<float> ctx{tape, params};
    auto e = elbo(ctx, model_, batch[j].missing.features, batch[j].masked, rng);
    const double value = e.total.item();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite ELBO at step " << adam_.step << " sample " << j << " (recon " << e.recon.item() << ", kl_z "
          << e.kl_z.item() << ", kl_theta " << e.kl_theta.item() << ")";
      if (config_.checkpoint) msg << "; last good state in " << config_.checkpoint->string() << ".last";
      throw Error(ErrorCode::numeric, msg.str());
    }
    total += value;
    tape.backward(nn::scale(e.total, weight));
    tape.accumulate_param_grads(params);
  }
  if (config_.clip_norm > 0.0) nn::clip_grad_norm(params, config_.clip_norm);
  nn::adam_step(params, adam_);
  ++model_.trained_steps;
  return total / static_cast<double>(batch.size());
}

double Trainer::run_epoch() {
  const size_t n = model_.config().train_set_cardinality;
  Rng rng(Rng::derive(Rng::derive(config_.seed, kEpochStream), static_cast<uint64_t>(epoch_)));
  std::vector<size_t> order(train_.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);

  double sum = 0.0;
  size_t steps = 0;
  for (size_t start = 0; start < order.size(); start += config_.batch_size) {
    const size_t end = std::min(order.size(), start + config_.batch_size);
    std::vector<MCARSplit> batch;
    for (size_t i = start; i < end; ++i) batch.push_back(mcar_split(subsample_set(train_[order[i]], n, rng), n, rng));
    sum += step(batch);
    ++steps;
  }
  ++epoch_;
  return sum / static_cast<double>(steps);
}

ElboBreakdown Trainer::validate() const {
  ElboBreakdown mean;
  for (size_t i = 0; i < validation_.size(); ++i) {
    Rng rng(Rng::derive(Rng::derive(config_.seed, kValidationStream + 1), i));
    const auto e = evaluate_elbo(model_, validation_[i].missing.features, validation_[i].masked, rng);
    mean.recon += e.recon;
    mean.kl_z += e.kl_z;
    mean.kl_theta += e.kl_theta;
    mean.total += e.total;
  }
  const double k = static_cast<double>(validation_.size());
  mean.recon /= k;
  mean.kl_z /= k;
  mean.kl_theta /= k;
  mean.total /= k;
  return mean;
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.config = model_.config();
  for (size_t i = 0; i < model_.params().size(); ++i) c.params.add(model_.params()[i].name, model_.params()[i].value);
  c.trained_steps = model_.trained_steps;
  c.adam = adam_;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& h : history_) rows.push_back({h.epoch, h.train_elbo, h.val_elbo, h.recon, h.kl_z, h.kl_theta});
  c.train_state = {{"seed", config_.seed},
                   {"epoch", epoch_},
                   {"initial_val_elbo", initial_val_},
                   {"best_val_elbo", best_val_},
                   {"best_epoch", best_epoch_},
                   {"stale", stale_},
                   {"history", rows}};
  return c;
}

TrainResult Trainer::run() {
  const auto started = std::chrono::steady_clock::now();
  if (!have_initial_) {
    initial_val_ = validate().total;
    best_val_ = initial_val_;
    best_epoch_ = 0;
    have_initial_ = true;
    if (config_.verbose) std::cerr << "epoch 0 val_elbo " << initial_val_ << '\n';
  }
  if (!best_) best_ = model_;

  bool stopped_early = false;
  while (epoch_ < config_.epochs) {
    const double train_elbo = run_epoch();
    if (!std::isfinite(train_elbo)) throw Error(ErrorCode::numeric, "non-finite training ELBO");
    const bool last = epoch_ == config_.epochs;
    if (epoch_ % std::max(1, config_.validate_every) == 0 || last) {
      const auto v = validate();
      history_.push_back(HistoryEntry{epoch_, train_elbo, v.total, v.recon, v.kl_z, v.kl_theta});
      if (config_.verbose) {
        std::cerr << "epoch " << epoch_ << " train_elbo " << train_elbo << " val_elbo " << v.total << " (recon "
                  << v.recon << ", kl_z " << v.kl_z << ", kl_theta " << v.kl_theta << ")\n";
      }
      if (v.total > best_val_) {
        best_val_ = v.total;
        best_epoch_ = epoch_;
        stale_ = 0;
        best_ = model_;
        if (config_.checkpoint) save_checkpoint(model_, *config_.checkpoint);
      } else {
        ++stale_;
      }
      if (config_.history) write_history(*config_.history, history_);
    }
    if (config_.checkpoint) write_checkpoint(config_.checkpoint->string() + ".last", snapshot());
    if (config_.patience > 0 && stale_ >= config_.patience) {
      stopped_early = true;
      break;
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (config_.max_seconds > 0.0 && elapsed > config_.max_seconds) {
      if (config_.verbose) std::cerr << "time budget reached after epoch " << epoch_ << '\n';
      stopped_early = true;
      break;
    }
  }
  if (config_.checkpoint && !std::filesystem::exists(*config_.checkpoint)) save_checkpoint(*best_, *config_.checkpoint);
  return TrainResult{*best_, history_, initial_val_, best_val_, best_epoch_, stopped_early};
}

TrainResult train(const HallucinatorConfig& model_config, const TrainConfig& config,
                  const std::vector<FeatureSet>& train_sets, const std::vector<FeatureSet>& validation_sets) {
  return Trainer(model_config, config, train_sets, validation_sets).run();
}

}  // namespace phonhal
