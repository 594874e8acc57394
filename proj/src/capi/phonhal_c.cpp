#include "phonhal/phonhal.h"

#include <algorithm>
#include <cstring>
#include <new>
#include <string>

#include "phonhal/checkpoint.hpp"
#include "phonhal/knn_conversion.hpp"
#include "phonhal/synth_bench.hpp"
#include "phonhal/trainer.hpp"

struct phh_features {
  phonhal::FeatureCollection collection;
  std::string speaker;  // cached for phh_features_speaker
};

struct phh_model {
  phonhal::HallucinatorModel<float> model;
};

namespace {

using namespace phonhal;

thread_local std::string g_last_error;
phh_warning_fn g_warning_fn = nullptr;

phh_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return PHH_ERR_INVALID_ARGUMENT;
    case ErrorCode::io: return PHH_ERR_IO;
    case ErrorCode::bad_magic: return PHH_ERR_BAD_MAGIC;
    case ErrorCode::unsupported_version: return PHH_ERR_UNSUPPORTED_VERSION;
    case ErrorCode::truncated: return PHH_ERR_TRUNCATED;
    case ErrorCode::non_finite: return PHH_ERR_NON_FINITE;
    case ErrorCode::config: return PHH_ERR_CONFIG;
    case ErrorCode::corrupt: return PHH_ERR_CORRUPT;
    case ErrorCode::numeric: return PHH_ERR_NUMERIC;
  }
  return PHH_ERR_INTERNAL;
}

template <typename F>
phh_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return PHH_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PHH_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PHH_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::invalid_argument, what);
}

const FeatureMatrix& matrix(const phh_features* f) { return matrix_of(f->collection); }

FeatureSet as_set(const phh_features* f) {
  if (const auto* s = std::get_if<FeatureSet>(&f->collection)) return *s;
  FeatureSet out{std::get<FeatureSequence>(f->collection).frames, std::nullopt};
  if (!f->speaker.empty()) out.speaker_tag = f->speaker;
  return out;
}

phh_features* wrap(FeatureCollection c) {
  auto* out = new phh_features{std::move(c), {}};
  if (const auto* s = std::get_if<FeatureSet>(&out->collection); s && s->speaker_tag) out->speaker = *s->speaker_tag;
  return out;
}

HallucinatorConfig model_config(const phh_model_options& o) {
  HallucinatorConfig c;
  switch (o.preset) {
    case PHH_PRESET_PAPER: c = HallucinatorConfig::paper(o.feature_dim); break;
    case PHH_PRESET_DESK: c = HallucinatorConfig::desk(o.feature_dim); break;
    case PHH_PRESET_TOY: c = HallucinatorConfig::toy(o.feature_dim); break;
    default: throw Error(ErrorCode::config, "unknown preset");
  }
  c.flags = AblationFlags{o.peq != 0, o.cat != 0, o.mod != 0};
  c.z_prior = o.conditional_z_prior ? ZPrior::conditional : ZPrior::standard_normal;
  c.validate();
  return c;
}

TrainConfig train_config(const phh_train_options& o) {
  TrainConfig t;
  t.epochs = o.epochs;
  t.batch_size = o.batch_size;
  t.lr = o.lr;
  t.seed = o.seed;
  t.patience = o.patience;
  t.max_seconds = o.max_seconds;
  t.validation_splits = o.validation_splits;
  t.verbose = o.verbose != 0;
  if (o.checkpoint) t.checkpoint = o.checkpoint;
  if (o.history) t.history = o.history;
  require(t.epochs >= 1, "epochs must be at least 1");
  require(t.batch_size >= 1, "batch size must be at least 1");
  require(t.lr > 0.0, "learning rate must be positive");
  return t;
}

std::vector<size_t> to_counts(const uint64_t* counts, size_t n) {
  require(n == 0 || counts != nullptr, "counts is NULL");
  return std::vector<size_t>(counts, counts + n);
}

struct TrainingData {
  std::vector<FeatureSet> train, validation;
  uint32_t dim = 0;
};

// A synthetic corpus keeps its own split; any other directory of FSF files is
// split 90/10 by seeded shuffle.
TrainingData load_training_data(const std::filesystem::path& dir, uint64_t seed) {
  TrainingData data;
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::io, "not a directory: " + dir.string());
  if (std::filesystem::exists(dir / "corpus.json")) {
    const auto corpus = synth::read_corpus(dir);
    data.train = corpus.sets(corpus.train);
    data.validation = corpus.sets(corpus.validation);
    data.dim = corpus.codebook.dim();
    return data;
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".fsf") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::invalid_argument, "no .fsf files under " + dir.string());
  std::vector<FeatureSet> sets;
  for (const auto& f : files) {
    auto c = read_feature_file(f);
    FeatureSet s{matrix_of(c), std::nullopt};
    if (const auto* fs = std::get_if<FeatureSet>(&c)) s.speaker_tag = fs->speaker_tag;
    if (!s.speaker_tag) {
      if (auto m = read_manifest(f); m && m->speaker_tag) s.speaker_tag = m->speaker_tag;
    }
    if (data.dim == 0) data.dim = s.dim();
    if (s.dim() != data.dim) throw Error(ErrorCode::invalid_argument, "mixed feature dims under " + dir.string());
    sets.push_back(std::move(s));
  }
  Rng rng(Rng::derive(seed, 0x73706c74ULL));
  std::vector<size_t> order(sets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
  const size_t n_val = sets.size() >= 10 ? sets.size() / 10 : 0;
  for (size_t i = 0; i < order.size(); ++i) (i < n_val ? data.validation : data.train).push_back(sets[order[i]]);
  return data;
}

void forward_warning(const std::string& message) {
  if (g_warning_fn) g_warning_fn(message.c_str());
}

}  // namespace

extern "C" {

const char* phh_last_error(void) { return g_last_error.c_str(); }

const char* phh_status_name(phh_status status) {
  switch (status) {
    case PHH_OK: return "ok";
    case PHH_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case PHH_ERR_IO: return "io";
    case PHH_ERR_BAD_MAGIC: return "bad_magic";
    case PHH_ERR_UNSUPPORTED_VERSION: return "unsupported_version";
    case PHH_ERR_TRUNCATED: return "truncated";
    case PHH_ERR_NON_FINITE: return "non_finite";
    case PHH_ERR_CONFIG: return "config";
    case PHH_ERR_CORRUPT: return "corrupt";
    case PHH_ERR_NUMERIC: return "numeric";
    case PHH_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* phh_version(void) { return "0.1.0"; }

void phh_set_warning_callback(phh_warning_fn fn) {
  g_warning_fn = fn;
  set_warning_sink(fn ? &forward_warning : nullptr);
}

phh_status phh_features_create(phh_kind kind, uint32_t dim, uint64_t count, const float* values, phh_features** out) {
  return guarded([&] {
    require(out != nullptr, "out is NULL");
    require(dim > 0, "dim must be positive");
    require(count == 0 || values != nullptr, "values is NULL");
    std::vector<float> v(values, values + static_cast<size_t>(count) * dim);
    FeatureMatrix m(dim, std::move(v));
    if (kind == PHH_KIND_SET) {
      *out = wrap(FeatureSet{std::move(m), std::nullopt});
    } else if (kind == PHH_KIND_SEQUENCE) {
      *out = wrap(FeatureSequence{std::move(m)});
    } else {
      throw Error(ErrorCode::invalid_argument, "unknown kind");
    }
  });
}

phh_status phh_features_read(const char* path, phh_features** out) {
  return guarded([&] {
    require(path && out, "NULL argument");
    *out = wrap(read_feature_file(path));
    if (std::holds_alternative<FeatureSequence>((*out)->collection)) {
      if (auto m = read_manifest(path); m && m->speaker_tag) (*out)->speaker = *m->speaker_tag;
    }
  });
}

phh_status phh_features_write(const phh_features* features, const char* path) {
  return guarded([&] {
    require(features && path, "NULL argument");
    std::optional<Manifest> manifest;
    if (!features->speaker.empty()) manifest = Manifest{features->speaker, std::nullopt, std::nullopt};
    write_feature_file(path, features->collection, manifest);
  });
}

void phh_features_free(phh_features* features) { delete features; }

phh_kind phh_features_kind(const phh_features* f) {
  return std::holds_alternative<FeatureSet>(f->collection) ? PHH_KIND_SET : PHH_KIND_SEQUENCE;
}
uint32_t phh_features_dim(const phh_features* f) { return matrix(f).dim(); }
uint64_t phh_features_count(const phh_features* f) { return matrix(f).count(); }
const float* phh_features_data(const phh_features* f) { return matrix(f).values().data(); }
const char* phh_features_speaker(const phh_features* f) { return f->speaker.empty() ? nullptr : f->speaker.c_str(); }

phh_status phh_features_set_speaker(phh_features* f, const char* speaker) {
  return guarded([&] {
    require(f != nullptr, "features is NULL");
    f->speaker = speaker ? speaker : "";
    if (auto* s = std::get_if<FeatureSet>(&f->collection)) {
      s->speaker_tag = f->speaker.empty() ? std::nullopt : std::optional<std::string>(f->speaker);
    }
  });
}

void phh_model_options_init(phh_model_options* o) {
  if (!o) return;
  *o = phh_model_options{};
  o->preset = PHH_PRESET_DESK;
  o->feature_dim = 1024;
  o->peq = o->cat = o->mod = 1;
  o->conditional_z_prior = 0;
  o->seed = 0;
}

phh_status phh_model_create(const phh_model_options* options, phh_model** out) {
  return guarded([&] {
    require(options && out, "NULL argument");
    *out = new phh_model{HallucinatorModel<float>(model_config(*options), options->seed)};
  });
}

phh_status phh_model_load(const char* path, phh_model** out) {
  return guarded([&] {
    require(path && out, "NULL argument");
    *out = new phh_model{load_checkpoint(path)};
  });
}

phh_status phh_model_save(const phh_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "NULL argument");
    save_checkpoint(model->model, path);
  });
}

void phh_model_free(phh_model* model) { delete model; }
uint32_t phh_model_feature_dim(const phh_model* m) { return m->model.config().feature_dim; }
uint64_t phh_model_trained_steps(const phh_model* m) { return m->model.trained_steps; }
uint64_t phh_model_parameter_count(const phh_model* m) { return m->model.params().scalar_count(); }

void phh_hallucinate_options_init(phh_hallucinate_options* o) {
  if (o) *o = phh_hallucinate_options{0, 0};
}

phh_status phh_hallucinate(const phh_model* model, const phh_features* target, uint64_t count,
                           const phh_hallucinate_options* options, phh_features** out) {
  return guarded([&] {
    require(model && target && out, "NULL argument");
    phh_hallucinate_options o;
    phh_hallucinate_options_init(&o);
    if (options) o = *options;
    const FeatureSet raw = as_set(target);
    const FeatureSet unit{normalize(raw.features), raw.speaker_tag};
    FeatureSet result = hallucinate(model->model, unit, static_cast<size_t>(count), HallucinateOptions{o.seed, o.threads});
    result.features = denormalize(result.features);
    *out = wrap(std::move(result));
  });
}

void phh_convert_options_init(phh_convert_options* o) {
  if (o) *o = phh_convert_options{4, 0, 0, 0};
}

phh_status phh_convert(const phh_model* model, const phh_features* source, const phh_features* target,
                       const phh_convert_options* options, phh_features** out) {
  return guarded([&] {
    require(source && target && out, "NULL argument");
    phh_convert_options o;
    phh_convert_options_init(&o);
    if (options) o = *options;
    require(o.count == 0 || model != nullptr, "a model is required when count > 0");
    const FeatureSet t = as_set(target);
    const FeatureSequence s{matrix(source)};
    if (s.length() > 0 && s.dim() != t.dim()) {
      throw Error(ErrorCode::invalid_argument, "source dim " + std::to_string(s.dim()) + " does not match target dim " +
                                                   std::to_string(t.dim()));
    }
    const FeatureSet expanded =
        o.count ? expand_target(t, model->model, static_cast<size_t>(o.count), HallucinateOptions{o.seed, o.threads}) : t;
    *out = wrap(convert_sequence(s, expanded, KnnConfig{o.k, o.threads}));
  });
}

void phh_synth_options_init(phh_synth_options* o) {
  if (!o) return;
  const synth::CorpusParams d;
  *o = phh_synth_options{d.seed,
                         static_cast<uint32_t>(d.phonemes),
                         d.dim,
                         static_cast<uint32_t>(d.train_speakers),
                         static_cast<uint32_t>(d.heldout_speakers),
                         d.frames_per_utterance,
                         static_cast<uint32_t>(d.utterances_per_speaker),
                         d.sigma};
}

phh_status phh_synth_corpus(const phh_synth_options* options, const char* out_dir) {
  return guarded([&] {
    require(options && out_dir, "NULL argument");
    synth::CorpusParams p;
    p.seed = options->seed;
    p.phonemes = options->phonemes;
    p.dim = options->dim;
    p.train_speakers = options->train_speakers;
    p.heldout_speakers = options->heldout_speakers;
    p.frames_per_utterance = options->frames_per_utterance;
    p.utterances_per_speaker = options->utterances_per_speaker;
    p.sigma = options->sigma;
    synth::write_corpus(synth::gen_corpus(p), out_dir);
  });
}

void phh_train_options_init(phh_train_options* o) {
  if (!o) return;
  *o = phh_train_options{};
  phh_model_options_init(&o->model);
  o->model.feature_dim = 0;  // taken from the data
  const TrainConfig d;
  o->epochs = d.epochs;
  o->batch_size = d.batch_size;
  o->lr = d.lr;
  o->seed = d.seed;
  o->patience = d.patience;
  o->max_seconds = d.max_seconds;
  o->validation_splits = d.validation_splits;
}

phh_status phh_train(const phh_train_options* options, phh_train_summary* summary) {
  return guarded([&] {
    require(options && options->data_dir, "data_dir is required");
    const TrainConfig tc = train_config(*options);
    const auto data = load_training_data(options->data_dir, options->seed);
    TrainResult result = [&] {
      if (options->resume) {
        const auto ckpt = read_checkpoint(options->resume);
        if (ckpt.config.feature_dim != data.dim) {
          throw Error(ErrorCode::invalid_argument, "checkpoint dim does not match the training data");
        }
        return Trainer(ckpt, tc, data.train, data.validation).run();
      }
      phh_model_options mo = options->model;
      if (mo.feature_dim == 0) mo.feature_dim = data.dim;
      if (mo.feature_dim != data.dim) throw Error(ErrorCode::invalid_argument, "model dim does not match the data");
      return Trainer(model_config(mo), tc, data.train, data.validation).run();
    }();
    if (summary) {
      *summary = phh_train_summary{result.history.empty() ? 0 : result.history.back().epoch, result.model.trained_steps,
                                   result.initial_val_elbo, result.best_val_elbo, result.best_epoch};
    }
  });
}

void phh_eval_options_init(phh_eval_options* o) {
  if (!o) return;
  const synth::BenchConfig d;
  *o = phh_eval_options{nullptr, nullptr, nullptr, nullptr, 0, d.observed, d.k, d.seed};
}

phh_status phh_eval(const phh_eval_options* options) {
  return guarded([&] {
    require(options && options->corpus_dir && options->out_csv, "corpus_dir and out_csv are required");
    const auto corpus = synth::read_corpus(options->corpus_dir);
    synth::BenchConfig bc;
    bc.observed = options->observed;
    bc.k = options->k;
    bc.seed = options->seed;
    std::vector<synth::BenchRow> rows{synth::ground_truth_row(corpus, bc)};
    if (options->checkpoint) {
      const auto model = load_checkpoint(options->checkpoint);
      auto r = synth::evaluate_model(model, corpus, to_counts(options->counts, options->n_counts), bc, "model");
      rows.insert(rows.end(), r.begin(), r.end());
    }
    synth::write_results(options->out_csv, rows);
  });
}

void phh_ablate_options_init(phh_ablate_options* o) {
  if (!o) return;
  *o = phh_ablate_options{};
  phh_train_options_init(&o->train);
  const synth::BenchConfig d;
  o->observed = d.observed;
  o->k = d.k;
}

phh_status phh_ablate(const phh_ablate_options* options) {
  return guarded([&] {
    require(options && options->corpus_dir && options->out_csv, "corpus_dir and out_csv are required");
    const auto corpus = synth::read_corpus(options->corpus_dir);
    synth::BenchConfig bc;
    phh_model_options mo = options->train.model;
    mo.feature_dim = corpus.codebook.dim();
    mo.peq = mo.cat = mo.mod = 1;
    bc.model = model_config(mo);
    bc.train = train_config(options->train);
    bc.train.checkpoint.reset();
    bc.train.history.reset();
    if (options->work_dir) {
      std::filesystem::create_directories(options->work_dir);
      bc.train.checkpoint = std::filesystem::path(options->work_dir) / "model.phck";
      bc.train.history = std::filesystem::path(options->work_dir) / "history.csv";
    }
    bc.observed = options->observed;
    bc.k = options->k;
    bc.seed = options->train.seed;
    std::vector<synth::Variant> chosen;
    const auto all = synth::ablation_variants();
    for (size_t i = 0; i < all.size(); ++i) {
      if (options->variants == 0 || (options->variants >> i) & 1u) chosen.push_back(all[i]);
    }
    const auto result = synth::run_ablation_suite(corpus, chosen, to_counts(options->counts, options->n_counts), bc);
    synth::write_results(options->out_csv, result.rows);
  });
}

phh_status phh_project(const char* const* paths, const char* const* labels, size_t n, const char* out_csv,
                       uint64_t* rows_written) {
  return guarded([&] {
    require(paths && out_csv && n > 0, "paths and out_csv are required");
    std::vector<synth::LabeledSet> sets;
    for (size_t i = 0; i < n; ++i) {
      require(paths[i] != nullptr, "NULL path");
      const auto c = read_feature_file(paths[i]);
      std::string label = labels && labels[i] ? labels[i] : std::filesystem::path(paths[i]).stem().string();
      sets.push_back(synth::LabeledSet{std::move(label), FeatureSet{matrix_of(c), std::nullopt}});
    }
    for (const auto& s : sets) {
      if (s.set.dim() != sets.front().set.dim()) throw Error(ErrorCode::invalid_argument, "inputs differ in dim");
    }
    const auto proj = synth::export_projection(sets, out_csv);
    if (rows_written) *rows_written = static_cast<uint64_t>(proj.coords.rows());
  });
}

}  // extern "C"
