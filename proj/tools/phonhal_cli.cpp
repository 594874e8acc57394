// Batch front end over the C API. Results go to files, diagnostics to stderr.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "phonhal/phonhal.h"

namespace {

struct Features {
  phh_features* p = nullptr;
  ~Features() { phh_features_free(p); }
};

struct Model {
  phh_model* p = nullptr;
  ~Model() { phh_model_free(p); }
};

int report(phh_status s) {
  if (s == PHH_OK) return 0;
  std::fprintf(stderr, "error (%s): %s\n", phh_status_name(s), phh_last_error());
  return 1;
}

int fail(const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  return 1;
}

bool parent_exists(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  return parent.empty() || std::filesystem::is_directory(parent);
}

phh_preset preset_of(const std::string& name) {
  if (name == "paper") return PHH_PRESET_PAPER;
  if (name == "toy") return PHH_PRESET_TOY;
  return PHH_PRESET_DESK;
}

struct TrainArgs {
  std::string preset = "desk";
  bool no_peq = false, no_cat = false, no_mod = false, conditional_z = false;
  int epochs = 0;
  size_t batch_size = 0;
  double lr = 0.0;
  int patience = -1;
  double max_seconds = -1.0;
  size_t validation_splits = 0;
  bool verbose = false;
};

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--preset", a.preset, "Model size: paper, desk, toy")->check(CLI::IsMember({"paper", "desk", "toy"}));
  cmd->add_option("--epochs", a.epochs, "Training epochs");
  cmd->add_option("--batch-size", a.batch_size, "Sets per Adam step");
  cmd->add_option("--lr", a.lr, "Adam learning rate");
  cmd->add_option("--patience", a.patience, "Validations without improvement before stopping (0 = never)");
  cmd->add_option("--max-seconds", a.max_seconds, "Wall-clock limit for training (0 = none)");
  cmd->add_option("--validation-splits", a.validation_splits, "Masked splits per validation set");
  cmd->add_flag("--no-peq", a.no_peq, "Disable the per-slot embedding");
  cmd->add_flag("--no-cat", a.no_cat, "Do not concatenate theta and g to the MLP inputs");
  cmd->add_flag("--no-mod", a.no_mod, "Disable the modulation gates");
  cmd->add_flag("--conditional-z-prior", a.conditional_z, "Learned Gaussian prior over z");
  cmd->add_flag("-v,--verbose", a.verbose, "Per-epoch progress on stderr");
}

void apply(const TrainArgs& a, phh_train_options& o) {
  o.model.preset = preset_of(a.preset);
  o.model.peq = !a.no_peq;
  o.model.cat = !a.no_cat;
  o.model.mod = !a.no_mod;
  o.model.conditional_z_prior = a.conditional_z;
  if (a.epochs > 0) o.epochs = a.epochs;
  if (a.batch_size > 0) o.batch_size = a.batch_size;
  if (a.lr > 0.0) o.lr = a.lr;
  if (a.patience >= 0) o.patience = a.patience;
  if (a.max_seconds >= 0.0) o.max_seconds = a.max_seconds;
  if (a.validation_splits > 0) o.validation_splits = a.validation_splits;
  o.verbose = a.verbose;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phoneme hallucinator and kNN voice conversion"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(phh_version()));
  uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random draw")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-speaker corpus");
  phh_synth_options so;
  phh_synth_options_init(&so);
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", seed, "Seed");
  synth->add_option("--phonemes", so.phonemes, "Phoneme clusters")->capture_default_str();
  synth->add_option("--dim", so.dim, "Feature dimension")->capture_default_str();
  synth->add_option("--train-speakers", so.train_speakers)->capture_default_str();
  synth->add_option("--heldout-speakers", so.heldout_speakers)->capture_default_str();
  synth->add_option("--frames", so.frames_per_utterance, "Frames per utterance")->capture_default_str();
  synth->add_option("--utterances", so.utterances_per_speaker, "Utterances per speaker")->capture_default_str();
  synth->add_option("--sigma", so.sigma, "Within-cluster noise (unit space)")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train the hallucinator on a directory of FSF files");
  std::string data_dir, ckpt_out, history, resume;
  TrainArgs ta;
  train->add_option("--data", data_dir, "Corpus directory")->required();
  train->add_option("--checkpoint", ckpt_out, "Best-model checkpoint path")->required();
  train->add_option("--history", history, "Loss history CSV");
  train->add_option("--resume", resume, "Resume from a checkpoint's .last state");
  train->add_option("--seed", seed, "Seed");
  add_train_flags(train, ta);

  // hallucinate
  auto* hal = app.add_subcommand("hallucinate", "Sample new vectors for a target set");
  std::string model_path, target_path, out_path;
  uint64_t count = 0;
  unsigned threads = 0;
  hal->add_option("--model", model_path, "Checkpoint")->required();
  hal->add_option("--target", target_path, "Target FSF")->required();
  hal->add_option("--count", count, "Vectors to sample")->required();
  hal->add_option("--out", out_path, "Output FSF")->required();
  hal->add_option("--threads", threads, "Worker threads (0 = auto)");
  hal->add_option("--seed", seed, "Seed");

  // convert
  auto* conv = app.add_subcommand("convert", "Expand the target and convert a source sequence");
  std::string source_path;
  size_t k = 4;
  conv->add_option("--source", source_path, "Source FSF")->required();
  conv->add_option("--target", target_path, "Target FSF")->required();
  conv->add_option("--out", out_path, "Output FSF")->required();
  conv->add_option("--model", model_path, "Checkpoint (needed when --count > 0)");
  conv->add_option("--count", count, "Hallucinations added to the target")->capture_default_str();
  conv->add_option("--k", k, "Neighbors averaged")->capture_default_str()->check(CLI::PositiveNumber);
  conv->add_option("--threads", threads, "Worker threads (0 = auto)");
  conv->add_option("--seed", seed, "Seed");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a model on a synthetic corpus");
  std::string corpus_dir;
  std::vector<uint64_t> counts{0, 500, 1000, 2000, 5000};
  size_t observed = 100;
  eval->add_option("--corpus", corpus_dir, "Synthetic corpus directory")->required();
  eval->add_option("--model", model_path, "Checkpoint (omit for ground-truth rows only)");
  eval->add_option("--out", out_path, "Results CSV")->required();
  eval->add_option("--counts", counts, "Hallucination counts")->delimiter(',');
  eval->add_option("--observed", observed, "Observed target frames")->capture_default_str();
  eval->add_option("--k", k, "Neighbors averaged")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "Seed");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and score the six ablation variants");
  std::string work_dir;
  std::vector<int> variants;
  std::vector<uint64_t> ablate_counts{2000};
  TrainArgs aa;
  ablate->add_option("--corpus", corpus_dir, "Synthetic corpus directory")->required();
  ablate->add_option("--out", out_path, "Results CSV")->required();
  ablate->add_option("--work-dir", work_dir, "Per-variant checkpoints and histories");
  ablate->add_option("--variants", variants, "Variant numbers 1-6 (default all)")->delimiter(',')->check(CLI::Range(1, 6));
  ablate->add_option("--counts", ablate_counts, "Hallucination counts")->delimiter(',');
  ablate->add_option("--observed", observed, "Observed target frames")->capture_default_str();
  ablate->add_option("--k", k, "Neighbors averaged")->capture_default_str()->check(CLI::PositiveNumber);
  ablate->add_option("--seed", seed, "Seed");
  add_train_flags(ablate, aa);

  // project
  auto* proj = app.add_subcommand("project", "2-D PCA projection of feature files");
  std::vector<std::string> inputs, labels;
  proj->add_option("--inputs", inputs, "FSF files")->required()->check(CLI::ExistingFile);
  proj->add_option("--labels", labels, "One label per input (default: file stem)")->delimiter(',');
  proj->add_option("--out", out_path, "Output CSV")->required();
  proj->add_option("--seed", seed, "Seed (unused; the projection is deterministic)");

  CLI11_PARSE(app, argc, argv);

  if (*synth) {
    if (std::filesystem::exists(synth_out) && !std::filesystem::is_directory(synth_out)) {
      return fail("output path exists and is not a directory: " + synth_out);
    }
    if (!parent_exists(synth_out)) return fail("parent of the output directory does not exist: " + synth_out);
    so.seed = seed;
    return report(phh_synth_corpus(&so, synth_out.c_str()));
  }

  if (*train) {
    if (!std::filesystem::is_directory(data_dir)) return fail("not a directory: " + data_dir);
    if (!parent_exists(ckpt_out)) return fail("checkpoint directory does not exist: " + ckpt_out);
    if (!history.empty() && !parent_exists(history)) return fail("history directory does not exist: " + history);
    phh_train_options o;
    phh_train_options_init(&o);
    apply(ta, o);
    o.data_dir = data_dir.c_str();
    o.checkpoint = ckpt_out.c_str();
    o.history = history.empty() ? nullptr : history.c_str();
    o.resume = resume.empty() ? nullptr : resume.c_str();
    o.seed = seed;
    o.model.seed = seed;
    phh_train_summary s{};
    if (int rc = report(phh_train(&o, &s))) return rc;
    std::fprintf(stderr, "trained %d epochs, %llu steps; val ELBO %.4f -> best %.4f (epoch %d)\n", s.epochs,
                 static_cast<unsigned long long>(s.steps), s.initial_val_elbo, s.best_val_elbo, s.best_epoch);
    return 0;
  }

  if (*hal) {
    if (!parent_exists(out_path)) return fail("output directory does not exist: " + out_path);
    Model m;
    Features t, r;
    if (int rc = report(phh_model_load(model_path.c_str(), &m.p))) return rc;
    if (int rc = report(phh_features_read(target_path.c_str(), &t.p))) return rc;
    phh_hallucinate_options o{seed, threads};
    if (int rc = report(phh_hallucinate(m.p, t.p, count, &o, &r.p))) return rc;
    return report(phh_features_write(r.p, out_path.c_str()));
  }

  if (*conv) {
    if (!parent_exists(out_path)) return fail("output directory does not exist: " + out_path);
    if (count > 0 && model_path.empty()) return fail("--model is required when --count > 0");
    Model m;
    Features s, t, r;
    if (!model_path.empty()) {
      if (int rc = report(phh_model_load(model_path.c_str(), &m.p))) return rc;
    }
    if (int rc = report(phh_features_read(source_path.c_str(), &s.p))) return rc;
    if (int rc = report(phh_features_read(target_path.c_str(), &t.p))) return rc;
    phh_convert_options o{k, count, seed, threads};
    if (int rc = report(phh_convert(m.p, s.p, t.p, &o, &r.p))) return rc;
    return report(phh_features_write(r.p, out_path.c_str()));
  }

  if (*eval) {
    if (!parent_exists(out_path)) return fail("output directory does not exist: " + out_path);
    phh_eval_options o;
    phh_eval_options_init(&o);
    o.corpus_dir = corpus_dir.c_str();
    o.checkpoint = model_path.empty() ? nullptr : model_path.c_str();
    o.out_csv = out_path.c_str();
    o.counts = counts.data();
    o.n_counts = counts.size();
    o.observed = observed;
    o.k = k;
    o.seed = seed;
    return report(phh_eval(&o));
  }

  if (*ablate) {
    if (!parent_exists(out_path)) return fail("output directory does not exist: " + out_path);
    phh_ablate_options o;
    phh_ablate_options_init(&o);
    apply(aa, o.train);
    o.train.seed = seed;
    o.train.model.seed = seed;
    o.corpus_dir = corpus_dir.c_str();
    o.out_csv = out_path.c_str();
    o.work_dir = work_dir.empty() ? nullptr : work_dir.c_str();
    o.counts = ablate_counts.data();
    o.n_counts = ablate_counts.size();
    for (int v : variants) o.variants |= 1u << (v - 1);
    o.observed = observed;
    o.k = k;
    return report(phh_ablate(&o));
  }

  if (*proj) {
    if (!labels.empty() && labels.size() != inputs.size()) return fail("--labels must match --inputs one to one");
    if (!parent_exists(out_path)) return fail("output directory does not exist: " + out_path);
    std::vector<const char*> p, l;
    for (const auto& s : inputs) p.push_back(s.c_str());
    for (const auto& s : labels) l.push_back(s.c_str());
    uint64_t rows = 0;
    if (int rc = report(phh_project(p.data(), l.empty() ? nullptr : l.data(), p.size(), out_path.c_str(), &rows))) {
      return rc;
    }
    std::fprintf(stderr, "%llu rows\n", static_cast<unsigned long long>(rows));
    return 0;
  }
  return 0;
}
