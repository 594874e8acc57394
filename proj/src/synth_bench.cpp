#include "phonhal/synth_bench.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "phonhal/knn_conversion.hpp"

namespace phonhal::synth {

namespace {

constexpr uint64_t kEvalStream = 0x6576616cULL;

Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

double min_pairwise_distance(const Eigen::MatrixXd& centers) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < centers.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < centers.rows(); ++b) best = std::min(best, (centers.row(a) - centers.row(b)).norm());
  }
  return best;
}

std::string padded(size_t v, int width) {
  std::ostringstream s;
  s << std::setw(width) << std::setfill('0') << v;
  return s.str();
}

// n x P squared distances between rows and the speaker's raw-space centers.
Eigen::MatrixXd center_distances(const FeatureMatrix& frames, const Speaker& speaker, const Codebook& codebook) {
  const auto p = static_cast<Eigen::Index>(codebook.phonemes());
  const auto d = static_cast<Eigen::Index>(codebook.dim());
  Eigen::MatrixXd centers(p, d);
  for (Eigen::Index l = 0; l < p; ++l) centers.row(l) = speaker.center(codebook, static_cast<size_t>(l)).transpose();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(frames.count()), p);
  for (size_t i = 0; i < frames.count(); ++i) {
    const auto row = frames.row(i);
    Eigen::VectorXd x(d);
    for (Eigen::Index j = 0; j < d; ++j) x(j) = row[static_cast<size_t>(j)];
    for (Eigen::Index l = 0; l < p; ++l) out(static_cast<Eigen::Index>(i), l) = (centers.row(l).transpose() - x).squaredNorm();
  }
  return out;
}

Eigen::MatrixXd as_matrix(const FeatureMatrix& m) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(m.count()), static_cast<Eigen::Index>(m.dim()));
  for (size_t i = 0; i < m.count(); ++i) {
    const auto row = m.row(i);
    for (size_t j = 0; j < row.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return out;
}

void check_dim(const FeatureMatrix& m, const Codebook& codebook, const char* what) {
  if (m.count() > 0 && m.dim() != codebook.dim()) {
    throw Error(ErrorCode::invalid_argument, std::string(what) + " dim " + std::to_string(m.dim()) +
                                                 " does not match codebook dim " + std::to_string(codebook.dim()));
  }
}

}  // namespace

nlohmann::json CorpusParams::to_json() const {
  return {{"seed", seed},
          {"phonemes", phonemes},
          {"dim", dim},
          {"train_speakers", train_speakers},
          {"heldout_speakers", heldout_speakers},
          {"frames_per_utterance", frames_per_utterance},
          {"utterances_per_speaker", utterances_per_speaker},
          {"sigma", sigma},
          {"rotation", rotation},
          {"offset_norm", offset_norm},
          {"center_sd", center_sd},
          {"offset_rank", offset_rank},
          {"scale_min", scale_min},
          {"scale_max", scale_max},
          {"stay_probability", stay_probability},
          {"validation_fraction", validation_fraction}};
}

CorpusParams CorpusParams::from_json(const nlohmann::json& j) {
  CorpusParams p;
  p.seed = j.at("seed").get<uint64_t>();
  p.phonemes = j.at("phonemes").get<size_t>();
  p.dim = j.at("dim").get<uint32_t>();
  p.train_speakers = j.at("train_speakers").get<size_t>();
  p.heldout_speakers = j.at("heldout_speakers").get<size_t>();
  p.frames_per_utterance = j.at("frames_per_utterance").get<size_t>();
  p.utterances_per_speaker = j.at("utterances_per_speaker").get<size_t>();
  p.sigma = j.at("sigma").get<double>();
  p.rotation = j.at("rotation").get<double>();
  p.offset_norm = j.at("offset_norm").get<double>();
  p.center_sd = j.at("center_sd").get<double>();
  p.offset_rank = j.at("offset_rank").get<size_t>();
  p.scale_min = j.at("scale_min").get<double>();
  p.scale_max = j.at("scale_max").get<double>();
  p.stay_probability = j.at("stay_probability").get<double>();
  p.validation_fraction = j.at("validation_fraction").get<double>();
  return p;
}

double Speaker::scale() const {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(map);
  return svd.singularValues().mean();
}

Eigen::VectorXd Speaker::center(const Codebook& codebook, size_t label) const {
  return static_cast<double>(kFeatureScale) * (map * codebook.centers.row(static_cast<Eigen::Index>(label)).transpose() + offset);
}

std::vector<FeatureSet> Corpus::sets(const std::vector<size_t>& which) const {
  std::vector<FeatureSet> out;
  out.reserve(which.size());
  for (size_t u : which) out.push_back(FeatureSet{utterances[u].frames.frames, speakers[utterances[u].speaker].id});
  return out;
}

std::vector<size_t> Corpus::utterances_of(size_t speaker) const {
  std::vector<size_t> out;
  for (size_t u = 0; u < utterances.size(); ++u) {
    if (utterances[u].speaker == speaker) out.push_back(u);
  }
  return out;
}

Corpus gen_corpus(const CorpusParams& params) {
  if (params.phonemes < 1 || params.phonemes > 65535) throw Error(ErrorCode::invalid_argument, "phonemes out of range");
  if (params.dim < 1) throw Error(ErrorCode::invalid_argument, "dim must be positive");
  if (params.train_speakers + params.heldout_speakers < 1) throw Error(ErrorCode::invalid_argument, "no speakers");
  if (params.frames_per_utterance < 1 || params.utterances_per_speaker < 1) {
    throw Error(ErrorCode::invalid_argument, "utterances need at least one frame");
  }
  if (!(params.sigma > 0.0)) throw Error(ErrorCode::invalid_argument, "sigma must be positive");
  if (!(params.center_sd > 0.0)) throw Error(ErrorCode::invalid_argument, "center_sd must be positive");
  if (!(params.scale_min > 0.0) || params.scale_max < params.scale_min) {
    throw Error(ErrorCode::invalid_argument, "bad speaker scale range");
  }

  Corpus corpus;
  corpus.params = params;
  Rng rng(params.seed);
  const auto d = static_cast<Eigen::Index>(params.dim);
  const auto p = static_cast<Eigen::Index>(params.phonemes);

  corpus.codebook.sigma = params.sigma;
  bool separated = false;
  for (int attempt = 0; attempt < 100 && !separated; ++attempt) {
    corpus.codebook.centers = gaussian_matrix(p, d, params.center_sd, rng);
    separated = p < 2 || min_pairwise_distance(corpus.codebook.centers) > 6.0 * params.sigma;
  }
  if (!separated) throw Error(ErrorCode::invalid_argument, "could not separate codebook centers after 100 tries");

  // Speaker offsets live in a shared random subspace, so held-out speakers are
  // drawn from the same family the model trains on.
  const Eigen::Index rank =
      params.offset_rank == 0 ? d : std::min<Eigen::Index>(d, static_cast<Eigen::Index>(params.offset_rank));
  const Eigen::MatrixXd basis =
      Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian_matrix(d, rank, 1.0, rng)).householderQ() *
      Eigen::MatrixXd::Identity(d, rank);

  const size_t n_speakers = params.train_speakers + params.heldout_speakers;
  for (size_t s = 0; s < n_speakers; ++s) {
    Speaker spk;
    spk.id = "spk" + padded(s, 2);
    spk.heldout = s >= params.train_speakers;
    const double scale = rng.uniform(params.scale_min, params.scale_max);
    const Eigen::MatrixXd near = Eigen::MatrixXd::Identity(d, d) +
                                 params.rotation * gaussian_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(near, Eigen::ComputeFullU | Eigen::ComputeFullV);
    spk.map = scale * (svd.matrixU() * svd.matrixV().transpose());
    spk.offset = basis * gaussian_matrix(rank, 1, params.offset_norm / std::sqrt(static_cast<double>(rank)), rng);
    corpus.speakers.push_back(std::move(spk));
  }

  const double noise_sd = params.sigma / std::sqrt(static_cast<double>(d));
  for (size_t s = 0; s < n_speakers; ++s) {
    const auto& spk = corpus.speakers[s];
    for (size_t u = 0; u < params.utterances_per_speaker; ++u) {
      Utterance utt;
      utt.speaker = s;
      utt.frames.frames = FeatureMatrix(params.dim, params.frames_per_utterance);
      auto label = static_cast<uint16_t>(rng.uniform_int(0, params.phonemes - 1));
      for (size_t f = 0; f < params.frames_per_utterance; ++f) {
        if (f > 0 && params.phonemes > 1 && rng.uniform() >= params.stay_probability) {
          auto next = static_cast<uint16_t>(rng.uniform_int(0, params.phonemes - 2));
          label = next >= label ? static_cast<uint16_t>(next + 1) : next;
        }
        utt.labels.push_back(label);
        Eigen::VectorXd x = corpus.codebook.centers.row(label).transpose();
        for (Eigen::Index j = 0; j < d; ++j) x(j) += noise_sd * rng.normal();
        const Eigen::VectorXd y = static_cast<double>(kFeatureScale) * (spk.map * x + spk.offset);
        auto row = utt.frames.frames.row(f);
        for (Eigen::Index j = 0; j < d; ++j) row[static_cast<size_t>(j)] = static_cast<float>(y(j));
      }
      corpus.utterances.push_back(std::move(utt));
    }
  }

  std::vector<size_t> pool;
  for (size_t u = 0; u < corpus.utterances.size(); ++u) {
    if (corpus.speakers[corpus.utterances[u].speaker].heldout) {
      corpus.heldout.push_back(u);
    } else {
      pool.push_back(u);
    }
  }
  for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.uniform_int(0, i - 1)]);
  const auto n_val = static_cast<size_t>(std::lround(params.validation_fraction * static_cast<double>(pool.size())));
  corpus.validation.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
  corpus.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
  std::sort(corpus.validation.begin(), corpus.validation.end());
  std::sort(corpus.train.begin(), corpus.train.end());
  return corpus;
}

std::filesystem::path labels_path(const std::filesystem::path& fsf) { return fsf.string() + ".labels"; }

std::vector<uint16_t> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open labels " + path.string());
  std::vector<uint16_t> out;
  long v = 0;
  while (in >> v) {
    if (v < 0 || v > 65535) throw Error(ErrorCode::corrupt, "label out of range in " + path.string());
    out.push_back(static_cast<uint16_t>(v));
  }
  if (!in.eof()) throw Error(ErrorCode::corrupt, "unreadable labels in " + path.string());
  return out;
}

namespace {

std::string utterance_file(const Corpus& corpus, size_t u) {
  const auto& utt = corpus.utterances[u];
  size_t ordinal = 0;
  for (size_t i = 0; i < u; ++i) ordinal += corpus.utterances[i].speaker == utt.speaker ? 1 : 0;
  return corpus.speakers[utt.speaker].id + "/utt" + padded(ordinal, 3) + ".fsf";
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::io, "cannot create corpus directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  nlohmann::json j;
  j["params"] = corpus.params.to_json();
  j["sigma"] = corpus.codebook.sigma;
  nlohmann::json centers = nlohmann::json::array();
  for (Eigen::Index l = 0; l < corpus.codebook.centers.rows(); ++l) {
    centers.push_back(std::vector<double>(corpus.codebook.centers.row(l).begin(), corpus.codebook.centers.row(l).end()));
  }
  j["centers"] = centers;
  nlohmann::json speakers = nlohmann::json::array();
  for (const auto& s : corpus.speakers) {
    nlohmann::json map = nlohmann::json::array();
    for (Eigen::Index r = 0; r < s.map.rows(); ++r) map.push_back(std::vector<double>(s.map.row(r).begin(), s.map.row(r).end()));
    speakers.push_back({{"id", s.id},
                        {"heldout", s.heldout},
                        {"map", map},
                        {"offset", std::vector<double>(s.offset.begin(), s.offset.end())}});
  }
  j["speakers"] = speakers;
  nlohmann::json utts = nlohmann::json::array();
  for (size_t u = 0; u < corpus.utterances.size(); ++u) {
    const auto rel = utterance_file(corpus, u);
    const auto path = dir / rel;
    std::filesystem::create_directories(path.parent_path());
    Manifest m;
    m.speaker_tag = corpus.speakers[corpus.utterances[u].speaker].id;
    m.source = "synthetic";
    write_feature_file(path, corpus.utterances[u].frames, m);
    std::ofstream lab(labels_path(path), std::ios::trunc);
    if (!lab) throw Error(ErrorCode::io, "cannot write labels for " + path.string());
    for (auto l : corpus.utterances[u].labels) lab << l << '\n';
    utts.push_back({{"path", rel}, {"speaker", corpus.utterances[u].speaker}});
  }
  j["utterances"] = utts;
  j["train"] = corpus.train;
  j["validation"] = corpus.validation;
  j["heldout"] = corpus.heldout;
  std::ofstream out(dir / "corpus.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + (dir / "corpus.json").string());
  out << j.dump(1) << '\n';
}

Corpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.json");
  if (!in) throw Error(ErrorCode::io, "no corpus.json in " + dir.string());
  Corpus c;
  try {
    const auto j = nlohmann::json::parse(in);
    c.params = CorpusParams::from_json(j.at("params"));
    c.codebook.sigma = j.at("sigma").get<double>();
    const auto& centers = j.at("centers");
    const auto p = static_cast<Eigen::Index>(centers.size());
    const auto d = static_cast<Eigen::Index>(c.params.dim);
    c.codebook.centers.resize(p, d);
    for (Eigen::Index l = 0; l < p; ++l) {
      for (Eigen::Index k = 0; k < d; ++k) c.codebook.centers(l, k) = centers.at(static_cast<size_t>(l)).at(static_cast<size_t>(k)).get<double>();
    }
    for (const auto& s : j.at("speakers")) {
      Speaker spk;
      spk.id = s.at("id").get<std::string>();
      spk.heldout = s.at("heldout").get<bool>();
      spk.map.resize(d, d);
      spk.offset.resize(d);
      for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index k = 0; k < d; ++k) spk.map(r, k) = s.at("map").at(static_cast<size_t>(r)).at(static_cast<size_t>(k)).get<double>();
        spk.offset(r) = s.at("offset").at(static_cast<size_t>(r)).get<double>();
      }
      c.speakers.push_back(std::move(spk));
    }
    for (const auto& u : j.at("utterances")) {
      Utterance utt;
      utt.speaker = u.at("speaker").get<size_t>();
      const auto path = dir / u.at("path").get<std::string>();
      auto coll = read_feature_file(path);
      utt.frames = FeatureSequence{matrix_of(coll)};
      utt.labels = read_labels(labels_path(path));
      if (utt.labels.size() != utt.frames.length()) throw Error(ErrorCode::corrupt, "label count mismatch for " + path.string());
      c.utterances.push_back(std::move(utt));
    }
    c.train = j.at("train").get<std::vector<size_t>>();
    c.validation = j.at("validation").get<std::vector<size_t>>();
    c.heldout = j.at("heldout").get<std::vector<size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt, "bad corpus.json in " + dir.string() + ": " + e.what());
  }
  return c;
}

double coverage_metric(const FeatureSet& set, const Speaker& speaker, const Codebook& codebook) {
  check_dim(set.features, codebook, "set");
  if (set.cardinality() == 0) return 0.0;
  const double radius = static_cast<double>(kFeatureScale) * 3.0 * codebook.sigma * speaker.scale();
  const auto dist = center_distances(set.features, speaker, codebook);
  size_t covered = 0;
  for (Eigen::Index l = 0; l < dist.cols(); ++l) covered += dist.col(l).minCoeff() <= radius * radius ? 1 : 0;
  return static_cast<double>(covered) / static_cast<double>(codebook.phonemes());
}

double fidelity_metric(const FeatureSet& hallucinated, size_t true_speaker, const std::vector<FeatureSet>& references) {
  if (true_speaker >= references.size()) throw Error(ErrorCode::invalid_argument, "true speaker has no reference set");
  if (hallucinated.cardinality() == 0) {
    warn("fidelity of an empty set is defined as 0");
    return 0.0;
  }
  const Eigen::MatrixXd x = as_matrix(hallucinated.features);
  const Eigen::VectorXd x_sq = x.rowwise().squaredNorm();
  Eigen::VectorXd best = Eigen::VectorXd::Constant(x.rows(), std::numeric_limits<double>::infinity());
  std::vector<size_t> owner(static_cast<size_t>(x.rows()), 0);
  for (size_t s = 0; s < references.size(); ++s) {
    if (references[s].cardinality() == 0) continue;
    if (references[s].dim() != hallucinated.dim()) throw Error(ErrorCode::invalid_argument, "reference dim mismatch");
    const Eigen::MatrixXd r = as_matrix(references[s].features);
    const Eigen::MatrixXd d2 = (-2.0 * x * r.transpose()).colwise() + x_sq;
    const Eigen::VectorXd r_sq = r.rowwise().squaredNorm();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double m = (d2.row(i).transpose() + r_sq).minCoeff();
      if (m < best(i)) {
        best(i) = m;
        owner[static_cast<size_t>(i)] = s;
      }
    }
  }
  size_t hits = 0;
  for (size_t o : owner) hits += o == true_speaker ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(owner.size());
}

std::vector<uint16_t> nearest_labels(const FeatureMatrix& frames, const Speaker& speaker, const Codebook& codebook) {
  check_dim(frames, codebook, "frames");
  const auto dist = center_distances(frames, speaker, codebook);
  std::vector<uint16_t> out(frames.count());
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    Eigen::Index arg = 0;
    dist.row(i).minCoeff(&arg);
    out[static_cast<size_t>(i)] = static_cast<uint16_t>(arg);
  }
  return out;
}

double content_error_metric(const std::vector<uint16_t>& source_labels, const FeatureSequence& converted,
                            const Speaker& target, const Codebook& codebook) {
  if (source_labels.size() != converted.length()) {
    throw Error(ErrorCode::invalid_argument, "converted length " + std::to_string(converted.length()) +
                                                 " does not match " + std::to_string(source_labels.size()) + " labels");
  }
  if (converted.length() == 0) {
    warn("content error of an empty sequence is defined as 0");
    return 0.0;
  }
  const auto labels = nearest_labels(converted.frames, target, codebook);
  size_t wrong = 0;
  for (size_t i = 0; i < labels.size(); ++i) wrong += labels[i] != source_labels[i] ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

BenchConfig desk_bench(uint32_t dim, int epochs) {
  BenchConfig c;
  c.model = HallucinatorConfig::desk(dim);
  c.train.epochs = epochs;
  c.train.batch_size = 8;
  c.train.lr = 3e-4;
  c.train.validation_splits = 32;
  return c;
}

std::vector<Variant> ablation_variants() {
  return {{"V1", {true, true, true}},  {"V2", {false, true, true}}, {"V3", {true, false, true}},
          {"V4", {true, true, false}}, {"V5", {false, true, false}}, {"V6", {false, false, true}}};
}

std::vector<BenchRow> evaluate_model(const HallucinatorModel<float>& model, const Corpus& corpus,
                                     const std::vector<size_t>& counts, const BenchConfig& config,
                                     const std::string& variant) {
  if (model.config().feature_dim != corpus.codebook.dim()) {
    throw Error(ErrorCode::invalid_argument, "model dim does not match corpus dim");
  }
  std::vector<size_t> targets, sources;
  for (size_t s = 0; s < corpus.speakers.size(); ++s) (corpus.speakers[s].heldout ? targets : sources).push_back(s);
  if (targets.empty()) throw Error(ErrorCode::invalid_argument, "corpus has no held-out speakers");
  if (sources.empty()) sources = targets;

  // Dense references come from each speaker's last utterances so the observed
  // clip (first utterance) is not its own reference.
  std::vector<FeatureSet> references(corpus.speakers.size());
  for (size_t s = 0; s < corpus.speakers.size(); ++s) {
    references[s].features = FeatureMatrix(corpus.codebook.dim(), 0);
    const auto utts = corpus.utterances_of(s);
    for (auto it = utts.rbegin(); it != utts.rend() && references[s].cardinality() < config.reference_frames; ++it) {
      const auto& frames = corpus.utterances[*it].frames.frames;
      for (size_t f = 0; f < frames.count() && references[s].cardinality() < config.reference_frames; ++f) {
        references[s].features.append(frames.row(f));
      }
    }
  }

  std::vector<BenchRow> rows;
  for (size_t count : counts) {
    BenchRow row;
    row.variant = variant;
    row.flags = model.config().flags;
    row.count = count;
    rows.push_back(row);
  }

  for (size_t t = 0; t < targets.size(); ++t) {
    const size_t target = targets[t];
    const auto& first = corpus.utterances[corpus.utterances_of(target).front()].frames.frames;
    FeatureSet observed{FeatureMatrix(first.dim(), 0), corpus.speakers[target].id};
    for (size_t f = 0; f < std::min(config.observed, first.count()); ++f) observed.features.append(first.row(f));

    Rng pick(Rng::derive(Rng::derive(config.seed, kEvalStream), target));
    std::vector<size_t> source_utts;
    for (size_t j = 0; j < config.sources_per_target; ++j) {
      const size_t spk = sources[static_cast<size_t>(pick.uniform_int(0, sources.size() - 1))];
      const auto utts = corpus.utterances_of(spk);
      source_utts.push_back(utts[static_cast<size_t>(pick.uniform_int(0, utts.size() - 1))]);
    }

    for (size_t c = 0; c < counts.size(); ++c) {
      HallucinateOptions opts;
      opts.seed = Rng::derive(Rng::derive(config.seed, target), counts[c]);
      const FeatureSet expanded = expand_target(observed, model, counts[c], opts);
      const NeighborIndex index(expanded);
      double err = 0.0;
      for (size_t u : source_utts) {
        const auto converted = convert_sequence(corpus.utterances[u].frames, index, KnnConfig{config.k, 0});
        err += content_error_metric(corpus.utterances[u].labels, converted, corpus.speakers[target], corpus.codebook);
      }
      FeatureSet generated{FeatureMatrix(expanded.dim(), 0), observed.speaker_tag};
      for (size_t i = observed.cardinality(); i < expanded.cardinality(); ++i) generated.features.append(expanded.features.row(i));
      const FeatureSet& judged = counts[c] > 0 ? generated : observed;
      rows[c].content_error += err / static_cast<double>(source_utts.size());
      rows[c].fidelity += fidelity_metric(judged, target, references);
      rows[c].coverage += coverage_metric(expanded, corpus.speakers[target], corpus.codebook);
    }
  }
  for (auto& r : rows) {
    const double n = static_cast<double>(targets.size());
    r.content_error /= n;
    r.fidelity /= n;
    r.coverage /= n;
  }
  return rows;
}

BenchRow ground_truth_row(const Corpus& corpus, const BenchConfig& config) {
  BenchRow row;
  row.variant = "ground_truth";
  size_t n = 0;
  std::vector<FeatureSet> references(corpus.speakers.size());
  for (size_t s = 0; s < corpus.speakers.size(); ++s) {
    references[s].features = FeatureMatrix(corpus.codebook.dim(), 0);
    const auto utts = corpus.utterances_of(s);
    for (size_t i = 1; i < utts.size(); ++i) references[s].features.append(corpus.utterances[utts[i]].frames.frames);
  }
  for (size_t s = 0; s < corpus.speakers.size(); ++s) {
    if (!corpus.speakers[s].heldout) continue;
    const auto utts = corpus.utterances_of(s);
    const auto& probe = corpus.utterances[utts.front()];
    FeatureSet dense{FeatureMatrix(corpus.codebook.dim(), 0), corpus.speakers[s].id};
    for (size_t u : utts) dense.features.append(corpus.utterances[u].frames.frames);
    const auto converted = convert_sequence(probe.frames, dense, KnnConfig{config.k, 0});
    row.content_error += content_error_metric(probe.labels, converted, corpus.speakers[s], corpus.codebook);
    row.fidelity += fidelity_metric(FeatureSet{probe.frames.frames, {}}, s, references);
    row.coverage += coverage_metric(dense, corpus.speakers[s], corpus.codebook);
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::invalid_argument, "corpus has no held-out speakers");
  row.content_error /= static_cast<double>(n);
  row.fidelity /= static_cast<double>(n);
  row.coverage /= static_cast<double>(n);
  return row;
}

AblationResult run_ablation_suite(const Corpus& corpus, const std::vector<Variant>& variants,
                                  const std::vector<size_t>& counts, const BenchConfig& config) {
  AblationResult result;
  for (const auto& v : variants) {
    HallucinatorConfig mc = config.model;
    mc.feature_dim = corpus.codebook.dim();
    mc.flags = v.flags;
    mc.validate();
  }
  for (const auto& v : variants) {
    HallucinatorConfig mc = config.model;
    mc.feature_dim = corpus.codebook.dim();
    mc.flags = v.flags;
    TrainConfig tc = config.train;
    if (tc.checkpoint) tc.checkpoint = tc.checkpoint->string() + "." + v.name;
    if (tc.history) tc.history = tc.history->string() + "." + v.name;
    auto trained = train(mc, tc, corpus.sets(corpus.train), corpus.sets(corpus.validation));
    auto rows = evaluate_model(trained.model, corpus, counts, config, v.name);
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());
    result.training.push_back(std::move(trained));
  }
  return result;
}

void write_results(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write results to " + path.string());
  out << "variant,peq,cat,mod,count,content_error,fidelity,coverage\n" << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.variant << ',' << int(r.flags.peq) << ',' << int(r.flags.cat) << ',' << int(r.flags.mod) << ',' << r.count
        << ',' << r.content_error << ',' << r.fidelity << ',' << r.coverage << '\n';
  }
}

Projection principal_projection(const FeatureMatrix& data) {
  if (data.count() == 0) throw Error(ErrorCode::invalid_argument, "nothing to project");
  const Eigen::MatrixXd x = as_matrix(data);
  Projection p;
  p.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - p.mean.transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(x.rows()) - 1.0);
  const Eigen::MatrixXd cov = centered.transpose() * centered / denom;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index d = x.cols();
  p.components = Eigen::MatrixXd::Zero(2, d);
  p.variance.setZero();
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.components.row(c) = v.transpose();
    p.variance(c) = std::max(0.0, eig.eigenvalues()(d - 1 - c));
  }
  p.coords = centered * p.components.transpose();
  return p;
}

Projection export_projection(const std::vector<LabeledSet>& sets, const std::filesystem::path& path) {
  FeatureMatrix all;
  std::vector<const std::string*> labels;
  for (const auto& s : sets) {
    if (s.set.cardinality() == 0) continue;
    if (all.empty()) all = FeatureMatrix(s.set.dim(), 0);
    all.append(s.set.features);
    for (size_t i = 0; i < s.set.cardinality(); ++i) labels.push_back(&s.label);
  }
  auto proj = principal_projection(all);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write projection to " + path.string());
  out << "x,y,label\n" << std::setprecision(9);
  for (Eigen::Index i = 0; i < proj.coords.rows(); ++i) {
    out << proj.coords(i, 0) << ',' << proj.coords(i, 1) << ',' << *labels[static_cast<size_t>(i)] << '\n';
  }
  return proj;
}

}  // namespace phonhal::synth
