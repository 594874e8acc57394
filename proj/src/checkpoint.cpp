#include "phonhal/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace phonhal {

namespace {

constexpr char kMagic[4] = {'P', 'H', 'C', 'K'};
constexpr const char* kAdamFirst = "adam.m/";
constexpr const char* kAdamSecond = "adam.v/";

template <typename U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

void put_record(std::string& out, const std::string& name, const nn::Tensor<float>& t) {
  if (name.size() > 0xffff) throw Error(ErrorCode::invalid_argument, "parameter name too long: " + name);
  put<uint16_t>(out, static_cast<uint16_t>(name.size()));
  out += name;
  put<uint8_t>(out, 2);
  put<uint32_t>(out, static_cast<uint32_t>(t.rows()));
  put<uint32_t>(out, static_cast<uint32_t>(t.cols()));
  out.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.size()) * sizeof(float));
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}

  template <typename U>
  U take(const std::string& what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string take_bytes(size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void take_floats(float* dst, size_t n, const std::string& what) {
    need(n * sizeof(float), what);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::truncated, "truncated checkpoint " + file_ + " while reading " + what);
    }
  }

  const std::string& bytes_;
  std::string file_;
  size_t pos_ = 0;
};

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<uint32_t>(out, kCheckpointVersion);
  const size_t n = ckpt.params.size();
  const bool with_adam = ckpt.adam.has_value() && ckpt.adam->first.size() == n;
  put<uint32_t>(out, static_cast<uint32_t>(with_adam ? 3 * n : n));
  for (size_t i = 0; i < n; ++i) put_record(out, ckpt.params[i].name, ckpt.params[i].value);
  if (with_adam) {
    for (size_t i = 0; i < n; ++i) put_record(out, kAdamFirst + ckpt.params[i].name, ckpt.adam->first[i]);
    for (size_t i = 0; i < n; ++i) put_record(out, kAdamSecond + ckpt.params[i].name, ckpt.adam->second[i]);
  }

  nlohmann::json meta{{"model", ckpt.config.to_json()}, {"trained_steps", ckpt.trained_steps}};
  if (ckpt.adam) {
    meta["adam"] = {{"step", ckpt.adam->step},
                    {"lr", ckpt.adam->lr},
                    {"beta1", ckpt.adam->beta1},
                    {"beta2", ckpt.adam->beta2},
                    {"eps", ckpt.adam->eps}};
  }
  if (!ckpt.train_state.is_null()) meta["train_state"] = ckpt.train_state;
  const std::string text = meta.dump();
  put<uint32_t>(out, static_cast<uint32_t>(text.size()));
  out += text;

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorCode::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cursor cur(bytes, path.string());

  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::bad_magic, "not a PHCK checkpoint: " + path.string());
  }
  cur.take_bytes(4, "magic");
  const auto version = cur.take<uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::unsupported_version,
                "unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto count = cur.take<uint32_t>("record count");

  nn::ParameterStore<float> all;
  for (uint32_t r = 0; r < count; ++r) {
    const std::string label = "record " + std::to_string(r);
    const auto name_len = cur.take<uint16_t>(label + " name length");
    const std::string name = cur.take_bytes(name_len, label + " name");
    const std::string what = label + " ('" + name + "')";
    const auto rank = cur.take<uint8_t>(what + " rank");
    if (rank < 1 || rank > 2) throw Error(ErrorCode::corrupt, "bad rank " + std::to_string(rank) + " for " + what);
    uint32_t dims[2] = {1, 1};
    for (uint8_t k = 0; k < rank; ++k) dims[k] = cur.take<uint32_t>(what + " dims");
    const Eigen::Index rows = rank == 2 ? dims[0] : 1;
    const Eigen::Index cols = rank == 2 ? dims[1] : dims[0];
    nn::Tensor<float> t(rows, cols);
    cur.take_floats(t.data(), static_cast<size_t>(t.size()), what + " data");
    if (all.find(name) != nullptr) throw Error(ErrorCode::corrupt, "duplicate " + what);
    all.add(name, std::move(t));
  }

  const auto json_len = cur.take<uint32_t>("config length");
  const std::string text = cur.take_bytes(json_len, "config");
  if (!cur.done()) throw Error(ErrorCode::corrupt, "trailing bytes after config in " + path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::corrupt, "unreadable config echo in " + path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  if (!meta.contains("model")) throw Error(ErrorCode::corrupt, "checkpoint config echo lacks a model section");
  ckpt.config = HallucinatorConfig::from_json(meta["model"]);
  ckpt.trained_steps = meta.value("trained_steps", uint64_t{0});
  if (meta.contains("train_state")) ckpt.train_state = meta["train_state"];

  std::vector<std::pair<std::string, nn::Tensor<float>>> firsts, seconds;
  for (size_t i = 0; i < all.size(); ++i) {
    const auto& p = all[i];
    if (starts_with(p.name, kAdamFirst)) {
      firsts.emplace_back(p.name.substr(std::strlen(kAdamFirst)), p.value);
    } else if (starts_with(p.name, kAdamSecond)) {
      seconds.emplace_back(p.name.substr(std::strlen(kAdamSecond)), p.value);
    } else {
      ckpt.params.add(p.name, p.value);
    }
  }
  if (meta.contains("adam")) {
    nn::AdamState<float> adam;
    const auto& a = meta["adam"];
    adam.step = a.at("step").get<uint64_t>();
    adam.lr = a.at("lr").get<double>();
    adam.beta1 = a.at("beta1").get<double>();
    adam.beta2 = a.at("beta2").get<double>();
    adam.eps = a.at("eps").get<double>();
    if (!firsts.empty()) {
      if (firsts.size() != ckpt.params.size() || seconds.size() != ckpt.params.size()) {
        throw Error(ErrorCode::corrupt, "optimizer moments do not cover every parameter");
      }
      for (size_t i = 0; i < ckpt.params.size(); ++i) {
        if (firsts[i].first != ckpt.params[i].name || seconds[i].first != ckpt.params[i].name) {
          throw Error(ErrorCode::corrupt, "optimizer moment order mismatch at " + ckpt.params[i].name);
        }
        adam.first.push_back(std::move(firsts[i].second));
        adam.second.push_back(std::move(seconds[i].second));
      }
    }
    ckpt.adam = std::move(adam);
  }
  return ckpt;
}

HallucinatorModel<float> model_from(const Checkpoint& ckpt) {
  nn::ParameterStore<float> copy;
  for (size_t i = 0; i < ckpt.params.size(); ++i) copy.add(ckpt.params[i].name, ckpt.params[i].value);
  HallucinatorModel<float> model(ckpt.config, std::move(copy));
  model.trained_steps = ckpt.trained_steps;
  return model;
}

void save_checkpoint(const HallucinatorModel<float>& model, const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (size_t i = 0; i < model.params().size(); ++i) ckpt.params.add(model.params()[i].name, model.params()[i].value);
  ckpt.trained_steps = model.trained_steps;
  write_checkpoint(path, ckpt);
}

HallucinatorModel<float> load_checkpoint(const std::filesystem::path& path) { return model_from(read_checkpoint(path)); }

}  // namespace phonhal
