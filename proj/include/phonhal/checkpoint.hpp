#pragma once

#include <filesystem>
#include <optional>

#include "json.hpp"

#include "phonhal/hallucinator.hpp"

namespace phonhal {

// PHCK layout: "PHCK", version u32 LE, record count u32 LE, then records of
// (name length u16, name, rank u8, dims u32 each, f32 data), then the config
// echo as JSON (length u32 LE + bytes).
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  HallucinatorConfig config;
  nn::ParameterStore<float> params;
  uint64_t trained_steps = 0;
  std::optional<nn::AdamState<float>> adam;
  nlohmann::json train_state;  // null unless written by the trainer
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const HallucinatorModel<float>& model, const std::filesystem::path& path);
HallucinatorModel<float> load_checkpoint(const std::filesystem::path& path);

// Rebuilds the model half of a checkpoint.
HallucinatorModel<float> model_from(const Checkpoint& ckpt);

}  // namespace phonhal
