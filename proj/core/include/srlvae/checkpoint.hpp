#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "srlvae/vae.hpp"

namespace srlvae {

// On disk a checkpoint is a directory holding meta.json (architecture,
// downsampling factor, seed, provenance, parameter hashes) and params.bin, a
// flat archive of float64 tensors keyed by parameter path. Fine-tuned
// checkpoints also carry the frozen reference encoder under
// "reference_encoder/...".
struct CheckpointMeta {
  VaeConfig config;
  int image_height = 32;
  int image_width = 32;
  std::uint64_t seed = 0;
  std::uint64_t extractor_seed = 1234;
  std::map<std::string, std::string> provenance;
};

struct Checkpoint {
  VaeModel model;
  CheckpointMeta meta;
};

void save_checkpoint(const std::filesystem::path& dir, const VaeModel& model, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string encoder_hash(const VaeModel& model);
std::string decoder_hash(const VaeModel& model);

}  // namespace srlvae
