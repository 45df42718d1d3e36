#pragma once

// Binary checkpoint container (little-endian):
//
//   magic    8 bytes  "FLOWNAV\0"
//   version  u32      kCheckpointVersion
//   config   7×u64    n_layers n_heads d_model d_ff vocab_size max_seq_len gnn_insert_layer
//            u8       tie_lm_head
//   meta     u32 count, then count × (u32 len, key bytes, u32 len, value bytes)
//   tensors  u32 count, then count × (u32 len, name bytes, u32 rank, rank × u64 dims,
//                                      numel × f64 values)
//
// Values are written as raw IEEE-754 doubles so a load reproduces them bit for bit.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flownav/gnnlayer.hpp"
#include "flownav/model.hpp"

namespace flownav {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  model::ModelConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<model::NamedTensor> tensors;

  const ad::Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Packs a model (backbone plus attachments) and optional navigation layer.
Checkpoint make_checkpoint(const model::Model& m, const gnn::GnnParams* gnn_params = nullptr,
                           std::map<std::string, std::string> metadata = {});
// Rebuilds the model including any attachments recorded in the checkpoint.
model::Model model_from_checkpoint(const Checkpoint& ckpt);
std::optional<gnn::GnnParams> gnn_from_checkpoint(const Checkpoint& ckpt);

}  // namespace flownav
