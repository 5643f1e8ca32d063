#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hsd/detector.hpp"

namespace hsd {

// Single-file container:
//   8 bytes  magic "HSDCKPT1"
//   8 bytes  little-endian manifest length
//   manifest JSON (UTF-8); manifest["tensors"] lists {name, shape, offset} with offsets in floats
//   float32 little-endian payload
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Packs parameters and buffers under "model.", optional SGD momentum buffers under "optim.".
// manifest gets: fingerprint, spec, plus whatever `extra` carries (config echo, epoch, metrics).
Checkpoint make_checkpoint(DetectorImpl& model, const nlohmann::json& extra = nlohmann::json::object(),
                           torch::optim::SGD* optimizer = nullptr);

// Copies tensors into `model` (and `optimizer` when given). Throws CheckpointError on fingerprint mismatch
// or missing tensors.
void load_checkpoint_into(const Checkpoint& ckpt, DetectorImpl& model, torch::optim::SGD* optimizer = nullptr);

// Rebuilds a detector from the manifest spec and loads its weights.
Detector load_detector(const Checkpoint& ckpt);
Detector load_detector(const std::filesystem::path& path);

}  // namespace hsd
