#pragma once

// On-disk model container. Layout:
//   magic "MVC1"
//   little-endian u64 header length
//   UTF-8 JSON header {format_version, tensors[], metadata}, space-padded so
//   the payload starts 64-byte aligned
//   raw little-endian f32 payload, each tensor 64-byte aligned
// Shared tensors are stored once; loading rebuilds the aliases from the
// embedded sharing plan.

#include <string>

#include "muxvit/model.hpp"
#include "muxvit/run_config.hpp"

namespace muxvit {

void save_checkpoint(const Model<float>& model, const RunConfig& rc, const std::string& path);

struct LoadedCheckpoint {
  Model<float> model;
  RunConfig run_config;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace muxvit
