#pragma once

// One structured config drives every pipeline command; any field can be
// overridden by a same-named CLI flag. Round-trips losslessly through JSON.

#include <string>

#include <json.hpp>

#include "muxvit/dataset.hpp"
#include "muxvit/distill.hpp"
#include "muxvit/model_config.hpp"
#include "muxvit/sharing.hpp"
#include "muxvit/trainer.hpp"

namespace muxvit {

using Json = nlohmann::ordered_json;

struct SharingSettings {
  ShareMode mode = ShareMode::none;
  int k = 2;
};

struct DataConfig {
  std::uint64_t seed = 0;
  int num_train = 20000;
  int num_test = 2000;
  int image_size = 32;
  int classes = 10;
  double noise_sigma = 0.1;

  SynthSpec spec() const { return SynthSpec{seed, image_size, classes, noise_sigma}; }
};

struct OutputConfig {
  std::string dir = "out";
};

struct RunConfig {
  ModelConfig model;
  SharingSettings sharing;
  TransformConfig transforms;
  DistillConfig distill;
  OptimConfig optim;
  DataConfig data;
  OutputConfig output;

  void validate() const;
  SharingPlan plan() const {
    return make_sharing_plan(model, sharing.mode, sharing.k);
  }
};

RunConfig default_run_config();

Json run_config_to_json(const RunConfig& rc);
RunConfig run_config_from_json(const Json& j);

Json sharing_plan_to_json(const SharingPlan& plan);
SharingPlan sharing_plan_from_json(const Json& j);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& rc, const std::string& path);

}  // namespace muxvit
