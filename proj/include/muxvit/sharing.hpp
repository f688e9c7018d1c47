#pragma once

#include <string>
#include <vector>

#include "muxvit/errors.hpp"
#include "muxvit/model_config.hpp"

namespace muxvit {

enum class ShareMode { none, every_k, all_in_stage };

inline const char* share_mode_name(ShareMode m) {
  switch (m) {
    case ShareMode::none: return "none";
    case ShareMode::every_k: return "every_k";
    case ShareMode::all_in_stage: return "all_in_stage";
  }
  return "?";
}

inline ShareMode share_mode_from(const std::string& s) {
  if (s == "none") return ShareMode::none;
  if (s == "every_k") return ShareMode::every_k;
  if (s == "all" || s == "all_in_stage") return ShareMode::all_in_stage;
  throw ConfigError("unknown sharing mode '" + s + "'");
}

// Partition of each stage's layer indices into consecutive share groups.
// Groups never cross stage boundaries. LayerNorms and transformation
// parameters stay per-layer regardless of the plan.
struct SharingPlan {
  struct Group {
    int stage = 0;
    int first_layer = 0;  // index within the stage
    int count = 1;
  };
  std::vector<Group> groups;  // ordered by (stage, first_layer)
  ShareMode mode = ShareMode::none;
  int k = 1;

  int group_of(int stage, int layer) const {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const Group& gr = groups[g];
      if (gr.stage == stage && layer >= gr.first_layer && layer < gr.first_layer + gr.count)
        return static_cast<int>(g);
    }
    throw ConfigError("layer (" + std::to_string(stage) + "," + std::to_string(layer) +
                      ") not covered by sharing plan");
  }

  bool is_identity() const {
    for (const auto& g : groups)
      if (g.count != 1) return false;
    return true;
  }
};

inline SharingPlan make_sharing_plan(const ModelConfig& cfg, ShareMode mode, int k = 1) {
  cfg.validate();
  SharingPlan plan;
  plan.mode = mode;
  plan.k = (mode == ShareMode::every_k) ? k : 1;
  if (mode == ShareMode::every_k && k < 1) throw ConfigError("sharing K must be >= 1");
  for (int s = 0; s < static_cast<int>(cfg.stages.size()); ++s) {
    const int L = cfg.stages[static_cast<std::size_t>(s)].num_layers;
    switch (mode) {
      case ShareMode::none:
        for (int l = 0; l < L; ++l) plan.groups.push_back({s, l, 1});
        break;
      case ShareMode::all_in_stage:
        plan.groups.push_back({s, 0, L});
        break;
      case ShareMode::every_k: {
        if (k > L)
          throw ConfigError("sharing K=" + std::to_string(k) + " exceeds stage " +
                            std::to_string(s) + " depth " + std::to_string(L));
        // trailing remainder group allowed when K does not divide L
        for (int l = 0; l < L; l += k) plan.groups.push_back({s, l, std::min(k, L - l)});
        break;
      }
    }
  }
  return plan;
}

// Per-layer unshared transformation parameters.
struct TransformConfig {
  bool msa = false;      // head-mixing F1/F2 around the attention softmax
  bool mlp = false;      // depth-wise convolution on the MLP input
  int kernel = 3;        // K_conv, odd

  void validate() const {
    if (mlp && kernel % 2 == 0)
      throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(kernel));
    if (mlp && kernel < 1) throw ConfigError("depthwise kernel size must be positive");
  }
};

}  // namespace muxvit
