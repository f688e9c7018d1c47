#pragma once

#include <string>
#include <vector>

#include "muxvit/errors.hpp"

namespace muxvit {

struct StageConfig {
  int num_layers = 1;
  int embed_dim = 64;
  int num_heads = 4;
  int mlp_dim = 128;
  bool merge_tokens = false;  // 2x2 concat + linear reduction at stage entry
};

struct ModelConfig {
  std::vector<StageConfig> stages;
  int image_size = 32;
  int patch_size = 4;
  int in_channels = 1;
  int num_classes = 10;
  double drop_path_rate = 0.0;

  void validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    if (image_size <= 0 || patch_size <= 0) throw ConfigError("image/patch size must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (in_channels <= 0 || num_classes <= 0)
      throw ConfigError("channels and classes must be positive");
    if (drop_path_rate < 0 || drop_path_rate >= 1) throw ConfigError("drop_path_rate out of [0,1)");
    int grid = image_size / patch_size;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const StageConfig& st = stages[s];
      if (st.num_layers <= 0 || st.embed_dim <= 0 || st.num_heads <= 0 || st.mlp_dim <= 0)
        throw ConfigError("stage " + std::to_string(s) + " has non-positive dimensions");
      if (st.embed_dim % st.num_heads != 0)
        throw ConfigError("stage " + std::to_string(s) + ": embed_dim " +
                          std::to_string(st.embed_dim) + " not divisible by num_heads " +
                          std::to_string(st.num_heads));
      if (st.mlp_dim < st.embed_dim)
        throw ConfigError("stage " + std::to_string(s) + ": mlp_dim must be >= embed_dim");
      if (s == 0) {
        if (st.merge_tokens) throw ConfigError("stage 0 cannot merge tokens");
      } else if (st.merge_tokens) {
        if (grid % 2 != 0)
          throw ConfigError("stage " + std::to_string(s) + ": token grid " + std::to_string(grid) +
                            " not divisible by 2 for merging");
        grid /= 2;
      } else if (st.embed_dim != stages[s - 1].embed_dim) {
        throw ConfigError("stage " + std::to_string(s) +
                          " changes embed_dim without merge_tokens");
      }
    }
  }

  // Square token-grid side at the entry of stage s (after its merge).
  int grid_at_stage(int s) const {
    int grid = image_size / patch_size;
    for (int i = 1; i <= s; ++i)
      if (stages[static_cast<std::size_t>(i)].merge_tokens) grid /= 2;
    return grid;
  }
  int tokens_at_stage(int s) const {
    const int g = grid_at_stage(s);
    return g * g;
  }
  int num_patches() const {
    const int g = image_size / patch_size;
    return g * g;
  }
  int patch_pixels() const { return patch_size * patch_size * in_channels; }
  int total_layers() const {
    int n = 0;
    for (const auto& st : stages) n += st.num_layers;
    return n;
  }
};

}  // namespace muxvit
