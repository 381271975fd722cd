#pragma once

#include <map>
#include <vector>

#include <torch/torch.h>

namespace ds3 {

inline constexpr double kBackgroundDifficulty = 0.2;
inline constexpr double kDefaultDifficultyClamp = 2.0;

/// Pixel-level difficulty weights. All tensors are detached from any graph.
struct DifficultyMap {
  torch::Tensor full;                   // [B, 1, H, W]
  std::map<int, torch::Tensor> pyramid;  // tap index -> [B, 1, h, w]
  double background_value = kBackgroundDifficulty;
  bool stop_gradient = true;

  const torch::Tensor& level(int tap) const;
};

/// |1 - score| per patch cell, detached.
torch::Tensor patch_difficulty(const torch::Tensor& disc_scores);

/// disc_scores [B,1,h,w], foreground_mask [B,1,H,W] (nonzero = foreground).
/// Bilinear upsampling of |1 - score| to the mask size, clamped to [0, clamp_max];
/// background pixels are set to exactly background_value.
DifficultyMap compute_difficulty_map(const torch::Tensor& disc_scores, const torch::Tensor& foreground_mask,
                                     double clamp_max = kDefaultDifficultyClamp);

/// Average-pools map.full to each requested [h, w]; fills map.pyramid.
void build_pyramid(DifficultyMap& map, const std::map<int, std::vector<int64_t>>& tap_shapes);

/// Stage-1 override: every level (and the full map) is exactly 1.
DifficultyMap unit_difficulty_map(const std::vector<int64_t>& full_shape,
                                  const std::map<int, std::vector<int64_t>>& tap_shapes,
                                  torch::Dtype dtype = torch::kFloat);

}  // namespace ds3
