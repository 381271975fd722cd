#include "ds3/difficulty.hpp"

#include <stdexcept>
#include <string>

namespace ds3 {

namespace F = torch::nn::functional;

const torch::Tensor& DifficultyMap::level(int tap) const {
  auto it = pyramid.find(tap);
  if (it == pyramid.end()) throw std::out_of_range("DifficultyMap: no pyramid level for tap " + std::to_string(tap));
  return it->second;
}

torch::Tensor patch_difficulty(const torch::Tensor& disc_scores) {
  if (!torch::isfinite(disc_scores).all().item<bool>())
    throw std::runtime_error("difficulty: discriminator produced non-finite scores");
  return (1.0 - disc_scores.detach()).abs();
}

DifficultyMap compute_difficulty_map(const torch::Tensor& disc_scores, const torch::Tensor& foreground_mask,
                                     double clamp_max) {
  if (disc_scores.dim() != 4 || foreground_mask.dim() != 4)
    throw std::invalid_argument("compute_difficulty_map: expected [B,1,h,w] scores and [B,1,H,W] mask");
  if (disc_scores.size(0) != foreground_mask.size(0))
    throw std::invalid_argument("compute_difficulty_map: batch size mismatch");
  torch::NoGradGuard guard;
  auto cells = patch_difficulty(disc_scores);
  auto full = F::interpolate(cells, F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{foreground_mask.size(2), foreground_mask.size(3)})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
  full = full.clamp(0.0, clamp_max);
  auto bg = foreground_mask.to(full.dtype()).eq(0);
  full = torch::where(bg, torch::full_like(full, kBackgroundDifficulty), full);
  DifficultyMap m;
  m.full = full;
  return m;
}

void build_pyramid(DifficultyMap& map, const std::map<int, std::vector<int64_t>>& tap_shapes) {
  torch::NoGradGuard guard;
  const int64_t H = map.full.size(2), W = map.full.size(3);
  for (const auto& [tap, shape] : tap_shapes) {
    if (shape.size() != 2) throw std::invalid_argument("build_pyramid: tap shapes must be [h, w]");
    if (shape[0] > H || shape[1] > W)
      throw std::invalid_argument("build_pyramid: tap " + std::to_string(tap) + " shape " +
                                  std::to_string(shape[0]) + "x" + std::to_string(shape[1]) +
                                  " is larger than the full map " + std::to_string(H) + "x" + std::to_string(W));
    if (shape[0] == H && shape[1] == W)
      map.pyramid[tap] = map.full;
    else
      map.pyramid[tap] = F::adaptive_avg_pool2d(map.full, F::AdaptiveAvgPool2dFuncOptions({shape[0], shape[1]}));
  }
}

DifficultyMap unit_difficulty_map(const std::vector<int64_t>& full_shape,
                                  const std::map<int, std::vector<int64_t>>& tap_shapes, torch::Dtype dtype) {
  if (full_shape.size() != 4) throw std::invalid_argument("unit_difficulty_map: full shape must be [B,1,H,W]");
  DifficultyMap m;
  m.full = torch::ones(full_shape, dtype);
  for (const auto& [tap, shape] : tap_shapes)
    m.pyramid[tap] = torch::ones({full_shape[0], 1, shape[0], shape[1]}, dtype);
  return m;
}

}  // namespace ds3
