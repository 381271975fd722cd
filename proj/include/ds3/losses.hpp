#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include <torch/torch.h>

#include "ds3/difficulty.hpp"
#include "ds3/nets.hpp"

namespace ds3 {

struct LossWeights {
  // teacher
  double pid = 100.0;
  double pad = 1.0;
  double gan = 1.0;
  // student
  double id = 100.0;
  double fd = 1.0;
  double pad_student = 1.0;
  double gan_student = 1.0;

  double tau = 0.07;

  void validate() const;
};

/// Itemized losses of one step. Teacher parts: pid, pad, gan_g, gan_d.
/// Student parts: id, fd, pad_s, gan_g_s, gan_d_s, plus pid_s which is only
/// nonzero for the paired-only baseline (student supervised by real targets).
struct LossBundle {
  double pid = 0, pad = 0, gan_g = 0, gan_d = 0;
  double id = 0, fd = 0, pad_s = 0, gan_g_s = 0, gan_d_s = 0, pid_s = 0;
  double total_teacher = 0, total_student = 0;
  double schedule_weight = 1.0;
  double combined = 0;

  /// Recomputes totals from the parts.
  void finalize(const LossWeights& w);
  bool all_finite() const;
};

struct PatchSamplingPlan {
  int count = 64;  // locations per tap; negatives per positive = count - 1
  std::uint64_t seed = 0;

  void validate() const;
};

/// mean(map * |y - y_hat|); the map is treated as a constant.
torch::Tensor pixelwise_difficulty_l1(const torch::Tensor& map, const torch::Tensor& y, const torch::Tensor& y_hat);

/// Core InfoNCE over one image's sampled locations.
/// anchors, positives: [B, S, D]; weights: [B, S]. Negatives for location s are
/// the positives at the other S-1 locations. Returns the weighted mean over B*S.
torch::Tensor weighted_infonce(const torch::Tensor& anchors, const torch::Tensor& positives,
                               const torch::Tensor& weights, double tau);

/// Uniform draw of `count` distinct grid cells (without replacement).
std::vector<GridPoint> sample_locations(int64_t height, int64_t width, int count, torch::Generator& gen);

/// Difficulty-weighted patchwise InfoNCE summed over the contrastive taps.
/// Anchors come from `anchor_taps` (input stream), positives and negatives from
/// `positive_taps` (synthesized-image stream) at the same sampled locations.
torch::Tensor patch_difficulty_infonce(const FeatureTapSet& anchor_taps, const FeatureTapSet& positive_taps,
                                       ProjectionHeads& heads, const std::vector<int>& tap_indices,
                                       const PatchSamplingPlan& plan, const DifficultyMap& map,
                                       torch::Generator& gen, double tau);

/// Same as above with explicit locations (used by tests and oracles).
torch::Tensor patch_difficulty_infonce(const FeatureTapSet& anchor_taps, const FeatureTapSet& positive_taps,
                                       ProjectionHeads& heads,
                                       const std::map<int, std::vector<GridPoint>>& locations,
                                       const DifficultyMap& map, double tau);

/// 1/2 mean((real-1)^2) + 1/2 mean(fake^2)
torch::Tensor lsgan_d(const torch::Tensor& real_scores, const torch::Tensor& fake_scores);
/// mean((fake-1)^2)
torch::Tensor lsgan_g(const torch::Tensor& fake_scores);

/// mean(map * |teacher - student|); the teacher output is detached (pseudo ground truth).
torch::Tensor image_distill(const torch::Tensor& map, const torch::Tensor& teacher_out, const torch::Tensor& student_out);

/// (1/K) sum_k mean(m_k * |f_k^T - f_k^S|) over the distill taps; teacher features detached.
torch::Tensor feature_distill(const DifficultyMap& map, const FeatureTapSet& teacher_taps,
                              const FeatureTapSet& student_taps, const std::vector<int>& distill_indices);

template <typename T>
T teacher_total(const T& pid, const T& pad, const T& gan, const LossWeights& w) {
  return w.pid * pid + w.pad * pad + w.gan * gan;
}

template <typename T>
T student_total(const T& id, const T& fd, const T& pad, const T& gan, const LossWeights& w) {
  return w.id * id + w.fd * fd + w.pad_student * pad + w.gan_student * gan;
}

/// (1 - t/T); throws unless 0 <= t < T.
double schedule_weight(int epoch, int total_epochs);

template <typename T>
T combined_objective(const T& teacher, const T& student, int epoch, int total_epochs) {
  return teacher + schedule_weight(epoch, total_epochs) * student;
}

}  // namespace ds3
