#include "ds3/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ds3 {

void LossWeights::validate() const {
  for (double v : {pid, pad, gan, id, fd, pad_student, gan_student})
    if (!(v >= 0.0)) throw std::invalid_argument("LossWeights: weights must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("LossWeights: tau must be > 0");
}

void LossBundle::finalize(const LossWeights& w) {
  total_teacher = teacher_total(pid, pad, gan_g, w);
  total_student = student_total(id, fd, pad_s, gan_g_s, w) + w.pid * pid_s;
  combined = total_teacher + schedule_weight * total_student;
}

bool LossBundle::all_finite() const {
  for (double v : {pid, pad, gan_g, gan_d, id, fd, pad_s, gan_g_s, gan_d_s, pid_s, total_teacher, total_student, combined})
    if (!std::isfinite(v)) return false;
  return true;
}

void PatchSamplingPlan::validate() const {
  if (count < 2) throw std::invalid_argument("PatchSamplingPlan: count must be >= 2 (need a negative)");
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

// Broadcasts a [B,1,H,W] map against [B,C,H,W]; rejects anything else.
void require_map_compatible(const torch::Tensor& map, const torch::Tensor& x, const char* what) {
  if (map.dim() != x.dim()) throw std::invalid_argument(std::string(what) + ": map rank mismatch");
  for (int64_t d = 0; d < x.dim(); ++d)
    if (map.size(d) != x.size(d) && map.size(d) != 1)
      throw std::invalid_argument(std::string(what) + ": map shape mismatch");
}

}  // namespace

torch::Tensor pixelwise_difficulty_l1(const torch::Tensor& map, const torch::Tensor& y, const torch::Tensor& y_hat) {
  require_same_shape(y, y_hat, "pixelwise_difficulty_l1");
  require_map_compatible(map, y_hat, "pixelwise_difficulty_l1");
  return (map.detach() * (y - y_hat).abs()).mean();
}

torch::Tensor weighted_infonce(const torch::Tensor& anchors, const torch::Tensor& positives,
                               const torch::Tensor& weights, double tau) {
  if (anchors.dim() != 3) throw std::invalid_argument("weighted_infonce: anchors must be [B, S, D]");
  require_same_shape(anchors, positives, "weighted_infonce");
  if (weights.dim() != 2 || weights.size(0) != anchors.size(0) || weights.size(1) != anchors.size(1))
    throw std::invalid_argument("weighted_infonce: weights must be [B, S]");
  if (anchors.size(1) < 2) throw std::invalid_argument("weighted_infonce: need at least one negative");
  // logits[b, s, j] = z_s . z+_j / tau; the diagonal holds the positive pair.
  auto logits = torch::bmm(anchors, positives.transpose(1, 2)) / tau;
  auto nll = -torch::log_softmax(logits, 2).diagonal(0, 1, 2);  // [B, S]
  return (weights.detach() * nll).mean();
}

std::vector<GridPoint> sample_locations(int64_t height, int64_t width, int count, torch::Generator& gen) {
  if (count > height * width)
    throw std::invalid_argument("sample_locations: " + std::to_string(count) + " locations requested from a " +
                                std::to_string(height) + "x" + std::to_string(width) + " grid");
  auto perm = torch::randperm(height * width, gen, torch::kLong);
  auto acc = perm.accessor<int64_t, 1>();
  std::vector<GridPoint> pts(count);
  for (int i = 0; i < count; ++i) pts[i] = {acc[i] / width, acc[i] % width};
  return pts;
}

torch::Tensor patch_difficulty_infonce(const FeatureTapSet& anchor_taps, const FeatureTapSet& positive_taps,
                                       ProjectionHeads& heads,
                                       const std::map<int, std::vector<GridPoint>>& locations,
                                       const DifficultyMap& map, double tau) {
  auto anchors = extract_patch_embeddings(anchor_taps, heads, locations);
  auto positives = extract_patch_embeddings(positive_taps, heads, locations);
  torch::Tensor total;
  for (const auto& [tap, points] : locations) {
    const auto& level = map.level(tap);
    const auto& feat = anchor_taps.at(tap);
    if (level.size(2) != feat.size(2) || level.size(3) != feat.size(3))
      throw std::invalid_argument("patch_difficulty_infonce: pyramid level for tap " + std::to_string(tap) +
                                  " does not match the tap's grid");
    std::vector<int64_t> flat;
    for (const auto& p : points) flat.push_back(p.row * feat.size(3) + p.col);
    auto w = level.flatten(1).index_select(1, torch::tensor(flat, torch::kLong));  // [B, S]
    auto term = weighted_infonce(anchors.at(tap), positives.at(tap), w.to(anchors.at(tap).dtype()), tau);
    total = total.defined() ? total + term : term;
  }
  if (!total.defined()) throw std::invalid_argument("patch_difficulty_infonce: no taps");
  return total;
}

torch::Tensor patch_difficulty_infonce(const FeatureTapSet& anchor_taps, const FeatureTapSet& positive_taps,
                                       ProjectionHeads& heads, const std::vector<int>& tap_indices,
                                       const PatchSamplingPlan& plan, const DifficultyMap& map,
                                       torch::Generator& gen, double tau) {
  plan.validate();
  std::map<int, std::vector<GridPoint>> locations;
  for (int tap : tap_indices) {
    const auto& f = anchor_taps.at(tap);
    locations[tap] = sample_locations(f.size(2), f.size(3), plan.count, gen);
  }
  return patch_difficulty_infonce(anchor_taps, positive_taps, heads, locations, map, tau);
}

torch::Tensor lsgan_d(const torch::Tensor& real_scores, const torch::Tensor& fake_scores) {
  return 0.5 * (real_scores - 1.0).pow(2).mean() + 0.5 * fake_scores.pow(2).mean();
}

torch::Tensor lsgan_g(const torch::Tensor& fake_scores) { return (fake_scores - 1.0).pow(2).mean(); }

torch::Tensor image_distill(const torch::Tensor& map, const torch::Tensor& teacher_out, const torch::Tensor& student_out) {
  require_same_shape(teacher_out, student_out, "image_distill");
  require_map_compatible(map, student_out, "image_distill");
  return (map.detach() * (teacher_out.detach() - student_out).abs()).mean();
}

torch::Tensor feature_distill(const DifficultyMap& map, const FeatureTapSet& teacher_taps,
                              const FeatureTapSet& student_taps, const std::vector<int>& distill_indices) {
  if (distill_indices.empty()) throw std::invalid_argument("feature_distill: no distill taps");
  torch::Tensor sum;
  for (int k : distill_indices) {
    if (!teacher_taps.contains(k))
      throw std::out_of_range("feature_distill: teacher taps lack layer " + std::to_string(k));
    if (!student_taps.contains(k))
      throw std::out_of_range("feature_distill: student taps lack layer " + std::to_string(k));
    const auto& ft = teacher_taps.at(k);
    const auto& fs = student_taps.at(k);
    require_same_shape(ft, fs, "feature_distill");
    const auto& m = map.level(k);
    require_map_compatible(m, fs, "feature_distill");
    auto term = (m.detach() * (ft.detach() - fs).abs()).mean();
    sum = sum.defined() ? sum + term : term;
  }
  return sum / static_cast<double>(distill_indices.size());
}

double schedule_weight(int epoch, int total_epochs) {
  if (total_epochs < 1) throw std::invalid_argument("schedule_weight: total_epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs)
    throw std::out_of_range("schedule_weight: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(total_epochs) + ")");
  return 1.0 - static_cast<double>(epoch) / total_epochs;
}

}  // namespace ds3
