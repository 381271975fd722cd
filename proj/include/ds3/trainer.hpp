#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "ds3/difficulty.hpp"
#include "ds3/losses.hpp"
#include "ds3/metrics.hpp"
#include "ds3/nets.hpp"
#include "ds3/phantom.hpp"
#include "ds3/rng.hpp"

namespace ds3 {

struct DataConfig {
  int n_patients = 40;
  int slices_per_patient = 8;
  int canvas_size = 64;
  double paired_fraction = 0.05;
  std::string data_dir;  // when set, the split is loaded from disk instead of generated
};

struct TrainConfig {
  DataConfig data;
  NetworkSpec net;
  LossWeights weights;
  int patches_per_tap = 64;
  double difficulty_clamp = kDefaultDifficultyClamp;

  int stage1_epochs = 10;
  int stage2_epochs = 30;  // T
  int batch_size = 6;      // stage 2 splits it evenly into paired and unpaired halves
  double lr_g = 6e-4;
  double lr_mlp = 6e-4;
  double lr_d = 3e-4;
  double teacher_lr_attenuation = 0.2;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double weight_decay = 0.01;

  // Stage-1 checkpoint rule: plateau = `plateau_patience` consecutive epochs without a
  // relative val-pid improvement above `plateau_tolerance`; keep epoch e* - lookback.
  int plateau_patience = 3;
  double plateau_tolerance = 0.005;
  int checkpoint_lookback = 5;

  std::uint64_t seed = 1;  // data, init, patch-sampling and order streams derive from it

  bool disable_map = false;
  bool disable_fd = false;
  bool disable_id = false;
  bool paired_only = false;
  bool freeze_teacher = false;
  bool distill_on_discriminator = false;  // reserved; only generator taps are supported
  bool foreground_metrics = false;

  int max_steps_per_epoch = 0;  // 0 = full epochs

  void validate() const;
  /// Stable digest of the serialized config.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_config(const std::filesystem::path& path);

enum class Stream : std::uint64_t { Data = 1, Init = 2, Patch = 3, Order = 4 };
std::uint64_t stream_seed(std::uint64_t seed, Stream s);

struct LearningRates {
  double g_teacher = 0, mlp_teacher = 0, d_teacher = 0;
  double g_student = 0, mlp_student = 0, d_student = 0;
};

/// lr(t) for the given stage: linear decay to zero over the stage's epochs, teacher
/// rates attenuated in stage 2.
LearningRates learning_rates(const TrainConfig& c, int stage, int epoch);

struct LogRow {
  int step = 0;
  int stage = 1;
  int epoch = 0;
  LossBundle losses;
  LearningRates lr;
};

class MetricsLog {
 public:
  void append(const LogRow& row) { rows_.push_back(row); }
  const std::vector<LogRow>& rows() const { return rows_; }
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
  static std::string header();

 private:
  std::vector<LogRow> rows_;
};

struct Batch {
  torch::Tensor sources;  // [B, 3, H, W]
  torch::Tensor target;   // [B, 1, H, W] or undefined
  torch::Tensor mask;     // [B, 1, H, W], 1 = foreground
};

Batch make_batch(const std::vector<const MultimodalSample*>& samples);
Batch make_batch(const std::vector<MultimodalSample>& samples);

/// Seeded per-subset cycling order: reshuffles whenever a pass completes.
class SampleCycler {
 public:
  SampleCycler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t k);

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng rng_;
};

struct OptimizerSet {
  std::unique_ptr<torch::optim::AdamW> g, mlp, d;
  void set_lr(double lr_g, double lr_mlp, double lr_d);
};

OptimizerSet make_optimizers(Network& net, const TrainConfig& c);

struct StepInfo {
  int stage = 1;
  int epoch = 0;
  int step = 0;
  int n_paired = 0;
  int n_unpaired = 0;
  const DifficultyMap* teacher_map = nullptr;
  const DifficultyMap* student_map = nullptr;
};

/// Optional observation points used by tests and diagnostics.
struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(Network& teacher, Network& student)> on_stage2_start;
};

struct Stage1Result {
  Network teacher{nullptr};
  std::vector<double> val_pid;  // per epoch (index 0 = epoch 1)
  int convergence_epoch = 0;    // 0 when no plateau was detected
  int returned_epoch = 0;       // 1-based
};

struct Stage2Result {
  Network student{nullptr};
  Network teacher{nullptr};
};

/// Picks the 1-based epoch whose weights stage 1 returns.
struct ConvergencePick {
  int convergence_epoch = 0;
  int returned_epoch = 0;
};
ConvergencePick pick_checkpoint_epoch(const std::vector<double>& val_pid, int patience, double tolerance,
                                      int lookback);

/// Builds freshly initialized networks from the config's init stream.
Network build_network(const TrainConfig& c);

Stage1Result train_stage1(const TrainConfig& c, const DatasetSplit& split, MetricsLog* log = nullptr,
                          const TrainHooks& hooks = {});

Stage2Result train_stage2(const TrainConfig& c, const DatasetSplit& split, const Network& teacher_checkpoint,
                          MetricsLog* log = nullptr, const TrainHooks& hooks = {});

/// Student (or any network) inference: [B,3,H,W] -> [B,1,H,W] in [0,1].
torch::Tensor predict(Network& net, const torch::Tensor& sources);
Image predict(Network& net, const MultimodalSample& sample);

/// Mean plain L1 (map = 1) of a network over samples with targets.
double validation_pid(Network& net, const std::vector<MultimodalSample>& samples);

MetricReport evaluate(Network& net, const std::vector<MultimodalSample>& samples, bool foreground_only = false);

DatasetSplit make_split(const TrainConfig& c);

/// Full run: split, stage 1, stage 2, checkpoints + metrics CSV + resolved config in out_dir.
struct RunArtifacts {
  Stage1Result stage1;
  Stage2Result stage2;
  MetricsLog log;
};
RunArtifacts run_training(const TrainConfig& c, const std::filesystem::path& out_dir);

}  // namespace ds3
