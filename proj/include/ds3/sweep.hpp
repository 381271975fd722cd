#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ds3/metrics.hpp"
#include "ds3/trainer.hpp"

namespace ds3 {

struct SweepRow {
  double fraction = 0;
  std::string variant;  // "paired_only" or "semi"; "semi=paired_only" when no unpaired data exists
  std::uint64_t seed = 0;
  std::uint64_t split_hash = 0;
  MetricReport report;
};

/// For each fraction: one shared stage-1 teacher, then a paired-only and a
/// semi-supervised stage 2 on the same split; students are scored on the test set.
std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<double>& fractions);

/// fraction,variant,seed,split_hash,n,ssim,psnr,mse,n_identical
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace ds3
