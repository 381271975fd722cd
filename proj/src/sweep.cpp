#include "ds3/sweep.hpp"

#include <cstdio>
#include <stdexcept>

namespace ds3 {

std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<double>& fractions) {
  if (fractions.empty()) throw std::invalid_argument("run_sweep: fractions must be nonempty");
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    TrainConfig c = base;
    c.data.paired_fraction = f;
    c.data.data_dir.clear();
    const DatasetSplit split = make_split(c);
    const auto hash = split_hash(split);
    const auto stage1 = train_stage1(c, split);

    TrainConfig sup = c;
    sup.paired_only = true;
    auto baseline = train_stage2(sup, split, stage1.teacher);
    SweepRow row{f, "paired_only", c.seed, hash, evaluate(baseline.student, split.test, c.foreground_metrics)};
    rows.push_back(row);

    if (split.unpaired.empty()) {
      row.variant = "semi=paired_only";
      rows.push_back(row);
      continue;
    }
    TrainConfig semi = c;
    semi.paired_only = false;
    auto full = train_stage2(semi, split, stage1.teacher);
    rows.push_back({f, "semi", c.seed, hash, evaluate(full.student, split.test, c.foreground_metrics)});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "fraction,variant,seed,split_hash,n,ssim,psnr,mse,n_identical\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g,%s,%llu,%016llx,%zu,%.9g,%.9g,%.9g,%d\n", r.fraction, r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), static_cast<unsigned long long>(r.split_hash),
                  r.report.samples.size(), r.report.mean_ssim, r.report.mean_psnr, r.report.mean_mse,
                  r.report.n_identical);
    out += buf;
  }
  return out;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%-9s %-17s %-6s %-8s %-9s %-10s\n", "fraction", "variant", "seed", "SSIM",
                "PSNR(dB)", "MSE");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-9.3f %-17s %-6llu %-8.4f %-9.3f %-10.6f\n", r.fraction, r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.report.mean_ssim, r.report.mean_psnr,
                  r.report.mean_mse);
    out += buf;
  }
  return out;
}

}  // namespace ds3
