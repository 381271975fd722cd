// ds3: data generation, training, evaluation and sweeps on phantom data.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ds3/sweep.hpp"
#include "ds3/trainer.hpp"

namespace fs = std::filesystem;
using namespace ds3;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "runs/default";
};

TrainConfig resolve(const Globals& g) {
  TrainConfig c = g.config.empty() ? TrainConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  return c;
}

const std::vector<MultimodalSample>& pick_subset(const DatasetSplit& s, const std::string& name) {
  if (name == "test") return s.test;
  if (name == "val") return s.val;
  if (name == "paired") return s.paired;
  throw CLI::ValidationError("--split", "expected test, val or paired");
}

std::string sample_name(const MultimodalSample& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "p%03d_s%02d", s.patient_id, s.slice_id);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"DS3 semi-supervised multimodal synthesis on phantoms"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Global seed (overrides the config)");
  app.add_option("--config", g.config, "JSON training config");
  app.add_option("--out-dir", g.out_dir, "Output directory");

  auto* gen = app.add_subcommand("gen-data", "Generate a phantom split and write it to disk");
  int patients = 40, slices = 8, size = 64;
  double fraction = 0.05;
  gen->add_option("--patients", patients)->check(CLI::Range(10, 100000));
  gen->add_option("--slices", slices)->check(CLI::PositiveNumber);
  gen->add_option("--size", size)->check(CLI::Range(kMinCanvas, 4096));
  gen->add_option("--paired-fraction", fraction);
  std::string gen_out;
  gen->add_option("--out", gen_out, "Dataset directory (default: --out-dir)");

  auto* train = app.add_subcommand("train", "Stage 1 + stage 2 training");
  int stage1 = 0, stage2 = 0;
  train->add_option("--stage1-epochs", stage1);
  train->add_option("--stage2-epochs", stage2);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint and export error maps");
  std::string ckpt, split_name = "test";
  bool foreground = false, maps = false;
  eval->add_option("--checkpoint", ckpt, "Checkpoint (default: <out-dir>/final_student.ckpt)");
  eval->add_option("--split", split_name, "test | val | paired");
  eval->add_flag("--foreground", foreground, "Metrics over the foreground only");
  eval->add_flag("--error-maps", maps, "Write |y - y_hat| * 255 as PGM per sample");

  auto* sweep = app.add_subcommand("sweep", "Paired-only vs semi-supervised over paired fractions");
  std::vector<double> fractions{0.05, 0.1, 0.5, 1.0};
  sweep->add_option("--fractions", fractions)->delimiter(',');

  auto* dump = app.add_subcommand("dump-difficulty", "Write the difficulty map per validation sample (value * 127.5)");
  dump->add_option("--checkpoint", ckpt, "Checkpoint (default: <out-dir>/final_student.ckpt)");

  auto* layers = app.add_subcommand("layers", "Print the generator layer enumeration (tap indices)");

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out(g.out_dir);
    TrainConfig c = resolve(g);

    if (*gen) {
      c.data.n_patients = patients;
      c.data.slices_per_patient = slices;
      c.data.canvas_size = size;
      c.data.paired_fraction = fraction;
      c.data.data_dir.clear();
      const auto split = make_split(c);
      const fs::path dest = gen_out.empty() ? out : fs::path(gen_out);
      save_split(dest, split);
      std::printf("wrote %zu paired, %zu unpaired, %zu val, %zu test samples to %s (split %016llx)\n",
                  split.paired.size(), split.unpaired.size(), split.val.size(), split.test.size(),
                  dest.string().c_str(), static_cast<unsigned long long>(split_hash(split)));
    } else if (*train) {
      if (stage1 > 0) c.stage1_epochs = stage1;
      if (stage2 > 0) c.stage2_epochs = stage2;
      const auto run = run_training(c, out);
      std::printf("stage 1 returned epoch %d (convergence %d); artifacts in %s\n", run.stage1.returned_epoch,
                  run.stage1.convergence_epoch, out.string().c_str());
    } else if (*eval) {
      Network net = load_checkpoint(ckpt.empty() ? out / "final_student.ckpt" : fs::path(ckpt));
      const auto split = make_split(c);
      const auto& samples = pick_subset(split, split_name);
      auto report = evaluate(net, samples, foreground || c.foreground_metrics);
      report.config_hash = c.hash();
      char id[32];
      std::snprintf(id, sizeof(id), "%016llx", static_cast<unsigned long long>(parameter_hash(*net)));
      report.checkpoint_id = id;
      report.split_name = split_name;
      write_report_csv(out / ("metrics_" + split_name + ".csv"), report);
      if (maps)
        for (const auto& s : samples)
          write_pgm(out / "error_maps" / (sample_name(s) + ".pgm"), error_map(*s.target, predict(net, s)));
      std::printf("split=%s n=%zu ssim=%.4f psnr=%.3f mse=%.6f identical=%d config=%s checkpoint=%s\n",
                  split_name.c_str(), report.samples.size(), report.mean_ssim, report.mean_psnr, report.mean_mse,
                  report.n_identical, report.config_hash.c_str(), report.checkpoint_id.c_str());
    } else if (*sweep) {
      const auto rows = run_sweep(c, fractions);
      fs::create_directories(out);
      std::ofstream(out / "sweep.csv") << sweep_csv(rows);
      const auto table = sweep_table(rows);
      std::ofstream(out / "sweep.txt") << table;
      std::cout << table;
    } else if (*layers) {
      std::cout << layer_table_markdown(c.net.generator);
    } else if (*dump) {
      Network net = load_checkpoint(ckpt.empty() ? out / "final_student.ckpt" : fs::path(ckpt));
      const auto split = make_split(c);
      torch::NoGradGuard guard;
      for (const auto& s : split.val) {
        const Batch b = make_batch(std::vector<const MultimodalSample*>{&s});
        auto scores = net->discriminator->forward(net->generator->forward(b.sources).image);
        auto m = compute_difficulty_map(scores, b.mask, c.difficulty_clamp).full[0][0].contiguous();
        Image img(m.size(0), m.size(1));
        std::copy_n(m.data_ptr<float>(), img.size(), img.data());
        write_pgm(out / "difficulty" / (sample_name(s) + ".pgm"), to_gray(img, 127.5));
      }
      std::printf("wrote %zu difficulty maps to %s\n", split.val.size(), (out / "difficulty").string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
