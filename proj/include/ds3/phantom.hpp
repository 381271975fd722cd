#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ds3/image.hpp"

namespace ds3 {

inline constexpr int kNumSources = 3;
inline constexpr int kMinCanvas = 16;

struct Ellipse {
  double cx = 0, cy = 0;
  double rx = 0, ry = 0;
  double angle = 0;

  bool contains(double x, double y) const;
  bool operator==(const Ellipse&) const = default;
};

/// Star-shaped region: r(theta) = radius * (1 + irregularity * sum_k amp_k cos((k+2) theta + phase_k)).
struct Blob {
  double cx = 0, cy = 0;
  double radius = 0;
  double irregularity = 0;  // in [0, 1]
  std::array<double, 3> amp{};
  std::array<double, 3> phase{};

  bool contains(double x, double y) const;
  bool operator==(const Blob&) const = default;
};

struct Phantom {
  int canvas_size = 64;
  Ellipse brain;
  Blob tumor;
  std::optional<Blob> core;
  std::uint64_t texture_seed = 0;

  bool operator==(const Phantom&) const = default;
};

// Rasterized regions. Nesting is enforced at rasterization time:
// core = core blob AND tumor, tumor = tumor blob AND brain.
Mask brain_mask(const Phantom& p);
Mask tumor_mask(const Phantom& p);
Mask core_mask(const Phantom& p);

struct MultimodalSample {
  std::array<Image, kNumSources> sources;  // T1, T2, FLAIR
  std::optional<Image> target;             // T1ce
  Mask foreground_mask;
  int patient_id = 0;
  int slice_id = 0;
  bool has_core = false;

  int height() const { return static_cast<int>(foreground_mask.rows()); }
  int width() const { return static_cast<int>(foreground_mask.cols()); }
};

Phantom generate_phantom(std::uint64_t seed, int canvas_size = 64);

/// Renders T1/T2/FLAIR sources and the T1ce target. Ids are left at zero.
MultimodalSample render_modalities(const Phantom& phantom);

/// Piecewise-linear intensity transfer over the latent tissue value t in [0,1],
/// knots at t = 0, 0.5, 1.
struct TransferFunction {
  std::array<float, 3> knots;
  float operator()(float t) const;
};

enum class Modality : int { T1 = 0, T2 = 1, Flair = 2, T1ce = 3 };
enum class Region : int { Brain = 0, Tumor = 1, Core = 2 };

const TransferFunction& transfer_function(Modality m, Region r);

struct DatasetSplit {
  std::vector<MultimodalSample> paired;
  std::vector<MultimodalSample> unpaired;
  std::vector<MultimodalSample> val;
  std::vector<MultimodalSample> test;
};

struct SplitCounts {
  int train = 0, val = 0, test = 0, paired = 0;
};

/// 7:1:2 patient partition and the paired-patient count for a given fraction.
SplitCounts split_counts(int n_patients, double paired_fraction);

std::uint64_t sample_seed(std::uint64_t global_seed, int patient_id, int slice_id);

DatasetSplit build_split(int n_patients, int slices_per_patient, double paired_fraction,
                         std::uint64_t seed, int canvas_size = 64);

/// Oversamples the minority has_core class (with replacement) until both counts match.
void balance_core(std::vector<MultimodalSample>& samples, std::uint64_t seed);

/// Order-sensitive digest of (patient, slice, has_target) over all four subsets.
std::uint64_t split_hash(const DatasetSplit& split);

// On-disk layout: <dir>/{paired,unpaired,val,test}/NNNNN.{f32,json}. The .f32 file
// holds little-endian float32, channel-major (sources then target), row-major pixels.
void save_sample(const std::filesystem::path& stem, const MultimodalSample& s);
MultimodalSample load_sample(const std::filesystem::path& stem);
void save_split(const std::filesystem::path& dir, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& dir);

}  // namespace ds3
