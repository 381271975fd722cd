#include "ds3/phantom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "ds3/rng.hpp"

namespace ds3 {
namespace {

constexpr double kCoreProbability = 0.4;
constexpr float kNoiseAmplitude = 0.03f;
constexpr float kMinForeground = 0.02f;
constexpr int kNoiseCell = 8;

// Rows: T1, T2, FLAIR, T1ce. Columns: brain, tumor, core.
const TransferFunction kTransfer[4][3] = {
    {{{0.30f, 0.45f, 0.55f}}, {{0.25f, 0.30f, 0.35f}}, {{0.20f, 0.24f, 0.28f}}},
    {{{0.20f, 0.30f, 0.40f}}, {{0.70f, 0.78f, 0.85f}}, {{0.50f, 0.55f, 0.60f}}},
    {{{0.25f, 0.33f, 0.40f}}, {{0.80f, 0.85f, 0.90f}}, {{0.60f, 0.65f, 0.70f}}},
    {{{0.35f, 0.48f, 0.60f}}, {{0.40f, 0.45f, 0.50f}}, {{0.88f, 0.93f, 0.98f}}},
};

Blob random_blob(Rng& rng, double cx, double cy, double radius) {
  Blob b;
  b.cx = cx;
  b.cy = cy;
  b.radius = radius;
  b.irregularity = uniform01(rng);
  for (int k = 0; k < 3; ++k) {
    b.amp[k] = uniform(rng, -0.15, 0.15);
    b.phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  return b;
}

template <typename Pred>
Mask rasterize(int n, Pred&& inside) {
  Mask m(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) m(y, x) = inside(x + 0.5, y + 0.5) ? 1 : 0;
  return m;
}

Image texture_field(std::uint64_t seed, int n) {
  Rng rng(mix_seed(seed, 0x7e47));
  struct Wave {
    double amp, freq, dx, dy, phase;
  };
  std::array<Wave, 4> waves;
  double total = 0;
  for (auto& w : waves) {
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    w = {uniform(rng, 0.3, 1.0), uniform(rng, 1.0, 4.0), std::cos(theta), std::sin(theta),
         uniform(rng, 0.0, 2.0 * std::numbers::pi)};
    total += w.amp;
  }
  Image t(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (const auto& w : waves)
        s += w.amp * std::sin(2.0 * std::numbers::pi * w.freq * (x * w.dx + y * w.dy) / n + w.phase);
      t(y, x) = static_cast<float>(0.5 + 0.5 * s / total);
    }
  return t;
}

// Uniform [-1,1] lattice every kNoiseCell pixels, bilinearly interpolated.
Image smooth_noise(std::uint64_t seed, int n) {
  Rng rng(seed);
  const int cells = n / kNoiseCell + 2;
  Image lattice(cells, cells);
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) lattice(i, j) = static_cast<float>(uniform(rng, -1.0, 1.0));
  Image out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double gy = static_cast<double>(y) / kNoiseCell;
      const double gx = static_cast<double>(x) / kNoiseCell;
      const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
      const double fy = gy - iy, fx = gx - ix;
      const double v = (1 - fy) * ((1 - fx) * lattice(iy, ix) + fx * lattice(iy, ix + 1)) +
                       fy * ((1 - fx) * lattice(iy + 1, ix) + fx * lattice(iy + 1, ix + 1));
      out(y, x) = static_cast<float>(v);
    }
  return out;
}

std::uint32_t swap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void write_le_floats(std::ofstream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = swap32(std::bit_cast<std::uint32_t>(data[i]));
      os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
}

void read_le_floats(std::ifstream& is, float* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i)
      data[i] = std::bit_cast<float>(swap32(std::bit_cast<std::uint32_t>(data[i])));
  }
}

const char* const kSubsets[] = {"paired", "unpaired", "val", "test"};

}  // namespace

bool Ellipse::contains(double x, double y) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = ((x - cx) * c + (y - cy) * s) / rx;
  const double v = (-(x - cx) * s + (y - cy) * c) / ry;
  return u * u + v * v <= 1.0;
}

bool Blob::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  const double theta = std::atan2(dy, dx);
  double wobble = 0;
  for (int k = 0; k < 3; ++k) wobble += amp[k] * std::cos((k + 2) * theta + phase[k]);
  const double r = radius * (1.0 + irregularity * wobble);
  return dx * dx + dy * dy <= r * r;
}

float TransferFunction::operator()(float t) const {
  t = std::clamp(t, 0.0f, 1.0f);
  if (t <= 0.5f) return knots[0] + (knots[1] - knots[0]) * (t / 0.5f);
  return knots[1] + (knots[2] - knots[1]) * ((t - 0.5f) / 0.5f);
}

const TransferFunction& transfer_function(Modality m, Region r) {
  return kTransfer[static_cast<int>(m)][static_cast<int>(r)];
}

Phantom generate_phantom(std::uint64_t seed, int canvas_size) {
  if (canvas_size < kMinCanvas)
    throw std::invalid_argument("generate_phantom: canvas_size " + std::to_string(canvas_size) +
                                " is too small for nested regions (minimum " +
                                std::to_string(kMinCanvas) + ")");
  Rng rng(splitmix64(seed));
  const double n = canvas_size;
  Phantom p;
  p.canvas_size = canvas_size;

  // Brain area fraction pi*rx*ry/n^2 lies in [0.34, 0.55].
  p.brain.cx = n / 2 + uniform(rng, -0.04, 0.04) * n;
  p.brain.cy = n / 2 + uniform(rng, -0.04, 0.04) * n;
  p.brain.rx = uniform(rng, 0.33, 0.42) * n;
  p.brain.ry = uniform(rng, 0.33, 0.42) * n;
  p.brain.angle = uniform(rng, 0.0, std::numbers::pi);

  // Tumor centre at normalized ellipse radius <= 0.45.
  const double rho = 0.45 * std::sqrt(uniform01(rng));
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double c = std::cos(p.brain.angle), s = std::sin(p.brain.angle);
  const double u = rho * std::cos(phi) * p.brain.rx, v = rho * std::sin(phi) * p.brain.ry;
  const double tcx = p.brain.cx + u * c - v * s;
  const double tcy = p.brain.cy + u * s + v * c;
  p.tumor = random_blob(rng, tcx, tcy, uniform(rng, 0.08, 0.15) * n);

  const bool with_core = uniform01(rng) < kCoreProbability;
  const double off_r = 0.3 * p.tumor.radius * std::sqrt(uniform01(rng));
  const double off_a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  Blob core = random_blob(rng, tcx + off_r * std::cos(off_a), tcy + off_r * std::sin(off_a),
                          uniform(rng, 0.35, 0.6) * p.tumor.radius);
  if (with_core) p.core = core;

  p.texture_seed = rng();
  return p;
}

Mask brain_mask(const Phantom& p) {
  return rasterize(p.canvas_size, [&](double x, double y) { return p.brain.contains(x, y); });
}

Mask tumor_mask(const Phantom& p) {
  return rasterize(p.canvas_size, [&](double x, double y) {
    return p.brain.contains(x, y) && p.tumor.contains(x, y);
  });
}

Mask core_mask(const Phantom& p) {
  if (!p.core) return Mask::Zero(p.canvas_size, p.canvas_size);
  return rasterize(p.canvas_size, [&](double x, double y) {
    return p.brain.contains(x, y) && p.tumor.contains(x, y) && p.core->contains(x, y);
  });
}

MultimodalSample render_modalities(const Phantom& phantom) {
  const int n = phantom.canvas_size;
  const Mask brain = brain_mask(phantom);
  const Mask tumor = tumor_mask(phantom);
  const Mask core = core_mask(phantom);
  const Image latent = texture_field(phantom.texture_seed, n);

  auto render = [&](Modality m) {
    const Image noise = smooth_noise(mix_seed(phantom.texture_seed, static_cast<int>(m) + 1), n);
    Image img = Image::Zero(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        if (!brain(y, x)) continue;
        const Region r = core(y, x) ? Region::Core : tumor(y, x) ? Region::Tumor : Region::Brain;
        const float v = transfer_function(m, r)(latent(y, x)) + kNoiseAmplitude * noise(y, x);
        img(y, x) = std::clamp(v, kMinForeground, 1.0f);
      }
    return img;
  };

  MultimodalSample s;
  for (int c = 0; c < kNumSources; ++c) s.sources[c] = render(static_cast<Modality>(c));
  s.target = render(Modality::T1ce);
  s.foreground_mask = Mask::Zero(n, n);
  for (int c = 0; c < kNumSources; ++c)
    s.foreground_mask = (s.foreground_mask != 0 || s.sources[c] > 0.0f).cast<std::uint8_t>();
  s.has_core = (core != 0).any();
  return s;
}

SplitCounts split_counts(int n_patients, double paired_fraction) {
  SplitCounts c;
  c.train = static_cast<int>(std::lround(0.7 * n_patients));
  c.val = static_cast<int>(std::lround(0.1 * n_patients));
  c.test = n_patients - c.train - c.val;
  // The epsilon guards against products like 0.1 * 30 = 3.0000000000000004.
  c.paired = std::clamp(static_cast<int>(std::ceil(paired_fraction * c.train - 1e-9)), 1, c.train);
  return c;
}

std::uint64_t sample_seed(std::uint64_t global_seed, int patient_id, int slice_id) {
  return mix_seed(mix_seed(global_seed, static_cast<std::uint64_t>(patient_id)),
                  static_cast<std::uint64_t>(slice_id));
}

void balance_core(std::vector<MultimodalSample>& samples, std::uint64_t seed) {
  std::vector<std::size_t> with, without;
  for (std::size_t i = 0; i < samples.size(); ++i) (samples[i].has_core ? with : without).push_back(i);
  if (with.empty() || without.empty() || with.size() == without.size()) return;
  const auto& minority = with.size() < without.size() ? with : without;
  const std::size_t deficit = std::max(with.size(), without.size()) - minority.size();
  Rng rng(mix_seed(seed, 0xba1a));
  samples.reserve(samples.size() + deficit);
  for (std::size_t k = 0; k < deficit; ++k)
    samples.push_back(samples[minority[uniform_index(rng, minority.size())]]);
}

DatasetSplit build_split(int n_patients, int slices_per_patient, double paired_fraction,
                         std::uint64_t seed, int canvas_size) {
  if (n_patients < 10)
    throw std::invalid_argument("build_split: need at least 10 patients, got " +
                                std::to_string(n_patients));
  if (!(paired_fraction > 0.0 && paired_fraction <= 1.0))
    throw std::invalid_argument("build_split: paired_fraction must lie in (0, 1]");
  if (slices_per_patient < 1) throw std::invalid_argument("build_split: slices_per_patient < 1");

  const SplitCounts counts = split_counts(n_patients, paired_fraction);
  std::vector<int> patients(n_patients);
  for (int i = 0; i < n_patients; ++i) patients[i] = i;
  Rng rng(mix_seed(seed, 0x5b117));
  shuffle(patients, rng);

  auto render_patient = [&](int pid, std::vector<MultimodalSample>& out, bool keep_target) {
    for (int sl = 0; sl < slices_per_patient; ++sl) {
      MultimodalSample s = render_modalities(generate_phantom(sample_seed(seed, pid, sl), canvas_size));
      s.patient_id = pid;
      s.slice_id = sl;
      if (!keep_target) s.target.reset();
      out.push_back(std::move(s));
    }
  };

  DatasetSplit split;
  int k = 0;
  for (; k < counts.paired; ++k) render_patient(patients[k], split.paired, true);
  for (; k < counts.train; ++k) render_patient(patients[k], split.unpaired, false);
  for (; k < counts.train + counts.val; ++k) render_patient(patients[k], split.val, true);
  for (; k < n_patients; ++k) render_patient(patients[k], split.test, true);

  balance_core(split.paired, mix_seed(seed, 1));
  balance_core(split.unpaired, mix_seed(seed, 2));
  return split;
}

std::uint64_t split_hash(const DatasetSplit& split) {
  std::uint64_t h = 0x1234;
  for (const auto* subset : {&split.paired, &split.unpaired, &split.val, &split.test}) {
    h = mix_seed(h, subset->size());
    for (const auto& s : *subset) {
      h = mix_seed(h, static_cast<std::uint64_t>(s.patient_id) << 32 |
                          static_cast<std::uint64_t>(s.slice_id) << 1 | (s.target ? 1u : 0u));
    }
  }
  return h;
}

void save_sample(const std::filesystem::path& stem, const MultimodalSample& s) {
  const int h = s.height(), w = s.width();
  const int channels = kNumSources + (s.target ? 1 : 0);
  nlohmann::json header = {{"shape", {h, w}},
                           {"channels", channels},
                           {"patient_id", s.patient_id},
                           {"slice_id", s.slice_id},
                           {"has_core", s.has_core},
                           {"has_target", s.target.has_value()}};
  std::ofstream js(std::filesystem::path(stem).replace_extension(".json"));
  js << header.dump(2) << '\n';

  std::ofstream bin(std::filesystem::path(stem).replace_extension(".f32"), std::ios::binary);
  if (!bin) throw std::runtime_error("save_sample: cannot open " + stem.string());
  for (const auto& src : s.sources) write_le_floats(bin, src.data(), src.size());
  if (s.target) write_le_floats(bin, s.target->data(), s.target->size());
}

MultimodalSample load_sample(const std::filesystem::path& stem) {
  std::ifstream js(std::filesystem::path(stem).replace_extension(".json"));
  if (!js) throw std::runtime_error("load_sample: missing header for " + stem.string());
  const auto header = nlohmann::json::parse(js);
  const int h = header.at("shape").at(0), w = header.at("shape").at(1);
  const int channels = header.at("channels");
  const bool has_target = header.at("has_target");
  if (channels != kNumSources + (has_target ? 1 : 0))
    throw std::runtime_error("load_sample: channel count inconsistent with has_target in " +
                             stem.string());

  const auto bin_path = std::filesystem::path(stem).replace_extension(".f32");
  const auto expected = static_cast<std::uintmax_t>(channels) * h * w * sizeof(float);
  if (std::filesystem::file_size(bin_path) != expected)
    throw std::runtime_error("load_sample: payload size mismatch in " + bin_path.string());
  std::ifstream bin(bin_path, std::ios::binary);

  MultimodalSample s;
  for (auto& src : s.sources) {
    src.resize(h, w);
    read_le_floats(bin, src.data(), src.size());
  }
  if (has_target) {
    Image t(h, w);
    read_le_floats(bin, t.data(), t.size());
    s.target = std::move(t);
  }
  s.foreground_mask = Mask::Zero(h, w);
  for (const auto& src : s.sources)
    s.foreground_mask = (s.foreground_mask != 0 || src > 0.0f).cast<std::uint8_t>();
  s.patient_id = header.at("patient_id");
  s.slice_id = header.at("slice_id");
  s.has_core = header.at("has_core");
  return s;
}

void save_split(const std::filesystem::path& dir, const DatasetSplit& split) {
  const std::vector<MultimodalSample>* subsets[] = {&split.paired, &split.unpaired, &split.val,
                                                    &split.test};
  for (int i = 0; i < 4; ++i) {
    const auto sub = dir / kSubsets[i];
    std::filesystem::create_directories(sub);
    for (std::size_t k = 0; k < subsets[i]->size(); ++k) {
      char name[16];
      std::snprintf(name, sizeof(name), "%05zu", k);
      save_sample(sub / name, (*subsets[i])[k]);
    }
  }
}

DatasetSplit load_split(const std::filesystem::path& dir) {
  DatasetSplit split;
  std::vector<MultimodalSample>* subsets[] = {&split.paired, &split.unpaired, &split.val,
                                              &split.test};
  for (int i = 0; i < 4; ++i) {
    const auto sub = dir / kSubsets[i];
    if (!std::filesystem::is_directory(sub))
      throw std::runtime_error("load_split: missing subset directory " + sub.string());
    std::vector<std::filesystem::path> stems;
    for (const auto& e : std::filesystem::directory_iterator(sub))
      if (e.path().extension() == ".json") stems.push_back(e.path());
    std::sort(stems.begin(), stems.end());
    for (const auto& st : stems) subsets[i]->push_back(load_sample(st));
  }
  return split;
}

}  // namespace ds3
