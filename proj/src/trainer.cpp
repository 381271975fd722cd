#include "ds3/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>

namespace ds3 {

// --------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  net.generator.validate();
  net.discriminator.validate();
  weights.validate();
  if (net.generator.n_encoders != kNumSources)
    throw std::invalid_argument("TrainConfig: generator needs one encoder per source modality (" +
                                std::to_string(kNumSources) + ")");
  if (patches_per_tap < 2) throw std::invalid_argument("TrainConfig: patches_per_tap must be >= 2");
  if (stage1_epochs < 1) throw std::invalid_argument("TrainConfig: stage1_epochs must be >= 1");
  if (stage2_epochs < 1) throw std::invalid_argument("TrainConfig: stage2_epochs (T) must be >= 1");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw std::invalid_argument("TrainConfig: batch_size must be even and >= 2");
  for (double lr : {lr_g, lr_mlp, lr_d, teacher_lr_attenuation})
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: learning rates must be > 0");
  if (distill_on_discriminator)
    throw std::invalid_argument("TrainConfig: distill_on_discriminator is not supported");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"data",
       {{"n_patients", c.data.n_patients},
        {"slices_per_patient", c.data.slices_per_patient},
        {"canvas_size", c.data.canvas_size},
        {"paired_fraction", c.data.paired_fraction},
        {"data_dir", c.data.data_dir}}},
      {"net", c.net},
      {"weights",
       {{"pid", c.weights.pid},
        {"pad", c.weights.pad},
        {"gan", c.weights.gan},
        {"id", c.weights.id},
        {"fd", c.weights.fd},
        {"pad_student", c.weights.pad_student},
        {"gan_student", c.weights.gan_student},
        {"tau", c.weights.tau}}},
      {"patches_per_tap", c.patches_per_tap},
      {"difficulty_clamp", c.difficulty_clamp},
      {"stage1_epochs", c.stage1_epochs},
      {"stage2_epochs", c.stage2_epochs},
      {"batch_size", c.batch_size},
      {"lr_g", c.lr_g},
      {"lr_mlp", c.lr_mlp},
      {"lr_d", c.lr_d},
      {"teacher_lr_attenuation", c.teacher_lr_attenuation},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"weight_decay", c.weight_decay},
      {"plateau_patience", c.plateau_patience},
      {"plateau_tolerance", c.plateau_tolerance},
      {"checkpoint_lookback", c.checkpoint_lookback},
      {"seed", c.seed},
      {"disable_map", c.disable_map},
      {"disable_fd", c.disable_fd},
      {"disable_id", c.disable_id},
      {"paired_only", c.paired_only},
      {"freeze_teacher", c.freeze_teacher},
      {"distill_on_discriminator", c.distill_on_discriminator},
      {"foreground_metrics", c.foreground_metrics},
      {"max_steps_per_epoch", c.max_steps_per_epoch}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  if (j.contains("data")) {
    const auto& dj = j.at("data");
    c.data.n_patients = dj.value("n_patients", d.data.n_patients);
    c.data.slices_per_patient = dj.value("slices_per_patient", d.data.slices_per_patient);
    c.data.canvas_size = dj.value("canvas_size", d.data.canvas_size);
    c.data.paired_fraction = dj.value("paired_fraction", d.data.paired_fraction);
    c.data.data_dir = dj.value("data_dir", d.data.data_dir);
  }
  c.net = j.value("net", d.net);
  if (j.contains("weights")) {
    const auto& wj = j.at("weights");
    c.weights.pid = wj.value("pid", d.weights.pid);
    c.weights.pad = wj.value("pad", d.weights.pad);
    c.weights.gan = wj.value("gan", d.weights.gan);
    c.weights.id = wj.value("id", d.weights.id);
    c.weights.fd = wj.value("fd", d.weights.fd);
    c.weights.pad_student = wj.value("pad_student", d.weights.pad_student);
    c.weights.gan_student = wj.value("gan_student", d.weights.gan_student);
    c.weights.tau = wj.value("tau", d.weights.tau);
  }
  c.patches_per_tap = j.value("patches_per_tap", d.patches_per_tap);
  c.difficulty_clamp = j.value("difficulty_clamp", d.difficulty_clamp);
  c.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
  c.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_g = j.value("lr_g", d.lr_g);
  c.lr_mlp = j.value("lr_mlp", d.lr_mlp);
  c.lr_d = j.value("lr_d", d.lr_d);
  c.teacher_lr_attenuation = j.value("teacher_lr_attenuation", d.teacher_lr_attenuation);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.plateau_patience = j.value("plateau_patience", d.plateau_patience);
  c.plateau_tolerance = j.value("plateau_tolerance", d.plateau_tolerance);
  c.checkpoint_lookback = j.value("checkpoint_lookback", d.checkpoint_lookback);
  c.seed = j.value("seed", d.seed);
  c.disable_map = j.value("disable_map", d.disable_map);
  c.disable_fd = j.value("disable_fd", d.disable_fd);
  c.disable_id = j.value("disable_id", d.disable_id);
  c.paired_only = j.value("paired_only", d.paired_only);
  c.freeze_teacher = j.value("freeze_teacher", d.freeze_teacher);
  c.distill_on_discriminator = j.value("distill_on_discriminator", d.distill_on_discriminator);
  c.foreground_metrics = j.value("foreground_metrics", d.foreground_metrics);
  c.max_steps_per_epoch = j.value("max_steps_per_epoch", d.max_steps_per_epoch);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_config: cannot open " + path.string());
  return nlohmann::json::parse(is).get<TrainConfig>();
}

std::string TrainConfig::hash() const {
  const std::string text = nlohmann::json(*this).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t stream_seed(std::uint64_t seed, Stream s) { return mix_seed(seed, static_cast<std::uint64_t>(s)); }

LearningRates learning_rates(const TrainConfig& c, int stage, int epoch) {
  LearningRates lr;
  if (stage == 1) {
    const double f = 1.0 - static_cast<double>(epoch) / c.stage1_epochs;
    lr.g_teacher = c.lr_g * f;
    lr.mlp_teacher = c.lr_mlp * f;
    lr.d_teacher = c.lr_d * f;
    return lr;
  }
  const double f = schedule_weight(epoch, c.stage2_epochs);
  const double a = c.teacher_lr_attenuation;
  lr.g_teacher = c.lr_g * a * f;
  lr.mlp_teacher = c.lr_mlp * a * f;
  lr.d_teacher = c.lr_d * a * f;
  lr.g_student = c.lr_g * f;
  lr.mlp_student = c.lr_mlp * f;
  lr.d_student = c.lr_d * f;
  return lr;
}

// --------------------------------------------------------------------------
// Metrics log

std::string MetricsLog::header() {
  return "step,stage,pid,pad,gan_g,gan_d,id,fd,total_teacher,total_student,schedule_weight,"
         "epoch,pid_s,pad_s,gan_g_s,gan_d_s,lr_g_t,lr_mlp_t,lr_d_t,lr_g_s,lr_mlp_s,lr_d_s";
}

std::string MetricsLog::to_csv() const {
  std::string out = header() + "\n";
  char buf[1024];
  for (const auto& r : rows_) {
    const auto& l = r.losses;
    std::snprintf(buf, sizeof(buf),
                  "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%.9g,%.9g,%.9g,%.9g,"
                  "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  r.step, r.stage, l.pid, l.pad, l.gan_g, l.gan_d, l.id, l.fd, l.total_teacher, l.total_student,
                  l.schedule_weight, r.epoch, l.pid_s, l.pad_s, l.gan_g_s, l.gan_d_s, r.lr.g_teacher,
                  r.lr.mlp_teacher, r.lr.d_teacher, r.lr.g_student, r.lr.mlp_student, r.lr.d_student);
    out += buf;
  }
  return out;
}

void MetricsLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("MetricsLog: cannot open " + path.string());
  os << to_csv();
}

// --------------------------------------------------------------------------
// Data plumbing

namespace {

torch::Tensor image_tensor(const Image& img) {
  return torch::from_blob(const_cast<float*>(img.data()), {img.rows(), img.cols()}, torch::kFloat).clone();
}

torch::Tensor mask_tensor(const Mask& m) {
  return torch::from_blob(const_cast<std::uint8_t*>(m.data()), {m.rows(), m.cols()}, torch::kUInt8)
      .to(torch::kFloat);
}

Image tensor_image(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat).contiguous();
  Image img(c.size(0), c.size(1));
  std::copy_n(c.data_ptr<float>(), img.size(), img.data());
  return img;
}

}  // namespace

Batch make_batch(const std::vector<const MultimodalSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  std::vector<torch::Tensor> src, tgt, msk;
  bool all_targets = true;
  for (const auto* s : samples) {
    std::vector<torch::Tensor> ch;
    for (const auto& img : s->sources) ch.push_back(image_tensor(img));
    src.push_back(torch::stack(ch, 0));
    msk.push_back(mask_tensor(s->foreground_mask).unsqueeze(0));
    if (s->target)
      tgt.push_back(image_tensor(*s->target).unsqueeze(0));
    else
      all_targets = false;
  }
  Batch b;
  b.sources = torch::stack(src, 0);
  b.mask = torch::stack(msk, 0);
  if (all_targets) b.target = torch::stack(tgt, 0);
  return b;
}

Batch make_batch(const std::vector<MultimodalSample>& samples) {
  std::vector<const MultimodalSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(ptrs);
}

SampleCycler::SampleCycler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
  for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  shuffle(order_, rng_);
}

std::vector<std::size_t> SampleCycler::next(std::size_t k) {
  if (order_.empty()) throw std::logic_error("SampleCycler: empty subset");
  std::vector<std::size_t> out;
  out.reserve(k);
  while (out.size() < k) {
    if (pos_ == order_.size()) {
      shuffle(order_, rng_);
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

void OptimizerSet::set_lr(double lr_g, double lr_mlp, double lr_d) {
  auto apply = [](torch::optim::AdamW& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  };
  apply(*g, lr_g);
  apply(*mlp, lr_mlp);
  apply(*d, lr_d);
}

OptimizerSet make_optimizers(Network& net, const TrainConfig& c) {
  auto opts = [&](double lr) {
    return torch::optim::AdamWOptions(lr).betas({c.adam_beta1, c.adam_beta2}).weight_decay(c.weight_decay);
  };
  OptimizerSet s;
  s.g = std::make_unique<torch::optim::AdamW>(net->generator->parameters(), opts(c.lr_g));
  s.mlp = std::make_unique<torch::optim::AdamW>(net->heads->parameters(), opts(c.lr_mlp));
  s.d = std::make_unique<torch::optim::AdamW>(net->discriminator->parameters(), opts(c.lr_d));
  return s;
}

Network build_network(const TrainConfig& c) {
  torch::manual_seed(stream_seed(c.seed, Stream::Init));
  Network net(c.net);
  init_weights(*net);
  return net;
}

ConvergencePick pick_checkpoint_epoch(const std::vector<double>& val_pid, int patience, double tolerance,
                                      int lookback) {
  ConvergencePick pick;
  if (val_pid.empty()) return pick;
  double best = val_pid.front();
  int last_improve = 1;
  int stale = 0;
  for (std::size_t e = 1; e < val_pid.size(); ++e) {
    if (val_pid[e] < best * (1.0 - tolerance)) {
      best = val_pid[e];
      last_improve = static_cast<int>(e) + 1;
      stale = 0;
    } else if (++stale == patience) {
      pick.convergence_epoch = last_improve;
      pick.returned_epoch = std::max(1, last_improve - lookback);
      return pick;
    }
  }
  pick.returned_epoch = static_cast<int>(val_pid.size());
  return pick;
}

// --------------------------------------------------------------------------
// Training steps

namespace {

std::vector<int> union_taps(const std::vector<int>& a, const std::vector<int>& b) {
  std::set<int> s(a.begin(), a.end());
  s.insert(b.begin(), b.end());
  return {s.begin(), s.end()};
}

struct SupervisedOut {
  double pid = 0, pad = 0, gan_g = 0, gan_d = 0;
  DifficultyMap map;
};

DifficultyMap make_map(Network& net, const torch::Tensor& scores, const Batch& b, const FeatureTapSet& taps,
                       bool unit, double clamp) {
  if (unit) {
    return unit_difficulty_map(b.mask.sizes().vec(), taps.spatial_shapes(), scores.scalar_type());
  }
  (void)net;
  auto m = compute_difficulty_map(scores, b.mask, clamp);
  build_pyramid(m, taps.spatial_shapes());
  return m;
}

// One D update then one G(+heads) update against real targets (the teacher objective).
// `g_scale` multiplies the generator-side objective.
SupervisedOut supervised_step(Network& net, OptimizerSet& opt, const Batch& b, bool unit_map, const TrainConfig& c,
                              torch::Generator& gen, double g_scale) {
  auto& G = net->generator;
  auto& D = net->discriminator;
  const auto& taps = net->spec().generator.tap_indices;
  SupervisedOut out;

  auto fwd = G->forward(b.sources, taps);
  const auto& fake = fwd.image;

  auto d_loss = lsgan_d(D->forward(b.target), D->forward(fake.detach()));
  opt.d->zero_grad();
  d_loss.backward();
  opt.d->step();
  out.gan_d = d_loss.item<double>();

  auto scores = D->forward(fake);
  out.map = make_map(net, scores, b, fwd.taps, unit_map, c.difficulty_clamp);
  auto pid = pixelwise_difficulty_l1(out.map.full, b.target, fake);
  auto pos = G->encode(replicate_for_encoders(fake, kNumSources), taps);
  PatchSamplingPlan plan{c.patches_per_tap, 0};
  auto pad = patch_difficulty_infonce(fwd.taps, pos, net->heads, taps, plan, out.map, gen, c.weights.tau);
  auto gan = lsgan_g(scores);
  auto total = teacher_total(pid, pad, gan, c.weights);

  opt.g->zero_grad();
  opt.mlp->zero_grad();
  (g_scale * total).backward();
  opt.g->step();
  opt.mlp->step();

  out.pid = pid.item<double>();
  out.pad = pad.item<double>();
  out.gan_g = gan.item<double>();
  return out;
}

struct DistillOut {
  double id = 0, fd = 0, pad = 0, gan_g = 0, gan_d = 0;
  DifficultyMap map;
};

// Student update on unpaired inputs: teacher output and features act as pseudo ground truth.
DistillOut distill_step(Network& student, OptimizerSet& opt, Network& teacher, const Batch& unpaired,
                        const torch::Tensor& real_targets, const TrainConfig& c, torch::Generator& gen,
                        double g_scale) {
  auto& G = student->generator;
  auto& D = student->discriminator;
  const auto& spec = student->spec().generator;
  const auto all_taps = union_taps(spec.tap_indices, spec.distill_tap_indices);
  DistillOut out;

  GeneratorOutput pseudo;
  {
    torch::NoGradGuard guard;
    pseudo = teacher->generator->forward(unpaired.sources, spec.distill_tap_indices);
  }

  auto fwd = G->forward(unpaired.sources, all_taps);
  fwd.taps.source = NetRole::Student;
  const auto& fake = fwd.image;

  auto d_loss = lsgan_d(D->forward(real_targets), D->forward(fake.detach()));
  opt.d->zero_grad();
  d_loss.backward();
  opt.d->step();
  out.gan_d = d_loss.item<double>();

  auto scores = D->forward(fake);
  out.map = make_map(student, scores, unpaired, fwd.taps, c.disable_map, c.difficulty_clamp);

  auto id = image_distill(out.map.full, pseudo.image, fake);
  auto fd = feature_distill(out.map, pseudo.taps, fwd.taps, spec.distill_tap_indices);
  auto pos = G->encode(replicate_for_encoders(fake, kNumSources), spec.tap_indices);
  PatchSamplingPlan plan{c.patches_per_tap, 0};
  auto pad = patch_difficulty_infonce(fwd.taps, pos, student->heads, spec.tap_indices, plan, out.map, gen,
                                      c.weights.tau);
  auto gan = lsgan_g(scores);

  LossWeights w = c.weights;
  if (c.disable_id) w.id = 0.0;
  if (c.disable_fd) w.fd = 0.0;
  auto total = student_total(id, fd, pad, gan, w);

  opt.g->zero_grad();
  opt.mlp->zero_grad();
  (g_scale * total).backward();
  opt.g->step();
  opt.mlp->step();

  out.id = id.item<double>();
  out.fd = fd.item<double>();
  out.pad = pad.item<double>();
  out.gan_g = gan.item<double>();
  return out;
}

std::vector<const MultimodalSample*> pick(const std::vector<MultimodalSample>& subset,
                                          const std::vector<std::size_t>& idx) {
  std::vector<const MultimodalSample*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&subset[i]);
  return out;
}

[[noreturn]] void diverged(int stage, int epoch, int step, const LossBundle& l) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "training diverged (stage %d, epoch %d, step %d): pid=%g pad=%g gan_g=%g gan_d=%g id=%g fd=%g "
                "pad_s=%g gan_g_s=%g gan_d_s=%g pid_s=%g",
                stage, epoch, step, l.pid, l.pad, l.gan_g, l.gan_d, l.id, l.fd, l.pad_s, l.gan_g_s, l.gan_d_s,
                l.pid_s);
  throw std::runtime_error(buf);
}

int next_step(const MetricsLog* log) { return log && !log->rows().empty() ? log->rows().back().step + 1 : 0; }

}  // namespace

// --------------------------------------------------------------------------
// Stages

Stage1Result train_stage1(const TrainConfig& c, const DatasetSplit& split, MetricsLog* log, const TrainHooks& hooks) {
  c.validate();
  if (split.paired.empty()) throw std::invalid_argument("train_stage1: paired set is empty");
  if (split.val.empty()) throw std::invalid_argument("train_stage1: validation set is empty");

  Stage1Result result;
  Network teacher = build_network(c);
  auto opt = make_optimizers(teacher, c);
  auto gen = at::detail::createCPUGenerator(stream_seed(c.seed, Stream::Patch));
  Rng order(stream_seed(c.seed, Stream::Order));

  std::vector<ParameterSnapshot> snapshots;
  int step = next_step(log);
  const auto bs = static_cast<std::size_t>(c.batch_size);
  for (int epoch = 0; epoch < c.stage1_epochs; ++epoch) {
    const auto lr = learning_rates(c, 1, epoch);
    opt.set_lr(lr.g_teacher, lr.mlp_teacher, lr.d_teacher);

    std::vector<std::size_t> idx(split.paired.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle(idx, order);
    int n_steps = static_cast<int>((idx.size() + bs - 1) / bs);
    if (c.max_steps_per_epoch > 0) n_steps = std::min(n_steps, c.max_steps_per_epoch);

    for (int s = 0; s < n_steps; ++s, ++step) {
      const std::size_t lo = s * bs, hi = std::min(idx.size(), lo + bs);
      const Batch b = make_batch(pick(split.paired, {idx.begin() + lo, idx.begin() + hi}));
      auto r = supervised_step(teacher, opt, b, /*unit_map=*/true, c, gen, 1.0);

      LogRow row;
      row.step = step;
      row.stage = 1;
      row.epoch = epoch;
      row.lr = lr;
      row.losses.pid = r.pid;
      row.losses.pad = r.pad;
      row.losses.gan_g = r.gan_g;
      row.losses.gan_d = r.gan_d;
      row.losses.finalize(c.weights);
      if (!row.losses.all_finite()) diverged(1, epoch, step, row.losses);
      if (log) log->append(row);
      if (hooks.on_step) {
        StepInfo info{1, epoch, step, static_cast<int>(hi - lo), 0, &r.map, nullptr};
        hooks.on_step(info);
      }
    }
    result.val_pid.push_back(validation_pid(teacher, split.val));
    snapshots.push_back(snapshot(*teacher));
  }

  const auto choice = pick_checkpoint_epoch(result.val_pid, c.plateau_patience, c.plateau_tolerance,
                                            c.checkpoint_lookback);
  result.convergence_epoch = choice.convergence_epoch;
  result.returned_epoch = choice.returned_epoch;
  restore(*teacher, snapshots.at(choice.returned_epoch - 1));
  result.teacher = teacher;
  return result;
}

Stage2Result train_stage2(const TrainConfig& c, const DatasetSplit& split, const Network& teacher_checkpoint,
                          MetricsLog* log, const TrainHooks& hooks) {
  c.validate();
  if (split.paired.empty()) throw std::invalid_argument("train_stage2: paired set is empty");
  const bool semi = !c.paired_only && !split.unpaired.empty();
  if (!c.paired_only && split.unpaired.empty() && c.data.paired_fraction < 1.0)
    throw std::invalid_argument("train_stage2: unpaired set is empty (set paired_only for a supervised run)");

  Network teacher(teacher_checkpoint->spec());
  copy_weights(*teacher_checkpoint, *teacher);
  Network student(teacher_checkpoint->spec());
  copy_weights(*teacher, *student);
  if (hooks.on_stage2_start) hooks.on_stage2_start(teacher, student);

  auto opt_t = make_optimizers(teacher, c);
  auto opt_s = make_optimizers(student, c);
  auto gen = at::detail::createCPUGenerator(mix_seed(stream_seed(c.seed, Stream::Patch), 2));
  const std::uint64_t order_seed = mix_seed(stream_seed(c.seed, Stream::Order), 2);
  SampleCycler paired_cycle(split.paired.size(), mix_seed(order_seed, 1));
  std::optional<SampleCycler> unpaired_cycle;
  if (semi) unpaired_cycle.emplace(split.unpaired.size(), mix_seed(order_seed, 2));

  const std::size_t half = static_cast<std::size_t>(c.batch_size / 2);
  const std::size_t longest = semi ? std::max(split.paired.size(), split.unpaired.size()) : split.paired.size();
  int n_steps = static_cast<int>((longest + half - 1) / half);
  if (c.max_steps_per_epoch > 0) n_steps = std::min(n_steps, c.max_steps_per_epoch);

  int step = next_step(log);
  for (int epoch = 0; epoch < c.stage2_epochs; ++epoch) {
    const auto lr = learning_rates(c, 2, epoch);
    opt_t.set_lr(lr.g_teacher, lr.mlp_teacher, lr.d_teacher);
    opt_s.set_lr(lr.g_student, lr.mlp_student, lr.d_student);
    const double w = schedule_weight(epoch, c.stage2_epochs);

    for (int s = 0; s < n_steps; ++s, ++step) {
      const Batch paired = make_batch(pick(split.paired, paired_cycle.next(half)));
      LogRow row;
      row.step = step;
      row.stage = 2;
      row.epoch = epoch;
      row.lr = lr;
      row.losses.schedule_weight = w;

      SupervisedOut t;
      if (!c.freeze_teacher) {
        t = supervised_step(teacher, opt_t, paired, c.disable_map, c, gen, 1.0);
        row.losses.pid = t.pid;
        row.losses.pad = t.pad;
        row.losses.gan_g = t.gan_g;
        row.losses.gan_d = t.gan_d;
      }

      StepInfo info{2, epoch, step, static_cast<int>(half), 0, c.freeze_teacher ? nullptr : &t.map, nullptr};
      if (semi) {
        const Batch unpaired = make_batch(pick(split.unpaired, unpaired_cycle->next(half)));
        auto r = distill_step(student, opt_s, teacher, unpaired, paired.target, c, gen, w);
        row.losses.id = r.id;
        row.losses.fd = r.fd;
        row.losses.pad_s = r.pad;
        row.losses.gan_g_s = r.gan_g;
        row.losses.gan_d_s = r.gan_d;
        row.losses.finalize(c.weights);
        if (c.disable_id || c.disable_fd) {
          LossWeights eff = c.weights;
          if (c.disable_id) eff.id = 0.0;
          if (c.disable_fd) eff.fd = 0.0;
          row.losses.finalize(eff);
        }
        info.n_unpaired = static_cast<int>(half);
        info.student_map = &r.map;
        if (!row.losses.all_finite()) diverged(2, epoch, step, row.losses);
        if (log) log->append(row);
        if (hooks.on_step) hooks.on_step(info);
      } else {
        auto r = supervised_step(student, opt_s, paired, c.disable_map, c, gen, w);
        row.losses.pid_s = r.pid;
        row.losses.pad_s = r.pad;
        row.losses.gan_g_s = r.gan_g;
        row.losses.gan_d_s = r.gan_d;
        row.losses.finalize(c.weights);
        info.student_map = &r.map;
        if (!row.losses.all_finite()) diverged(2, epoch, step, row.losses);
        if (log) log->append(row);
        if (hooks.on_step) hooks.on_step(info);
      }
    }
  }
  return {student, teacher};
}

// --------------------------------------------------------------------------
// Inference / evaluation

torch::Tensor predict(Network& net, const torch::Tensor& sources) {
  torch::NoGradGuard guard;
  return net->generator->forward(sources).image;
}

Image predict(Network& net, const MultimodalSample& sample) {
  const Batch b = make_batch(std::vector<const MultimodalSample*>{&sample});
  return tensor_image(predict(net, b.sources)[0][0]);
}

namespace {
constexpr std::size_t kEvalChunk = 16;
}

double validation_pid(Network& net, const std::vector<MultimodalSample>& samples) {
  torch::NoGradGuard guard;
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t lo = 0; lo < samples.size(); lo += kEvalChunk) {
    std::vector<const MultimodalSample*> chunk;
    for (std::size_t i = lo; i < std::min(samples.size(), lo + kEvalChunk); ++i) chunk.push_back(&samples[i]);
    const Batch b = make_batch(chunk);
    if (!b.target.defined()) throw std::invalid_argument("validation_pid: samples need targets");
    auto out = net->generator->forward(b.sources).image;
    sum += (out - b.target).abs().mean({1, 2, 3}).sum().item<double>();
    n += chunk.size();
  }
  return n ? sum / n : 0.0;
}

MetricReport evaluate(Network& net, const std::vector<MultimodalSample>& samples, bool foreground_only) {
  torch::NoGradGuard guard;
  MetricReport report;
  for (std::size_t lo = 0; lo < samples.size(); lo += kEvalChunk) {
    std::vector<const MultimodalSample*> chunk;
    for (std::size_t i = lo; i < std::min(samples.size(), lo + kEvalChunk); ++i) chunk.push_back(&samples[i]);
    const Batch b = make_batch(chunk);
    auto out = net->generator->forward(b.sources).image;
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const auto& s = *chunk[k];
      if (!s.target) throw std::invalid_argument("evaluate: samples need targets");
      const Image pred = tensor_image(out[static_cast<int64_t>(k)][0]);
      SampleMetrics m;
      m.patient_id = s.patient_id;
      m.slice_id = s.slice_id;
      if (foreground_only) {
        m.ssim = ssim_foreground(*s.target, pred, s.foreground_mask);
        m.mse = mse_foreground(*s.target, pred, s.foreground_mask);
      } else {
        m.ssim = ssim(*s.target, pred);
        m.mse = mse(*s.target, pred);
      }
      const auto p = psnr_from_mse(m.mse);
      m.psnr = p.db;
      m.psnr_identical = p.identical;
      report.samples.push_back(m);
    }
  }
  report.aggregate();
  return report;
}

DatasetSplit make_split(const TrainConfig& c) {
  if (!c.data.data_dir.empty()) return load_split(c.data.data_dir);
  return build_split(c.data.n_patients, c.data.slices_per_patient, c.data.paired_fraction,
                     stream_seed(c.seed, Stream::Data), c.data.canvas_size);
}

RunArtifacts run_training(const TrainConfig& c, const std::filesystem::path& out_dir) {
  c.validate();
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "resolved_config.json");
    os << nlohmann::json(c).dump(2) << '\n';
  }
  const DatasetSplit split = make_split(c);
  RunArtifacts run;
  run.stage1 = train_stage1(c, split, &run.log);
  save_checkpoint(out_dir / "stage1_teacher.ckpt", run.stage1.teacher);
  {
    nlohmann::json summary = {{"val_pid", run.stage1.val_pid},
                              {"convergence_epoch", run.stage1.convergence_epoch},
                              {"returned_epoch", run.stage1.returned_epoch},
                              {"split_hash", split_hash(split)}};
    std::ofstream os(out_dir / "stage1_summary.json");
    os << summary.dump(2) << '\n';
  }
  run.stage2 = train_stage2(c, split, run.stage1.teacher, &run.log);
  save_checkpoint(out_dir / "final_student.ckpt", run.stage2.student);
  run.log.write_csv(out_dir / "metrics.csv");
  return run;
}

}  // namespace ds3
