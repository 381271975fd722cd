#include "ds3/nets.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ds3 {

namespace nn = torch::nn;

namespace {

nn::Sequential conv_norm_relu(int in, int out, int kernel, int stride, int pad,
                              torch::nn::detail::conv_padding_mode_t mode) {
  return nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(pad).padding_mode(mode).bias(false)),
      nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)),
      nn::ReLU());
}

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

// --------------------------------------------------------------------------
// GeneratorSpec / layer table

int GeneratorSpec::width_at(int level) const {
  return base_width * std::min(1 << level, max_width_mult);
}

int GeneratorSpec::n_layers() const { return 2 * n_downsampling + 6 * n_res_blocks + 3; }

void GeneratorSpec::validate() const {
  if (n_encoders < 1) throw std::invalid_argument("GeneratorSpec: n_encoders must be >= 1");
  if (base_width < 1) throw std::invalid_argument("GeneratorSpec: base_width must be >= 1");
  if (n_res_blocks < 1) throw std::invalid_argument("GeneratorSpec: n_res_blocks must be >= 1");
  if (n_downsampling < 0 || n_downsampling > 6)
    throw std::invalid_argument("GeneratorSpec: n_downsampling out of range");
  if (max_width_mult < 1) throw std::invalid_argument("GeneratorSpec: max_width_mult must be >= 1");
  const int depth = n_layers();
  auto check = [&](const std::vector<int>& taps, const char* what) {
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] < 0 || taps[i] >= depth)
        throw std::invalid_argument(std::string("GeneratorSpec: ") + what + " index " +
                                    std::to_string(taps[i]) + " is beyond network depth " +
                                    std::to_string(depth));
      if (i > 0 && taps[i] <= taps[i - 1])
        throw std::invalid_argument(std::string("GeneratorSpec: ") + what +
                                    " must be strictly increasing (" + join_ints(taps) + ")");
    }
  };
  check(tap_indices, "tap");
  check(distill_tap_indices, "distill tap");
}

std::vector<LayerInfo> layer_table(const GeneratorSpec& spec) {
  std::vector<LayerInfo> t;
  const int e = spec.n_encoders;
  const int nd = spec.n_downsampling;
  const int inner = spec.width_at(nd);
  int idx = 0;
  t.push_back({idx++, "enc.stem", LayerSection::Encoder, 1, e * spec.width_at(0)});
  for (int i = 1; i <= nd; ++i)
    t.push_back({idx++, "enc.down" + std::to_string(i), LayerSection::Encoder, 1 << i, e * spec.width_at(i)});
  for (int b = 0; b < spec.n_res_blocks; ++b)
    for (const char* part : {"conv_a", "conv_b", "out"})
      t.push_back({idx++, "enc.res" + std::to_string(b) + "." + part, LayerSection::Encoder, 1 << nd, e * inner});
  t.push_back({idx++, "fusion", LayerSection::Fusion, 1 << nd, inner});
  for (int b = 0; b < spec.n_res_blocks; ++b)
    for (const char* part : {"conv_a", "conv_b", "out"})
      t.push_back({idx++, "dec.res" + std::to_string(b) + "." + part, LayerSection::Decoder, 1 << nd, inner});
  for (int j = 1; j <= nd; ++j)
    t.push_back({idx++, "dec.up" + std::to_string(j), LayerSection::Decoder, 1 << (nd - j), spec.width_at(nd - j)});
  t.push_back({idx++, "dec.output", LayerSection::Decoder, 1, 1});
  return t;
}

std::string layer_table_markdown(const GeneratorSpec& spec) {
  std::ostringstream os;
  os << "| index | layer | stride | channels | taps |\n|---|---|---|---|---|\n";
  const std::set<int> contrastive(spec.tap_indices.begin(), spec.tap_indices.end());
  const std::set<int> distill(spec.distill_tap_indices.begin(), spec.distill_tap_indices.end());
  for (const auto& l : layer_table(spec)) {
    std::string mark;
    if (contrastive.count(l.index)) mark += "contrastive";
    if (distill.count(l.index)) mark += mark.empty() ? "distill" : ", distill";
    os << "| " << l.index << " | " << l.name << " | " << l.stride << " | " << l.channels << " | "
       << mark << " |\n";
  }
  return os.str();
}

// --------------------------------------------------------------------------
// FeatureTapSet

const torch::Tensor& FeatureTapSet::at(int index) const {
  auto it = taps.find(index);
  if (it == taps.end()) throw std::out_of_range("FeatureTapSet: missing tap " + std::to_string(index));
  return it->second;
}

void FeatureTapSet::check_shapes(int64_t height, int64_t width) const {
  for (const auto& [idx, t] : taps) {
    const int s = strides.at(idx);
    if (t.dim() != 4 || t.size(2) != height / s || t.size(3) != width / s)
      throw std::logic_error("FeatureTapSet: tap " + std::to_string(idx) + " has spatial size " +
                             std::to_string(t.size(2)) + "x" + std::to_string(t.size(3)) +
                             ", expected " + std::to_string(height / s) + "x" +
                             std::to_string(width / s));
  }
}

std::map<int, std::vector<int64_t>> FeatureTapSet::spatial_shapes() const {
  std::map<int, std::vector<int64_t>> out;
  for (const auto& [idx, t] : taps) out[idx] = {t.size(2), t.size(3)};
  return out;
}

// --------------------------------------------------------------------------
// Fusion

FusionBlockImpl::FusionBlockImpl(int channels, int branches, int reduction)
    : channels_(channels), branches_(branches) {
  const int hidden = std::max(channels / reduction, 4);
  for (int b = 0; b < branches; ++b) {
    excite_.push_back(register_module(
        "excite" + std::to_string(b),
        nn::Sequential(nn::Linear(channels, hidden), nn::ReLU(), nn::Linear(hidden, channels))));
  }
}

FusionResult FusionBlockImpl::forward(const std::vector<torch::Tensor>& features) {
  if (static_cast<int>(features.size()) != branches_)
    throw std::invalid_argument("fuse: expected " + std::to_string(branches_) + " branches, got " +
                                std::to_string(features.size()));
  for (const auto& f : features) {
    if (f.sizes() != features.front().sizes())
      throw std::invalid_argument("fuse: branch activation shapes differ");
    if (f.dim() != 4 || f.size(1) != channels_)
      throw std::invalid_argument("fuse: expected [B, " + std::to_string(channels_) + ", H, W]");
  }
  std::vector<torch::Tensor> logits;
  logits.reserve(branches_);
  for (int b = 0; b < branches_; ++b) logits.push_back(excite_[b]->forward(features[b].mean({2, 3})));
  auto gates = torch::softmax(torch::stack(logits, 1), 1);  // [B, branches, C]
  auto out = torch::zeros_like(features.front());
  for (int b = 0; b < branches_; ++b)
    out = out + gates.select(1, b).unsqueeze(-1).unsqueeze(-1) * features[b];
  return {out, gates};
}

FusionResult fuse(FusionBlock& block, const std::vector<torch::Tensor>& features) {
  return block->forward(features);
}

// --------------------------------------------------------------------------
// Residual block / encoder

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  a_ = register_module("a", conv_norm_relu(channels, channels, 3, 1, 1, torch::kReflect));
  b_ = register_module(
      "b", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, channels, 3)
                                         .padding(1)
                                         .padding_mode(torch::kReflect)
                                         .bias(false)),
                          nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels))));
}

ResidualTaps ResidualBlockImpl::forward(const torch::Tensor& x) {
  ResidualTaps r;
  r.conv_a = a_->forward(x);
  r.conv_b = b_->forward(r.conv_a);
  r.output = x + r.conv_b;
  return r;
}

EncoderImpl::EncoderImpl(const GeneratorSpec& spec) {
  stem_ = register_module("stem", conv_norm_relu(1, spec.width_at(0), 7, 1, 3, torch::kReflect));
  for (int i = 1; i <= spec.n_downsampling; ++i)
    down_.push_back(register_module("down" + std::to_string(i),
                                    conv_norm_relu(spec.width_at(i - 1), spec.width_at(i), 3, 2, 1, torch::kZeros)));
  for (int b = 0; b < spec.n_res_blocks; ++b)
    blocks_.push_back(register_module("res" + std::to_string(b), ResidualBlock(spec.width_at(spec.n_downsampling))));
}

void EncoderImpl::forward(const torch::Tensor& x, int stop, std::vector<torch::Tensor>& acts) {
  auto done = [&] { return static_cast<int>(acts.size()) > stop; };
  acts.push_back(stem_->forward(x));
  for (auto& d : down_) {
    if (done()) return;
    acts.push_back(d->forward(acts.back()));
  }
  for (auto& blk : blocks_) {
    if (done()) return;
    auto r = blk->forward(acts.back());
    acts.push_back(r.conv_a);
    acts.push_back(r.conv_b);
    acts.push_back(r.output);
  }
}

// --------------------------------------------------------------------------
// Generator

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  table_ = layer_table(spec_);
  for (int e = 0; e < spec_.n_encoders; ++e)
    encoders_.push_back(register_module("encoder" + std::to_string(e), Encoder(spec_)));
  const int inner = spec_.width_at(spec_.n_downsampling);
  fusion_ = register_module("fusion", FusionBlock(inner, spec_.n_encoders));
  for (int b = 0; b < spec_.n_res_blocks; ++b)
    dec_blocks_.push_back(register_module("dec_res" + std::to_string(b), ResidualBlock(inner)));
  for (int j = 1; j <= spec_.n_downsampling; ++j) {
    const int in = spec_.width_at(spec_.n_downsampling - j + 1);
    const int out = spec_.width_at(spec_.n_downsampling - j);
    up_.push_back(register_module(
        "up" + std::to_string(j),
        nn::Sequential(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 3)
                                               .stride(2)
                                               .padding(1)
                                               .output_padding(1)
                                               .bias(false)),
                       nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)), nn::ReLU())));
  }
  out_ = register_module("output", nn::Conv2d(nn::Conv2dOptions(spec_.width_at(0), 1, 7)
                                                  .padding(3)
                                                  .padding_mode(torch::kReflect)));
}

GeneratorOutput GeneratorImpl::run(const torch::Tensor& sources, const std::vector<int>& tap_indices,
                                   int stop) {
  if (sources.dim() != 4 || sources.size(1) != spec_.n_encoders)
    throw std::invalid_argument("Generator: expected sources shaped [B, " +
                                std::to_string(spec_.n_encoders) + ", H, W]");
  const int64_t div = int64_t{1} << spec_.n_downsampling;
  if (sources.size(2) % div != 0 || sources.size(3) % div != 0)
    throw std::invalid_argument("Generator: spatial size must be divisible by " + std::to_string(div));
  for (int t : tap_indices)
    if (t < 0 || t >= static_cast<int>(table_.size()))
      throw std::invalid_argument("Generator: tap index " + std::to_string(t) +
                                  " is beyond network depth " + std::to_string(table_.size()));

  const std::set<int> wanted(tap_indices.begin(), tap_indices.end());
  GeneratorOutput result;
  result.taps.source = NetRole::Teacher;
  auto record = [&](int idx, const torch::Tensor& t) {
    if (wanted.count(idx)) {
      result.taps.taps[idx] = t;
      result.taps.strides[idx] = table_[idx].stride;
    }
  };

  const int enc_last = spec_.n_downsampling + 3 * spec_.n_res_blocks;
  std::vector<std::vector<torch::Tensor>> branch(spec_.n_encoders);
  for (int e = 0; e < spec_.n_encoders; ++e)
    encoders_[e]->forward(sources.narrow(1, e, 1), std::min(stop, enc_last), branch[e]);
  const int reached = static_cast<int>(branch.front().size());
  for (int idx = 0; idx < reached; ++idx) {
    if (!wanted.count(idx)) continue;
    std::vector<torch::Tensor> parts;
    for (auto& b : branch) parts.push_back(b[idx]);
    record(idx, torch::cat(parts, 1));
  }
  if (stop <= enc_last) return result;

  std::vector<torch::Tensor> last;
  for (auto& b : branch) last.push_back(b.back());
  auto fused = fusion_->forward(last);
  result.gates = fused.gates;
  int idx = enc_last + 1;
  auto h = fused.output;
  record(idx, h);
  for (auto& blk : dec_blocks_) {
    if (idx >= stop) return result;
    auto r = blk->forward(h);
    record(++idx, r.conv_a);
    record(++idx, r.conv_b);
    record(++idx, r.output);
    h = r.output;
  }
  for (auto& up : up_) {
    if (idx >= stop) return result;
    h = up->forward(h);
    record(++idx, h);
  }
  if (idx >= stop) return result;
  h = torch::sigmoid(out_->forward(h));
  record(++idx, h);
  result.image = h;
  return result;
}

GeneratorOutput GeneratorImpl::forward(const torch::Tensor& sources, const std::vector<int>& tap_indices) {
  return run(sources, tap_indices, static_cast<int>(table_.size()) - 1);
}

FeatureTapSet GeneratorImpl::encode(const torch::Tensor& sources, const std::vector<int>& tap_indices) {
  const int stop = tap_indices.empty() ? 0 : *std::max_element(tap_indices.begin(), tap_indices.end());
  return run(sources, tap_indices, stop).taps;
}

torch::Tensor replicate_for_encoders(const torch::Tensor& image, int n_encoders) {
  if (image.dim() != 4 || image.size(1) != 1)
    throw std::invalid_argument("replicate_for_encoders: expected [B, 1, H, W]");
  return image.expand({image.size(0), n_encoders, image.size(2), image.size(3)});
}

// --------------------------------------------------------------------------
// Discriminator

void DiscriminatorSpec::validate() const {
  if (n_layers < 1 || n_layers > 6) throw std::invalid_argument("DiscriminatorSpec: n_layers out of range");
  if (base_width < 1) throw std::invalid_argument("DiscriminatorSpec: base_width must be >= 1");
  if (max_width_mult < 1) throw std::invalid_argument("DiscriminatorSpec: max_width_mult must be >= 1");
}

int DiscriminatorSpec::stride() const { return 1 << n_layers; }

int DiscriminatorSpec::receptive_field() const {
  int rf = 1, jump = 1;
  for (int i = 0; i < n_layers; ++i) {
    rf += 3 * jump;  // 4x4 kernel
    jump *= 2;
  }
  return rf + 2 * jump;  // final 3x3
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(spec) {
  spec_.validate();
  nn::Sequential body;
  int in = 1;
  for (int i = 0; i < spec_.n_layers; ++i) {
    const int out = spec_.base_width * std::min(1 << i, spec_.max_width_mult);
    body->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    in = out;
  }
  body->push_back(nn::Conv2d(nn::Conv2dOptions(in, 1, 3).padding(1)));
  body_ = register_module("body", body);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image) {
  const int rf = spec_.receptive_field();
  if (image.dim() != 4 || image.size(1) != 1)
    throw std::invalid_argument("Discriminator: expected [B, 1, H, W]");
  if (image.size(2) < rf || image.size(3) < rf)
    throw std::invalid_argument("Discriminator: input " + std::to_string(image.size(2)) + "x" +
                                std::to_string(image.size(3)) + " is smaller than the receptive field " +
                                std::to_string(rf));
  return body_->forward(image);
}

// --------------------------------------------------------------------------
// Projection heads

ProjectionHeadsImpl::ProjectionHeadsImpl(const GeneratorSpec& spec, int embed_dim) : embed_dim_(embed_dim) {
  if (embed_dim < 1) throw std::invalid_argument("ProjectionHeads: embed_dim must be >= 1");
  const auto table = layer_table(spec);
  for (int tap : spec.tap_indices) {
    const int c = table.at(tap).channels;
    heads_[tap] = register_module("tap" + std::to_string(tap),
                                  nn::Sequential(nn::Linear(c, embed_dim), nn::ReLU(),
                                                 nn::Linear(embed_dim, embed_dim)));
  }
}

torch::Tensor ProjectionHeadsImpl::embed(int tap, const torch::Tensor& features) {
  auto it = heads_.find(tap);
  if (it == heads_.end()) throw std::out_of_range("ProjectionHeads: no head for tap " + std::to_string(tap));
  auto z = it->second->forward(features);
  return nn::functional::normalize(z, nn::functional::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
}

std::map<int, torch::Tensor> extract_patch_embeddings(const FeatureTapSet& taps, ProjectionHeads& heads,
                                                      const std::map<int, std::vector<GridPoint>>& locations) {
  std::map<int, torch::Tensor> out;
  for (const auto& [tap, points] : locations) {
    const auto& f = taps.at(tap);
    const int64_t h = f.size(2), w = f.size(3);
    std::vector<int64_t> flat;
    flat.reserve(points.size());
    for (const auto& p : points) {
      if (p.row < 0 || p.row >= h || p.col < 0 || p.col >= w)
        throw std::out_of_range("extract_patch_embeddings: location (" + std::to_string(p.row) + ", " +
                                std::to_string(p.col) + ") outside the " + std::to_string(h) + "x" +
                                std::to_string(w) + " grid of tap " + std::to_string(tap));
      flat.push_back(p.row * w + p.col);
    }
    auto idx = torch::tensor(flat, torch::kLong);
    const int64_t b = f.size(0), c = f.size(1), s = static_cast<int64_t>(flat.size());
    auto picked = f.flatten(2).index_select(2, idx).permute({0, 2, 1}).reshape({b * s, c});
    out[tap] = heads->embed(tap, picked).reshape({b, s, -1});
  }
  return out;
}

// --------------------------------------------------------------------------
// Network bundle

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = {{"n_encoders", s.n_encoders},         {"base_width", s.base_width},
       {"n_res_blocks", s.n_res_blocks},     {"n_downsampling", s.n_downsampling},
       {"max_width_mult", s.max_width_mult}, {"tap_indices", s.tap_indices},
       {"distill_tap_indices", s.distill_tap_indices}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  GeneratorSpec d;
  s.n_encoders = j.value("n_encoders", d.n_encoders);
  s.base_width = j.value("base_width", d.base_width);
  s.n_res_blocks = j.value("n_res_blocks", d.n_res_blocks);
  s.n_downsampling = j.value("n_downsampling", d.n_downsampling);
  s.max_width_mult = j.value("max_width_mult", d.max_width_mult);
  s.tap_indices = j.value("tap_indices", d.tap_indices);
  s.distill_tap_indices = j.value("distill_tap_indices", d.distill_tap_indices);
}

void to_json(nlohmann::json& j, const DiscriminatorSpec& s) {
  j = {{"n_layers", s.n_layers},
       {"base_width", s.base_width},
       {"max_width_mult", s.max_width_mult},
       {"receptive_field", s.receptive_field()}};
}

void from_json(const nlohmann::json& j, DiscriminatorSpec& s) {
  DiscriminatorSpec d;
  s.n_layers = j.value("n_layers", d.n_layers);
  s.base_width = j.value("base_width", d.base_width);
  s.max_width_mult = j.value("max_width_mult", d.max_width_mult);
}

void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = {{"generator", s.generator}, {"discriminator", s.discriminator}, {"embed_dim", s.embed_dim}};
}

void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.generator = j.value("generator", GeneratorSpec{});
  s.discriminator = j.value("discriminator", DiscriminatorSpec{});
  s.embed_dim = j.value("embed_dim", 128);
}

NetworkImpl::NetworkImpl(NetworkSpec spec) : spec_(std::move(spec)) {
  generator = register_module("generator", Generator(spec_.generator));
  discriminator = register_module("discriminator", Discriminator(spec_.discriminator));
  heads = register_module("heads", ProjectionHeads(spec_.generator, spec_.embed_dim));
}

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& p : module.named_parameters()) {
    const auto& name = p.key();
    if (name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0)
      p.value().normal_(0.0, 0.02);
    else
      p.value().zero_();
  }
}

void copy_weights(const torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard guard;
  const auto src = from.named_parameters();
  auto dst = to.named_parameters();
  if (src.size() != dst.size())
    throw std::invalid_argument("copy_weights: parameter count mismatch (" + std::to_string(src.size()) +
                                " vs " + std::to_string(dst.size()) + ")");
  for (auto& p : dst) {
    const auto* s = src.find(p.key());
    if (!s) throw std::invalid_argument("copy_weights: source lacks parameter " + p.key());
    if (s->sizes() != p.value().sizes())
      throw std::invalid_argument("copy_weights: shape mismatch for " + p.key());
    p.value().copy_(*s);
  }
}

std::uint64_t parameter_hash(const torch::nn::Module& module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : module.named_parameters()) {
    feed(p.key().data(), p.key().size());
    auto t = p.value().detach().to(torch::kFloat).contiguous();
    feed(t.data_ptr<float>(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  return h;
}

ParameterSnapshot snapshot(const torch::nn::Module& module) {
  ParameterSnapshot snap;
  for (const auto& p : module.named_parameters()) snap.emplace_back(p.key(), p.value().detach().clone());
  return snap;
}

void restore(torch::nn::Module& module, const ParameterSnapshot& snap) {
  torch::NoGradGuard guard;
  auto params = module.named_parameters();
  if (params.size() != snap.size()) throw std::invalid_argument("restore: snapshot size mismatch");
  for (const auto& [name, value] : snap) {
    auto* p = params.find(name);
    if (!p) throw std::invalid_argument("restore: unknown parameter " + name);
    p->copy_(value);
  }
}

namespace {
constexpr char kMagic[8] = {'D', 'S', '3', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& path, Network& net) {
  nlohmann::json header;
  header["spec"] = net->spec();
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  std::uint64_t offset = 0;
  for (const auto& p : net->named_parameters()) {
    auto t = p.value().detach().to(torch::kFloat).contiguous();
    header["tensors"].push_back({{"name", p.key()}, {"shape", t.sizes().vec()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel());
    payload.push_back(t);
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian host");
  os.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(len));
  for (const auto& t : payload)
    os.write(reinterpret_cast<const char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);

  Network net(header.at("spec").get<NetworkSpec>());
  auto params = net->named_parameters();
  std::set<std::string> seen;
  const auto data_start = is.tellg();
  torch::NoGradGuard guard;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    auto* p = params.find(name);
    if (!p) throw std::runtime_error("load_checkpoint: unexpected key '" + name + "' in " + path.string());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    if (p->sizes().vec() != shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    auto buf = torch::empty(shape, torch::kFloat);
    is.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>() * sizeof(float)));
    is.read(reinterpret_cast<char*>(buf.data_ptr<float>()), static_cast<std::streamsize>(buf.numel() * sizeof(float)));
    if (!is) throw std::runtime_error("load_checkpoint: truncated payload for '" + name + "'");
    p->copy_(buf);
    seen.insert(name);
  }
  for (const auto& p : params)
    if (!seen.count(p.key()))
      throw std::runtime_error("load_checkpoint: missing key '" + p.key() + "' in " + path.string());
  return net;
}

}  // namespace ds3
