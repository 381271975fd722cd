#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace ds3 {

enum class NetRole { Teacher, Student };

/// Generator layout. Layer indices follow the table produced by layer_table().
struct GeneratorSpec {
  int n_encoders = 3;
  int base_width = 16;
  int n_res_blocks = 3;
  int n_downsampling = 2;
  int max_width_mult = 2;
  std::vector<int> tap_indices{0, 4, 8, 12, 16};
  std::vector<int> distill_tap_indices{4, 8, 12, 16, 21};

  /// Throws std::invalid_argument naming the first bad field or tap index.
  void validate() const;
  int width_at(int level) const;  // channels after `level` downsamplings
  int n_layers() const;
  bool operator==(const GeneratorSpec&) const = default;
};

enum class LayerSection { Encoder, Fusion, Decoder };

struct LayerInfo {
  int index;
  std::string name;
  LayerSection section;
  int stride;    // input size / tap size
  int channels;  // encoder layers report the concatenation over all branches
};

/// Forward-order enumeration of atomic layers: stem conv, downsampling convs,
/// {conv a, conv b, output} per residual block, fusion, decoder residual blocks,
/// upsampling convs, output conv.
std::vector<LayerInfo> layer_table(const GeneratorSpec& spec);

/// Markdown rendering of layer_table (used in the README and by the CLI).
std::string layer_table_markdown(const GeneratorSpec& spec);

struct FeatureTapSet {
  std::map<int, torch::Tensor> taps;
  std::map<int, int> strides;
  NetRole source = NetRole::Teacher;

  const torch::Tensor& at(int index) const;
  bool contains(int index) const { return taps.count(index) != 0; }
  /// Checks every tap's spatial size against (height / stride, width / stride).
  void check_shapes(int64_t height, int64_t width) const;
  std::map<int, std::vector<int64_t>> spatial_shapes() const;
};

struct FusionResult {
  torch::Tensor output;  // [B, C, H, W]
  torch::Tensor gates;   // [B, branches, C], softmax over branches
};

/// SE-style fusion with the per-channel sigmoid replaced by a softmax across
/// branches, so the gates for each channel form a convex combination.
class FusionBlockImpl : public torch::nn::Module {
 public:
  FusionBlockImpl(int channels, int branches, int reduction = 4);
  FusionResult forward(const std::vector<torch::Tensor>& features);

 private:
  int channels_;
  int branches_;
  std::vector<torch::nn::Sequential> excite_;
};
TORCH_MODULE(FusionBlock);

FusionResult fuse(FusionBlock& block, const std::vector<torch::Tensor>& features);

struct ResidualTaps {
  torch::Tensor conv_a, conv_b, output;
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int channels);
  ResidualTaps forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential a_{nullptr}, b_{nullptr};
};
TORCH_MODULE(ResidualBlock);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const GeneratorSpec& spec);
  /// Appends activations for layer indices 0..stop (or all encoder layers).
  void forward(const torch::Tensor& x, int stop, std::vector<torch::Tensor>& acts);

 private:
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> down_;
  std::vector<ResidualBlock> blocks_;
};
TORCH_MODULE(Encoder);

struct GeneratorOutput {
  torch::Tensor image;  // [B, 1, H, W]; undefined when the pass stopped early
  FeatureTapSet taps;
  torch::Tensor gates;
};

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec);

  /// sources: [B, n_encoders, H, W]. Taps requested in `tap_indices` are returned.
  GeneratorOutput forward(const torch::Tensor& sources, const std::vector<int>& tap_indices = {});

  /// Runs only as deep as the deepest requested tap.
  FeatureTapSet encode(const torch::Tensor& sources, const std::vector<int>& tap_indices);

  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorOutput run(const torch::Tensor& sources, const std::vector<int>& tap_indices, int stop);

  GeneratorSpec spec_;
  std::vector<LayerInfo> table_;
  std::vector<Encoder> encoders_;
  FusionBlock fusion_{nullptr};
  std::vector<ResidualBlock> dec_blocks_;
  std::vector<torch::nn::Sequential> up_;
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Generator);

/// Replicates a one-channel image into every encoder branch.
torch::Tensor replicate_for_encoders(const torch::Tensor& image, int n_encoders);

struct DiscriminatorSpec {
  int n_layers = 3;
  int base_width = 16;
  int max_width_mult = 8;

  void validate() const;
  int stride() const;            // 2^n_layers
  int receptive_field() const;   // pixels, computed from kernel sizes and strides
  bool operator==(const DiscriminatorSpec&) const = default;
};

/// PatchGAN: stride-2 4x4 convolutions with LeakyReLU(0.2), then a 3x3 conv to
/// one raw score per output cell.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorSpec spec);
  torch::Tensor forward(const torch::Tensor& image);
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Discriminator);

/// One two-layer perceptron per contrastive tap, followed by L2 normalization.
class ProjectionHeadsImpl : public torch::nn::Module {
 public:
  ProjectionHeadsImpl(const GeneratorSpec& spec, int embed_dim);
  /// features: [N, C_tap] -> [N, embed_dim], unit rows.
  torch::Tensor embed(int tap, const torch::Tensor& features);
  int embed_dim() const { return embed_dim_; }

 private:
  int embed_dim_;
  std::map<int, torch::nn::Sequential> heads_;
};
TORCH_MODULE(ProjectionHeads);

struct GridPoint {
  int64_t row = 0, col = 0;
  bool operator==(const GridPoint&) const = default;
};

/// Embeddings per tap, shaped [B, n_locations, embed_dim].
std::map<int, torch::Tensor> extract_patch_embeddings(
    const FeatureTapSet& taps, ProjectionHeads& heads,
    const std::map<int, std::vector<GridPoint>>& locations);

struct NetworkSpec {
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
  int embed_dim = 128;
  bool operator==(const NetworkSpec&) const = default;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);
void to_json(nlohmann::json& j, const DiscriminatorSpec& s);
void from_json(const nlohmann::json& j, DiscriminatorSpec& s);
void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);

/// Generator + discriminator + projection heads of one side (teacher or student).
class NetworkImpl : public torch::nn::Module {
 public:
  explicit NetworkImpl(NetworkSpec spec);

  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  ProjectionHeads heads{nullptr};

  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
};
TORCH_MODULE(Network);

/// Weights ~ N(0, 0.02), biases 0. Draws from the global torch generator.
void init_weights(torch::nn::Module& module);

/// Copies every parameter (matching names, shapes) from `from` into `to`.
void copy_weights(const torch::nn::Module& from, torch::nn::Module& to);

/// FNV-1a over parameter names and raw float32 bytes.
std::uint64_t parameter_hash(const torch::nn::Module& module);

/// In-memory parameter snapshot keyed by canonical name.
using ParameterSnapshot = std::vector<std::pair<std::string, torch::Tensor>>;
ParameterSnapshot snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const ParameterSnapshot& snap);

// Checkpoint: "DS3CKPT1", u64 header length, JSON header {spec, tensors:[{name, shape, offset}]},
// then little-endian float32 payload. Loading rejects missing or unexpected keys.
void save_checkpoint(const std::filesystem::path& path, Network& net);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace ds3
