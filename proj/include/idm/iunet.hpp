#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "idm/invblocks.hpp"
#include "idm/revgraph.hpp"

namespace idm {

// Architecture of the invertible U-Net.
//
// Level i runs at edge volume_edge / 2^i with channel_schedule[i] channels. After its
// couplings the level splits off a skip tensor and orthogonally downsamples the rest,
// so the deep part carries channel_schedule[i+1] / 8 channels into level i+1 (for the
// last level, the bottleneck width 2 * channel_schedule.back() is used).
struct IUNetConfig {
  std::int64_t base_channels = 8;
  int levels = 3;
  int blocks_per_level = 2;
  std::vector<long> attn_levels = {1, 2};
  std::vector<long> channel_schedule = {8, 16, 32};
  std::int64_t volume_edge = 16;
  std::int64_t time_embed_dim = 32;
  int timesteps = 2000;
  DType dtype = DType::F32;
  std::uint64_t init_seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;

  std::int64_t level_channels(int level) const;  // level == levels gives the bottleneck
  std::int64_t deep_channels(int level) const;
  std::int64_t skip_channels(int level) const;
  std::int64_t level_edge(int level) const { return volume_edge >> level; }
  bool has_attention(int level) const;

  std::string to_text() const;
  static IUNetConfig from_text(const std::string& text);
  // Doubling schedule base * 2^i and attention on the two deepest levels.
  static IUNetConfig with_defaults(std::int64_t edge, int levels, std::int64_t base, int blocks);
};

// Closed-form parameter count for a configuration.
std::int64_t expected_parameter_count(const IUNetConfig& cfg);

class IUNet {
 public:
  explicit IUNet(IUNetConfig cfg);
  IUNet(const IUNet&) = delete;
  IUNet& operator=(const IUNet&) = delete;
  IUNet(IUNet&&) = default;
  IUNet& operator=(IUNet&&) = default;

  const IUNetConfig& config() const { return cfg_; }
  DType dtype() const { return cfg_.dtype; }

  // All parameters ordered by id.
  const std::vector<Param*>& params() const { return params_; }
  std::int64_t parameter_count() const;
  void zero_grad();

  ConvStack& head() { return *head_; }
  ConvStack& tail() { return *tail_; }
  TimeEmbedding& time_embedding() { return *time_; }
  const TimeEmbedding& time_embedding() const { return *time_; }
  std::vector<Node*> trunk_nodes() const;
  // head, trunk, tail.
  std::vector<Node*> all_nodes() const;
  std::vector<OrthoResample*> resamplers() const;
  // (channels split off at down level i, channels consumed by up level i) per level.
  std::vector<std::pair<std::int64_t, std::int64_t>> skip_bookkeeping() const;

  // Throws ShapeError unless x is [B,1,E,E,E] in the model dtype.
  void check_input(const Tensor& x_t) const;

  // U(x_t, t) = x_t + output_gain(t) * (net(x_t) - x_t), where net is head, trunk, tail and
  // the gain is sqrt(alpha_bar_t) of the cosine schedule over cfg.timesteps.
  double output_gain(int t) const;
  Tensor blend_output(const Tensor& x_t, const Tensor& net, int t) const;

  // Noise prediction without retaining anything for backprop.
  Tensor predict(const Tensor& x_t, int t) const;
  // The invertible trunk alone; nullopt conditions on a zero time embedding.
  Tensor trunk_forward(const Tensor& h, std::optional<int> t) const;
  Tensor trunk_inverse(const Tensor& v, std::optional<int> t) const;

 private:
  IUNetConfig cfg_;
  std::unique_ptr<ConvStack> head_;
  std::unique_ptr<ConvStack> tail_;
  std::unique_ptr<TimeEmbedding> time_;
  std::vector<std::unique_ptr<Node>> trunk_;
  std::vector<Param*> params_;
  std::vector<double> gains_;
};

// Overwrites every parameter with fan-in scaled uniform noise, including the
// zero-initialised output projections, so that no block is the identity.
void randomize_parameters(IUNet& model, Prng& prng);

// One differentiable evaluation U(x_t, t) under a backprop mode.
class ModelPass {
 public:
  ModelPass(IUNet& model, BackpropMode mode, MemoryTracker& tracker);

  void set_verify(bool verify) { graph_.set_verify(verify); }
  const Tensor& forward(Tensor x_t, int t);
  // Accumulates parameter gradients (including the time embedding MLP).
  void backward(Tensor grad_output);

 private:
  IUNet& model_;
  BackpropMode mode_;
  RevGraph graph_;
  TimeEmbedding::Cache cache_;
  Tensor embedding_;
  Tensor embedding_grad_;
  Tensor input_;
  Tensor output_;
  int t_ = 0;
};

// Binary checkpoint: "IDMCKPT1", u64 config length, canonical config text, u32 parameter
// count, then per parameter u32 id, u8 rank, u32 extents, raw little-endian values.
void checkpoint_save(const IUNet& model, const std::filesystem::path& path);
IUNet checkpoint_load(const std::filesystem::path& path);

}  // namespace idm
