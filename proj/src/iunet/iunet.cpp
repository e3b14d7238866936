#include "idm/iunet.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "idm/diffusion.hpp"
#include "idm/keyvalue.hpp"
#include "idm/ops.hpp"

namespace idm {

void IUNetConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config '" + key + "': " + why); };
  if (levels < 1) fail("levels", "must be >= 1");
  if (blocks_per_level < 0) fail("blocks_per_level", "must be >= 0");
  if (static_cast<int>(channel_schedule.size()) != levels)
    fail("channel_schedule", "needs exactly one entry per level (" + std::to_string(levels) + ")");
  if (channel_schedule.front() != base_channels) fail("base_channels", "must equal channel_schedule[0]");
  if (volume_edge < 2 || volume_edge % (std::int64_t{1} << levels) != 0)
    fail("volume_edge", "must be divisible by 2^levels");
  for (int i = 0; i <= levels; ++i) {
    const auto c = level_channels(i);
    if (c < 2 || c % 2) fail("channel_schedule", "level " + std::to_string(i) + " needs an even channel count >= 2");
  }
  for (int i = 0; i < levels; ++i) {
    const auto next = level_channels(i + 1);
    if (next % 8) fail("channel_schedule", "level " + std::to_string(i + 1) + " width must be divisible by 8");
    if (skip_channels(i) < 1)
      fail("channel_schedule", "level " + std::to_string(i) + " keeps no skip channels (width grows more than 8x)");
  }
  std::set<long> seen;
  for (long a : attn_levels) {
    if (a < 0 || a >= levels) fail("attn_levels", "level " + std::to_string(a) + " out of range");
    if (!seen.insert(a).second) fail("attn_levels", "duplicate level " + std::to_string(a));
  }
  if (time_embed_dim < 2 || time_embed_dim % 2) fail("time_embed_dim", "must be even and >= 2");
  if (timesteps < 1) fail("timesteps", "must be >= 1");
}

std::int64_t IUNetConfig::level_channels(int level) const {
  if (level < levels) return channel_schedule.at(static_cast<std::size_t>(level));
  return 2 * channel_schedule.back();
}

std::int64_t IUNetConfig::deep_channels(int level) const { return level_channels(level + 1) / 8; }

std::int64_t IUNetConfig::skip_channels(int level) const { return level_channels(level) - deep_channels(level); }

bool IUNetConfig::has_attention(int level) const {
  return std::find(attn_levels.begin(), attn_levels.end(), level) != attn_levels.end();
}

std::string IUNetConfig::to_text() const {
  std::map<std::string, std::string> kv;
  kv["attn_levels"] = format_int_list(attn_levels);
  kv["base_channels"] = std::to_string(base_channels);
  kv["blocks_per_level"] = std::to_string(blocks_per_level);
  kv["channel_schedule"] = format_int_list(channel_schedule);
  kv["dtype"] = dtype_name(dtype);
  kv["init_seed"] = std::to_string(init_seed);
  kv["levels"] = std::to_string(levels);
  kv["time_embed_dim"] = std::to_string(time_embed_dim);
  kv["timesteps"] = std::to_string(timesteps);
  kv["volume_edge"] = std::to_string(volume_edge);
  return format_key_values(kv);
}

IUNetConfig IUNetConfig::from_text(const std::string& text) {
  IUNetConfig cfg;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (k == "attn_levels") cfg.attn_levels = parse_int_list(k, v);
    else if (k == "base_channels") cfg.base_channels = parse_int(k, v);
    else if (k == "blocks_per_level") cfg.blocks_per_level = static_cast<int>(parse_int(k, v));
    else if (k == "channel_schedule") cfg.channel_schedule = parse_int_list(k, v);
    else if (k == "dtype") {
      try {
        cfg.dtype = parse_dtype(v);
      } catch (const ShapeError& e) {
        throw ConfigError(e.what());
      }
    } else if (k == "init_seed") cfg.init_seed = static_cast<std::uint64_t>(parse_int(k, v));
    else if (k == "levels") cfg.levels = static_cast<int>(parse_int(k, v));
    else if (k == "time_embed_dim") cfg.time_embed_dim = parse_int(k, v);
    else if (k == "timesteps") cfg.timesteps = static_cast<int>(parse_int(k, v));
    else if (k == "volume_edge") cfg.volume_edge = parse_int(k, v);
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  cfg.validate();
  return cfg;
}

IUNetConfig IUNetConfig::with_defaults(std::int64_t edge, int levels, std::int64_t base, int blocks) {
  IUNetConfig cfg;
  cfg.volume_edge = edge;
  cfg.levels = levels;
  cfg.base_channels = base;
  cfg.blocks_per_level = blocks;
  cfg.channel_schedule.clear();
  for (int i = 0; i < levels; ++i) cfg.channel_schedule.push_back(base << i);
  cfg.attn_levels.clear();
  for (int i = std::max(0, levels - 2); i < levels; ++i) cfg.attn_levels.push_back(i);
  return cfg;
}

std::int64_t expected_parameter_count(const IUNetConfig& cfg) {
  const std::int64_t d = cfg.time_embed_dim;
  const std::int64_t c0 = cfg.base_channels;
  std::int64_t n = ConvStack::parameter_count(1, c0, c0) + ConvStack::parameter_count(c0, c0, 1) +
                   TimeEmbedding::parameter_count(d);
  for (int i = 0; i < cfg.levels; ++i) {
    const auto c = cfg.level_channels(i);
    n += 2 * cfg.blocks_per_level * AdditiveCoupling::parameter_count(c, c, d);
    n += 2 * 64;
    if (cfg.has_attention(i)) n += AttentionCoupling::parameter_count(cfg.skip_channels(i));
  }
  const auto cb = cfg.level_channels(cfg.levels);
  n += cfg.blocks_per_level * AdditiveCoupling::parameter_count(cb, cb, d);
  return n;
}

IUNet::IUNet(IUNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Prng init(cfg_.init_seed);
  const DType dt = cfg_.dtype;
  const std::int64_t c0 = cfg_.base_channels;
  const std::int64_t d = cfg_.time_embed_dim;

  head_ = std::make_unique<ConvStack>("head", 1, c0, c0, dt, init);
  if (c0 >= 2) head_->init_identity_lane();
  time_ = std::make_unique<TimeEmbedding>(d, cfg_.timesteps, dt, init);

  auto add_couplings = [&](const std::string& prefix, std::int64_t channels) {
    for (int j = 0; j < cfg_.blocks_per_level; ++j)
      trunk_.push_back(std::make_unique<AdditiveCoupling>(prefix + ".coupling" + std::to_string(j), channels, channels,
                                                          d, j % 2 == 1, dt, init));
  };

  for (int i = 0; i < cfg_.levels; ++i) {
    const std::string prefix = "down" + std::to_string(i);
    add_couplings(prefix, cfg_.level_channels(i));
    trunk_.push_back(std::make_unique<ChannelSplit>(prefix + ".split", cfg_.skip_channels(i)));
    trunk_.push_back(std::make_unique<OrthoResample>(prefix + ".resample", OrthoResample::Direction::Down, dt));
  }
  add_couplings("bottleneck", cfg_.level_channels(cfg_.levels));
  for (int i = cfg_.levels - 1; i >= 0; --i) {
    const std::string prefix = "up" + std::to_string(i);
    trunk_.push_back(std::make_unique<OrthoResample>(prefix + ".resample", OrthoResample::Direction::Up, dt));
    if (cfg_.has_attention(i))
      trunk_.push_back(std::make_unique<AttentionCoupling>(prefix + ".attention", cfg_.skip_channels(i),
                                                           cfg_.deep_channels(i), dt, init));
    else
      trunk_.push_back(std::make_unique<ChannelMerge>(prefix + ".merge", cfg_.skip_channels(i)));
    add_couplings(prefix, cfg_.level_channels(i));
  }
  const BetaSchedule sched = cosine_schedule(cfg_.timesteps);
  for (int t = 0; t <= cfg_.timesteps; ++t) gains_.push_back(std::sqrt(sched.alpha_bar(t)));
  tail_ = std::make_unique<ConvStack>("tail", c0, c0, 1, dt, init);
  if (c0 >= 2) tail_->init_identity_lane();

  for (const auto& [split, merge] : skip_bookkeeping())
    if (split != merge) throw ShapeError("skip channel bookkeeping mismatch");

  auto add_params = [&](std::vector<Param*> ps) {
    for (Param* p : ps) {
      p->id = static_cast<int>(params_.size());
      params_.push_back(p);
    }
  };
  add_params(head_->params());
  add_params(time_->params());
  for (auto& node : trunk_) add_params(node->params());
  add_params(tail_->params());
}

std::int64_t IUNet::parameter_count() const {
  std::int64_t n = 0;
  for (const Param* p : params_) n += p->value.numel();
  return n;
}

void IUNet::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

std::vector<Node*> IUNet::trunk_nodes() const {
  std::vector<Node*> out;
  for (const auto& n : trunk_) out.push_back(n.get());
  return out;
}

std::vector<Node*> IUNet::all_nodes() const {
  std::vector<Node*> out{head_.get()};
  for (const auto& n : trunk_) out.push_back(n.get());
  out.push_back(tail_.get());
  return out;
}

std::vector<OrthoResample*> IUNet::resamplers() const {
  std::vector<OrthoResample*> out;
  for (const auto& n : trunk_)
    if (auto* r = dynamic_cast<OrthoResample*>(n.get())) out.push_back(r);
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> IUNet::skip_bookkeeping() const {
  std::vector<std::int64_t> split, merge;
  for (const auto& n : trunk_) {
    if (auto* s = dynamic_cast<ChannelSplit*>(n.get())) split.push_back(s->skip_channels());
    if (auto* m = dynamic_cast<ChannelMerge*>(n.get())) merge.push_back(m->skip_channels());
    if (auto* a = dynamic_cast<AttentionCoupling*>(n.get())) merge.push_back(a->skip_channels());
  }
  // Up levels run deepest first.
  std::reverse(merge.begin(), merge.end());
  if (split.size() != merge.size()) throw ShapeError("skip bookkeeping: unbalanced split/merge count");
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::size_t i = 0; i < split.size(); ++i) out.emplace_back(split[i], merge[i]);
  return out;
}

void IUNet::check_input(const Tensor& x) const {
  const std::int64_t e = cfg_.volume_edge;
  if (x.rank() != 5 || x.dim(1) != 1 || x.dim(2) != e || x.dim(3) != e || x.dim(4) != e)
    throw ShapeError("model input must be [B,1," + std::to_string(e) + "," + std::to_string(e) + "," +
                     std::to_string(e) + "], got " + shape_string(x.shape()));
  if (x.dtype() != cfg_.dtype) throw ShapeError("model input dtype must be " + dtype_name(cfg_.dtype));
}

Tensor IUNet::predict(const Tensor& x_t, int t) const {
  check_input(x_t);
  const Tensor emb = time_->forward(t);
  const RunContext ctx{&emb, nullptr};
  auto out = evaluate_nodes(all_nodes(), {x_t}, ctx);
  return blend_output(x_t, out.at(0), t);
}

double IUNet::output_gain(int t) const {
  if (t < 0 || t > cfg_.timesteps) throw NumericDomainError("timestep " + std::to_string(t) + " outside [0, T]");
  return gains_[static_cast<std::size_t>(t)];
}

Tensor IUNet::blend_output(const Tensor& x_t, const Tensor& net, int t) const {
  const double g = output_gain(t);
  return ops::axpy(ops::scale(x_t, 1.0 - g), g, net);
}

Tensor IUNet::trunk_forward(const Tensor& h, std::optional<int> t) const {
  Tensor emb;
  if (t) emb = time_->forward(*t);
  const RunContext ctx{t ? &emb : nullptr, nullptr};
  auto out = evaluate_nodes(trunk_nodes(), {h}, ctx);
  if (out.size() != 1) throw ShapeError("trunk produced an unbalanced stack");
  return std::move(out.front());
}

Tensor IUNet::trunk_inverse(const Tensor& v, std::optional<int> t) const {
  const std::int64_t e = cfg_.volume_edge;
  if (v.rank() != 5 || v.dim(1) != cfg_.base_channels || v.dim(2) != e || v.dim(3) != e || v.dim(4) != e)
    throw ShapeError("trunk inverse expects [B," + std::to_string(cfg_.base_channels) + ",E,E,E], got " +
                     shape_string(v.shape()));
  Tensor emb;
  if (t) emb = time_->forward(*t);
  const RunContext ctx{t ? &emb : nullptr, nullptr};
  auto out = invert_nodes(trunk_nodes(), {v}, ctx);
  if (out.size() != 1) throw ShapeError("trunk inverse produced an unbalanced stack");
  return std::move(out.front());
}

void randomize_parameters(IUNet& model, Prng& prng) {
  for (Param* p : model.params()) {
    const auto& s = p->value.shape();
    const double bound = s.size() >= 2 ? 1.0 / std::sqrt(static_cast<double>(p->value.numel() / s[0])) : 0.1;
    p->value = ops::rand_uniform(prng, s, -bound, bound, p->value.dtype());
  }
}

ModelPass::ModelPass(IUNet& model, BackpropMode mode, MemoryTracker& tracker)
    : model_(model), mode_(mode), graph_(model.all_nodes(), tracker) {}

const Tensor& ModelPass::forward(Tensor x_t, int t) {
  model_.check_input(x_t);
  embedding_ = model_.time_embedding().forward(t, &cache_);
  embedding_grad_ = Tensor(embedding_.shape(), embedding_.dtype());
  t_ = t;
  input_ = x_t;
  const Tensor& net = graph_.forward(std::move(x_t), mode_, RunContext{&embedding_, &embedding_grad_});
  output_ = model_.blend_output(input_, net, t);
  return output_;
}

void ModelPass::backward(Tensor grad_output) {
  grad_output = ops::scale(grad_output, model_.output_gain(t_));
  graph_.backward(std::move(grad_output), RunContext{&embedding_, &embedding_grad_});
  model_.time_embedding().backward(cache_, embedding_grad_);
}

}  // namespace idm
