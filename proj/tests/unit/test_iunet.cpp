#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "idm/iunet.hpp"
#include "test_support.hpp"

using namespace idm;
using idm::testing::max_rel;

namespace {

IUNetConfig small_config(DType dtype, int blocks = 2) {
  IUNetConfig cfg = IUNetConfig::with_defaults(8, 2, 4, blocks);
  cfg.time_embed_dim = 8;
  cfg.timesteps = 50;
  cfg.dtype = dtype;
  cfg.init_seed = 11;
  return cfg;
}

IUNet randomized(const IUNetConfig& cfg, std::uint64_t seed = 5) {
  IUNet model(cfg);
  Prng prng(seed);
  randomize_parameters(model, prng);
  return model;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("idm_iunet_" + name);
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(IUNetConfig, DefaultsAreDeskScale) {
  IUNetConfig cfg;
  EXPECT_EQ(cfg.volume_edge, 16);
  EXPECT_EQ(cfg.levels, 3);
  EXPECT_EQ(cfg.channel_schedule, (std::vector<long>{8, 16, 32}));
  EXPECT_EQ(cfg.attn_levels, (std::vector<long>{1, 2}));
  EXPECT_NO_THROW(cfg.validate());
}

TEST(IUNetConfig, RejectsInvalid) {
  IUNetConfig cfg;
  cfg.volume_edge = 12;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = IUNetConfig{};
  cfg.channel_schedule = {8, 16};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = IUNetConfig{};
  cfg.attn_levels = {3};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = IUNetConfig{};
  cfg.channel_schedule = {8, 12, 32};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(IUNetConfig, TextRoundTrip) {
  IUNetConfig cfg = small_config(DType::F64);
  const IUNetConfig back = IUNetConfig::from_text(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_THROW(IUNetConfig::from_text("bogus = 1\n"), ConfigError);
}

TEST(IUNet, ParameterCountMatchesManualEnumeration) {
  IUNetConfig cfg = small_config(DType::F32);
  // head 1->4->4, tail 4->4->1
  const std::int64_t head = (4 * 1 * 27 + 4) + (4 * 4 * 27 + 4);
  const std::int64_t tail = (4 * 4 * 27 + 4) + (1 * 4 * 27 + 1);
  const std::int64_t time = 2 * (8 * 8 + 8);
  // coupling on C channels: w1 [C, C/2, 27], b1 [C], wt [C, 8], w2 [C/2, C, 27], b2 [C/2]
  const std::int64_t c4 = 4 * 2 * 27 + 4 + 4 * 8 + 2 * 4 * 27 + 2;
  const std::int64_t c8 = 8 * 4 * 27 + 8 + 8 * 8 + 4 * 8 * 27 + 4;
  const std::int64_t c16 = 16 * 8 * 27 + 16 + 16 * 8 + 8 * 16 * 27 + 8;
  EXPECT_EQ(c4, 470);
  EXPECT_EQ(c8, 1804);
  EXPECT_EQ(c16, 7064);
  // level 0 keeps 3 skip channels, level 1 keeps 6
  const std::int64_t level0 = 4 * c4 + 2 * 64 + 4 * (3 * 3 + 3);
  const std::int64_t level1 = 4 * c8 + 2 * 64 + 4 * (6 * 6 + 6);
  const std::int64_t bottleneck = 2 * c16;
  const std::int64_t manual = head + tail + time + level0 + level1 + bottleneck;
  EXPECT_EQ(manual, 24933);
  EXPECT_EQ(expected_parameter_count(cfg), manual);
  IUNet model(cfg);
  EXPECT_EQ(model.parameter_count(), manual);
}

TEST(IUNet, EveryParameterRegisteredOnce) {
  IUNet model(IUNetConfig{});
  std::set<const Param*> seen;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    EXPECT_EQ(model.params()[i]->id, static_cast<int>(i));
    EXPECT_TRUE(seen.insert(model.params()[i]).second);
  }
  EXPECT_EQ(model.parameter_count(), expected_parameter_count(model.config()));
}

TEST(IUNet, SkipBookkeepingConsistent) {
  for (const auto& cfg : {IUNetConfig{}, small_config(DType::F32)}) {
    IUNet model(cfg);
    const auto pairs = model.skip_bookkeeping();
    ASSERT_EQ(static_cast<int>(pairs.size()), cfg.levels);
    for (int i = 0; i < cfg.levels; ++i) {
      EXPECT_EQ(pairs[i].first, pairs[i].second);
      EXPECT_EQ(pairs[i].first, cfg.skip_channels(i));
    }
  }
}

TEST(IUNet, OutputShapeMatchesInput) {
  for (std::int64_t edge : {8, 16}) {
    for (int levels : {2, 3}) {
      IUNetConfig cfg = IUNetConfig::with_defaults(edge, levels, 8, 1);
      cfg.time_embed_dim = 8;
      IUNet model(cfg);
      const Tensor x = idm::testing::random_tensor(1, {2, 1, edge, edge, edge}, DType::F32);
      EXPECT_EQ(model.predict(x, 3).shape(), x.shape()) << "edge " << edge << " levels " << levels;
    }
  }
}

TEST(IUNet, IdentityInitReducesToHeadAndTail) {
  IUNet model(IUNetConfig{});
  const Tensor x = idm::testing::random_tensor(2, {1, 1, 16, 16, 16}, DType::F32);
  const RunContext ctx;
  const Tensor direct = model.tail().forward(model.head().forward({x}, ctx), ctx).at(0);
  EXPECT_LE(ops::max_abs_diff(model.predict(x, 100), direct), 1e-6);
}

TEST(IUNet, OutputBlendsNetworkWithInput) {
  const IUNetConfig cfg = small_config(DType::F64);
  IUNet model = randomized(cfg);
  const Tensor x = idm::testing::random_tensor(4, {1, 1, 8, 8, 8}, DType::F64);
  const double T = cfg.timesteps, s = 0.008, pi = std::acos(-1.0);
  auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1 + s) * pi / 2);
    return c * c;
  };
  for (int t : {0, 7, 25, 49}) {
    const double gain = std::sqrt(f(t) / f(0));
    EXPECT_NEAR(model.output_gain(t), gain, 1e-12) << t;
    const Tensor emb = model.time_embedding().forward(t);
    const RunContext ctx{&emb, nullptr};
    const Tensor h = model.head().forward({x}, ctx).at(0);
    const Tensor net = model.tail().forward({model.trunk_forward(h, t)}, ctx).at(0);
    const Tensor expected = ops::add(x, ops::scale(ops::sub(net, x), gain));
    EXPECT_LE(max_rel(model.predict(x, t), expected), 1e-12) << t;
  }
  // the last step's beta is clipped to 0.999
  EXPECT_NEAR(model.output_gain(50), std::sqrt(f(49) / f(0) * (1 - 0.999)), 1e-12);
  EXPECT_THROW(model.output_gain(51), NumericDomainError);
}

TEST(IUNet, ModesGiveBitIdenticalForward) {
  IUNet model = randomized(small_config(DType::F32));
  const Tensor x = idm::testing::random_tensor(3, {2, 1, 8, 8, 8}, DType::F32);
  MemoryTracker ts(BackpropMode::StoreAll), ti(BackpropMode::InvertibleRecompute);
  ModelPass store(model, BackpropMode::StoreAll, ts);
  ModelPass inv(model, BackpropMode::InvertibleRecompute, ti);
  const Tensor a = store.forward(x, 7);
  const Tensor b = inv.forward(x, 7);
  EXPECT_TRUE(identical(a, b));
  EXPECT_TRUE(identical(a, model.predict(x, 7)));
}

TEST(IUNet, RejectsBadInputs) {
  IUNet model(small_config(DType::F32));
  EXPECT_THROW(model.predict(Tensor({1, 1, 8, 8, 4}), 1), ShapeError);
  EXPECT_THROW(model.predict(Tensor({1, 2, 8, 8, 8}), 1), ShapeError);
  EXPECT_THROW(model.predict(Tensor({1, 1, 8, 8, 8}, DType::F64), 1), ShapeError);
  EXPECT_THROW(model.predict(Tensor({1, 1, 8, 8, 8}), 51), NumericDomainError);
  EXPECT_THROW(model.predict(Tensor({1, 1, 8, 8, 8}), -1), NumericDomainError);
  EXPECT_THROW(model.trunk_inverse(Tensor({1, 3, 8, 8, 8}), 1), ShapeError);
}

TEST(IUNet, TrunkRoundTripF64) {
  IUNet model = randomized(small_config(DType::F64));
  const Tensor h = idm::testing::random_tensor(4, {2, 4, 8, 8, 8});
  const Tensor v = model.trunk_forward(h, 9);
  EXPECT_GT(max_rel(v, h), 1e-2);
  EXPECT_LE(max_rel(model.trunk_inverse(v, 9), h), 1e-10);
}

TEST(IUNet, TrunkRoundTripF32) {
  IUNet model = randomized(small_config(DType::F32));
  const Tensor h = idm::testing::random_tensor(4, {2, 4, 8, 8, 8}, DType::F32);
  const Tensor v = model.trunk_forward(h, 9);
  EXPECT_LE(max_rel(model.trunk_inverse(v, 9), h), 1e-4);
}

TEST(IUNet, NullTimeInverseDiffers) {
  IUNet model = randomized(small_config(DType::F64));
  const Tensor h = idm::testing::random_tensor(6, {1, 4, 8, 8, 8});
  const Tensor v = model.trunk_forward(h, 30);
  EXPECT_GT(max_rel(model.trunk_inverse(v, std::nullopt), h), 1e-3);
  EXPECT_LE(max_rel(model.trunk_inverse(model.trunk_forward(h, std::nullopt), std::nullopt), h), 1e-10);
}

TEST(IUNet, GradientsAgreeAcrossModes) {
  IUNet model = randomized(small_config(DType::F64));
  const Tensor x = idm::testing::random_tensor(7, {2, 1, 8, 8, 8});
  const Tensor g = idm::testing::random_tensor(8, {2, 1, 8, 8, 8});
  std::vector<Tensor> grads[2];
  std::size_t peaks[2];
  int slot = 0;
  for (BackpropMode mode : {BackpropMode::StoreAll, BackpropMode::InvertibleRecompute}) {
    model.zero_grad();
    MemoryTracker tracker(mode);
    ModelPass pass(model, mode, tracker);
    pass.set_verify(true);
    pass.forward(x, 12);
    pass.backward(g);
    EXPECT_EQ(tracker.live_bytes(), 0u);
    peaks[slot] = tracker.report().peak_bytes;
    for (const Param* p : model.params()) grads[slot].push_back(p->grad);
    ++slot;
  }
  double diff2 = 0, ref2 = 0;
  for (std::size_t i = 0; i < grads[0].size(); ++i) {
    diff2 += std::pow(ops::l2_norm(ops::sub(grads[1][i], grads[0][i])), 2);
    ref2 += std::pow(ops::l2_norm(grads[0][i]), 2);
  }
  EXPECT_LE(std::sqrt(diff2 / ref2), 1e-8);
  // key biases have an exactly zero gradient, so only rounding noise is compared there
  for (std::size_t i = 0; i < grads[0].size(); ++i) {
    const double diff = ops::l2_norm(ops::sub(grads[1][i], grads[0][i]));
    EXPECT_LE(diff, 1e-8 * ops::l2_norm(grads[0][i]) + 1e-12 * std::sqrt(ref2)) << model.params()[i]->name;
  }
  EXPECT_LT(peaks[1], peaks[0]);
}

TEST(IUNet, RecomputePeakIndependentOfDepth) {
  std::vector<double> inv, store;
  for (int blocks : {2, 4, 8}) {
    IUNet model = randomized(small_config(DType::F32, blocks));
    const Tensor x = idm::testing::random_tensor(9, {1, 1, 8, 8, 8}, DType::F32);
    for (BackpropMode mode : {BackpropMode::StoreAll, BackpropMode::InvertibleRecompute}) {
      MemoryTracker tracker(mode);
      ModelPass pass(model, mode, tracker);
      pass.forward(x, 3);
      pass.backward(Tensor::ones(x.shape()));
      (mode == BackpropMode::StoreAll ? store : inv).push_back(static_cast<double>(tracker.report().peak_bytes));
    }
  }
  for (double p : inv) EXPECT_NEAR(p / inv[0], 1.0, 0.1);
  EXPECT_LT(store[0], store[1]);
  EXPECT_LT(store[1], store[2]);
  // growth is affine in the block count
  EXPECT_NEAR(store[2] - store[1], 2 * (store[1] - store[0]), 1e-9 * store[2]);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  IUNet model = randomized(small_config(DType::F32));
  const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
  checkpoint_save(model, a);
  IUNet loaded = checkpoint_load(a);
  checkpoint_save(loaded, b);
  EXPECT_EQ(slurp(a), slurp(b));
  const Tensor x = idm::testing::random_tensor(10, {1, 1, 8, 8, 8}, DType::F32);
  EXPECT_TRUE(identical(model.predict(x, 4), loaded.predict(x, 4)));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Checkpoint, CorruptedMagicRejected) {
  IUNet model(small_config(DType::F32));
  const auto p = temp_path("bad.ckpt");
  checkpoint_save(model, p);
  auto bytes = slurp(p);
  bytes[0] = 'X';
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  EXPECT_THROW(checkpoint_load(p), FormatError);
  std::filesystem::remove(p);
}

TEST(Checkpoint, TruncatedAndTrailingRejected) {
  IUNet model(small_config(DType::F64));
  const auto p = temp_path("trunc.ckpt");
  checkpoint_save(model, p);
  auto bytes = slurp(p);
  for (std::size_t keep : {std::size_t{4}, std::size_t{20}, bytes.size() - 1}) {
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(bytes.data()), keep);
    EXPECT_THROW(checkpoint_load(p), FormatError) << keep;
  }
  bytes.push_back(0);
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  EXPECT_THROW(checkpoint_load(p), FormatError);
  std::filesystem::remove(p);
  EXPECT_THROW(checkpoint_load(temp_path("missing.ckpt")), FormatError);
}
