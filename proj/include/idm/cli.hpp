#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idm/diffusion.hpp"
#include "idm/iunet.hpp"
#include "idm/metrics.hpp"

namespace idm::cli {

// Exit codes shared by every command.
enum ExitCode : int { kOk = 0, kConfigError = 2, kDivergence = 3, kIoError = 4 };

// Flat key = value run configuration. Model keys: volume_edge, levels, base_channels,
// blocks_per_level, channel_schedule, attn_levels, time_embed_dim, dtype, init_seed.
// Schedule: timesteps. Training: lr, lambda_r, lambda_l2, batch, steps, adam_beta1,
// adam_beta2, adam_eps, seed, mode. Paths: data_dir.
// channel_schedule and attn_levels default to a doubling schedule with attention on the
// two deepest levels.
struct RunConfig {
  IUNetConfig model;
  TrainConfig train;
  std::string data_dir;

  static RunConfig parse(const std::string& text, const std::map<std::string, std::string>& overrides = {});
  static RunConfig load(const std::filesystem::path& path, const std::map<std::string, std::string>& overrides = {});
  std::string to_text() const;
};

// Parses "key=value" strings given on the command line.
std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& items);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);

struct GenDataOptions {
  std::filesystem::path out;
  std::int64_t n = 64;
  std::int64_t edge = 16;
  std::uint64_t seed = 0;
};
// Writes vol_%05d.idmv files plus manifest.txt ("<file> <fnv1a64>" per line) and prints
// the checksum of the manifest.
int cmd_gen_data(const GenDataOptions& opt, std::ostream& out);

struct TrainOptions {
  std::filesystem::path config;
  std::optional<BackpropMode> mode;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::map<std::string, std::string> overrides;
  int print_every = 50;
};
// Log columns: step,loss,lr,peak_bytes.
int cmd_train(const TrainOptions& opt, std::ostream& out);

struct SampleOptions {
  std::filesystem::path checkpoint;
  std::int64_t n = 4;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
int cmd_sample(const SampleOptions& opt, std::ostream& out);

struct RoundtripOptions {
  std::filesystem::path config;
  int trials = 100;
  DType dtype = DType::F64;
  bool identity_init = false;
  std::map<std::string, std::string> overrides;
};

struct RoundtripResult {
  std::map<std::string, double> block_max_rel;  // keyed by block type
  double trunk_max_rel = 0;
  double tolerance = 0;
};
RoundtripResult run_roundtrip(const IUNetConfig& cfg, int trials, bool identity_init, std::uint64_t seed);
// Exits with kDivergence when the trunk error exceeds 1e-4 (f32) or 1e-9 (f64).
int cmd_roundtrip(const RoundtripOptions& opt, std::ostream& out);

struct BenchOptions {
  std::int64_t edge = 16;
  int levels = 3;
  std::int64_t base_channels = 8;
  std::vector<long> blocks = {2, 4, 8};
  std::vector<BackpropMode> modes = {BackpropMode::StoreAll, BackpropMode::InvertibleRecompute};
  int batch = 2;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};
// Peak activation bytes and counted FLOPs of one training step per (mode, blocks).
std::vector<BenchRow> run_bench(const BenchOptions& opt);
int cmd_bench_mem(const BenchOptions& opt, std::ostream& out);

struct MetricsOptions {
  std::filesystem::path a;
  std::filesystem::path b;
  std::filesystem::path out;
};
// CSV columns: name,psnr,ssim,mae; the last row is the mean.
int cmd_metrics(const MetricsOptions& opt, std::ostream& out);

// Runs `body`, mapping library exceptions to exit codes and messages on `err`.
int guarded(std::ostream& err, const std::function<int()>& body);

}  // namespace idm::cli
