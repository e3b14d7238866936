#include <iostream>

#include "CLI11.hpp"
#include "idm/cli.hpp"

using namespace idm;

int main(int argc, char** argv) {
  CLI::App app{"Invertible diffusion model: data, training, sampling and memory benchmarks"};
  app.require_subcommand(1);

  cli::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic phantom volumes");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of volumes")->capture_default_str();
  gen_cmd->add_option("--edge", gen.edge, "Volume edge length")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  cli::TrainOptions tr;
  std::string train_mode;
  std::vector<std::string> train_sets;
  auto* train_cmd = app.add_subcommand("train", "Train the noise predictor");
  train_cmd->add_option("--config", tr.config, "Run config file")->required();
  train_cmd->add_option("--mode", train_mode, "Backprop mode")->check(CLI::IsMember({"store", "invertible"}));
  train_cmd->add_option("--out", tr.checkpoint, "Checkpoint path");
  train_cmd->add_option("--log", tr.log, "CSV log path");
  train_cmd->add_option("--set", train_sets, "Config override key=value");
  train_cmd->add_option("--print-every", tr.print_every, "Progress interval in steps")->capture_default_str();

  cli::SampleOptions smp;
  auto* sample_cmd = app.add_subcommand("sample", "Draw volumes from a checkpoint");
  sample_cmd->add_option("--ckpt", smp.checkpoint, "Checkpoint path")->required();
  sample_cmd->add_option("--n", smp.n, "Number of samples")->capture_default_str();
  sample_cmd->add_option("--seed", smp.seed, "Sampler seed")->capture_default_str();
  sample_cmd->add_option("--out", smp.out, "Output directory")->required();

  cli::RoundtripOptions rt;
  std::string rt_dtype = "f64";
  std::vector<std::string> rt_sets;
  auto* rt_cmd = app.add_subcommand("roundtrip", "Measure invertibility of every block and the trunk");
  rt_cmd->add_option("--config", rt.config, "Run config file")->required();
  rt_cmd->add_option("--trials", rt.trials, "Random inputs")->capture_default_str();
  rt_cmd->add_option("--dtype", rt_dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
  rt_cmd->add_flag("--identity-init", rt.identity_init, "Keep the identity initialisation");
  rt_cmd->add_option("--set", rt_sets, "Config override key=value");

  cli::BenchOptions bench;
  std::string bench_mode = "both";
  auto* bench_cmd = app.add_subcommand("bench-mem", "Peak activation memory and FLOPs per training step");
  bench_cmd->add_option("--edge", bench.edge, "Volume edge")->capture_default_str();
  bench_cmd->add_option("--levels", bench.levels, "Levels")->capture_default_str();
  bench_cmd->add_option("--base", bench.base_channels, "Base channels")->capture_default_str();
  bench_cmd->add_option("--blocks-list", bench.blocks, "Blocks per level")->delimiter(',');
  bench_cmd->add_option("--batch", bench.batch, "Batch size")->capture_default_str();
  bench_cmd->add_option("--mode", bench_mode, "store, invertible or both")
      ->check(CLI::IsMember({"store", "invertible", "both"}))
      ->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "CSV path");

  cli::MetricsOptions met;
  auto* metrics_cmd = app.add_subcommand("metrics", "PSNR, SSIM and MAE between paired volumes");
  metrics_cmd->add_option("--a", met.a, "First directory")->required();
  metrics_cmd->add_option("--b", met.b, "Second directory")->required();
  metrics_cmd->add_option("--out", met.out, "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  return cli::guarded(std::cerr, [&]() -> int {
    if (*gen_cmd) return cli::cmd_gen_data(gen, std::cout);
    if (*train_cmd) {
      if (!train_mode.empty()) tr.mode = parse_mode(train_mode);
      tr.overrides = cli::parse_overrides(train_sets);
      return cli::cmd_train(tr, std::cout);
    }
    if (*sample_cmd) return cli::cmd_sample(smp, std::cout);
    if (*rt_cmd) {
      rt.dtype = parse_dtype(rt_dtype);
      rt.overrides = cli::parse_overrides(rt_sets);
      return cli::cmd_roundtrip(rt, std::cout);
    }
    if (*bench_cmd) {
      if (bench_mode == "store") bench.modes = {BackpropMode::StoreAll};
      if (bench_mode == "invertible") bench.modes = {BackpropMode::InvertibleRecompute};
      return cli::cmd_bench_mem(bench, std::cout);
    }
    return cli::cmd_metrics(met, std::cout);
  });
}
