#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "idm/cli.hpp"
#include "idm/data.hpp"
#include "idm/ops.hpp"

using namespace idm;
using namespace idm::cli;
namespace fs = std::filesystem;

namespace {

class Workspace {
 public:
  Workspace() {
    root_ = fs::temp_directory_path() /
            ("idm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Workspace() { fs::remove_all(root_); }
  fs::path operator/(const std::string& name) const { return root_ / name; }

 private:
  fs::path root_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Runs the command-line binary and returns its exit status.
int run_binary(const std::string& args, const fs::path& capture) {
  const std::string cmd = std::string(IDM_CLI_PATH) + " " + args + " > " + capture.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string small_config(const fs::path& data_dir, int steps, int blocks = 1) {
  std::ostringstream s;
  s << "# tiny model\n"
    << "volume_edge = 8\nlevels = 2\nbase_channels = 4\nblocks_per_level = " << blocks << "\n"
    << "time_embed_dim = 8\ntimesteps = 50\n"
    << "steps = " << steps << "\nbatch = 2\nseed = 3\n";
  if (!data_dir.empty()) s << "data_dir = " << data_dir.string() << "\n";
  return s.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(RunConfig, Defaults) {
  const RunConfig rc = RunConfig::parse("");
  EXPECT_EQ(rc.model.timesteps, 2000);
  EXPECT_EQ(rc.train.lr, 2e-4);
  EXPECT_EQ(rc.train.lambda_l2, 1e-4);
  EXPECT_EQ(rc.train.lambda_r, 0.0);
  EXPECT_EQ(rc.model.volume_edge, 16);
  EXPECT_EQ(rc.model.levels, 3);
  EXPECT_EQ(rc.model.channel_schedule, (std::vector<long>{8, 16, 32}));
  EXPECT_EQ(rc.model.attn_levels, (std::vector<long>{1, 2}));
  EXPECT_TRUE(rc.data_dir.empty());
}

TEST(RunConfig, ParseOverrideAndRoundTrip) {
  const RunConfig rc = RunConfig::parse("levels = 2\nbase_channels = 4\n# comment\nlr = 1e-3\nmode = invertible\n",
                                        {{"lr", "5e-4"}, {"data_dir", "/tmp/x"}});
  EXPECT_EQ(rc.model.levels, 2);
  EXPECT_EQ(rc.model.channel_schedule, (std::vector<long>{4, 8}));
  EXPECT_EQ(rc.model.attn_levels, (std::vector<long>{0, 1}));
  EXPECT_EQ(rc.train.lr, 5e-4);
  EXPECT_EQ(rc.train.mode, BackpropMode::InvertibleRecompute);
  EXPECT_EQ(rc.data_dir, "/tmp/x");
  const RunConfig again = RunConfig::parse(rc.to_text());
  EXPECT_EQ(again.to_text(), rc.to_text());
}

TEST(RunConfig, Errors) {
  EXPECT_THROW(RunConfig::parse("bogus = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("lr = fast\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("levels\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("", {{"bogus", "1"}}), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = sometimes\n"), ConfigError);
  EXPECT_THROW(parse_overrides({"noequals"}), ConfigError);
  EXPECT_EQ(parse_overrides({"a=1", "b = two"}), (std::map<std::string, std::string>{{"a", "1"}, {"b", "two"}}));
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), FormatError);
}

TEST(RunConfig, Fnv1aVectors) {
  EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64("foobar", 6), 0x85944171f73967e8ull);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

TEST(GenData, FileSizesAndChecksum) {
  Workspace ws;
  std::ostringstream o1, o2;
  ASSERT_EQ(cmd_gen_data({ws / "a", 64, 16, 5}, o1), kOk);
  ASSERT_EQ(cmd_gen_data({ws / "b", 64, 16, 5}, o2), kOk);
  const auto files = list_volumes(ws / "a");
  ASSERT_EQ(files.size(), 64u);
  for (const auto& f : files) EXPECT_EQ(fs::file_size(f), 22u + 4u * 16u * 16u * 16u);
  auto checksum = [](const std::string& s) { return s.substr(s.find("manifest checksum")); };
  EXPECT_EQ(checksum(o1.str()), checksum(o2.str()));
  EXPECT_EQ(slurp(ws / "a" / "manifest.txt"), slurp(ws / "b" / "manifest.txt"));
  std::ostringstream o3;
  cmd_gen_data({ws / "c", 64, 16, 6}, o3);
  EXPECT_NE(checksum(o1.str()), checksum(o3.str()));
}

TEST(GenData, EmptyManifest) {
  Workspace ws;
  std::ostringstream out;
  EXPECT_EQ(cmd_gen_data({ws / "empty", 0, 8, 1}, out), kOk);
  EXPECT_TRUE(list_volumes(ws / "empty").empty());
  EXPECT_EQ(slurp(ws / "empty" / "manifest.txt"), "");
  EXPECT_NE(out.str().find("manifest checksum cbf29ce484222325"), std::string::npos);
}

// ---------------------------------------------------------------------------
// train / sample
// ---------------------------------------------------------------------------

TEST(Train, DeterministicAndModesAgree) {
  Workspace ws;
  std::ostringstream sink;
  cmd_gen_data({ws / "data", 6, 8, 2}, sink);
  write(ws / "run.cfg", small_config(ws / "data", 6, 4));
  auto train_once = [&](const std::string& name, BackpropMode mode) {
    TrainOptions opt;
    opt.config = ws / "run.cfg";
    opt.mode = mode;
    opt.checkpoint = ws / (name + ".ckpt");
    opt.log = ws / (name + ".csv");
    EXPECT_EQ(cmd_train(opt, sink), kOk);
    return read_csv(opt.log);
  };
  const auto a = train_once("a", BackpropMode::StoreAll);
  const auto b = train_once("b", BackpropMode::StoreAll);
  const auto c = train_once("c", BackpropMode::InvertibleRecompute);
  EXPECT_EQ(slurp(ws / "a.csv"), slurp(ws / "b.csv"));
  EXPECT_EQ(slurp(ws / "a.ckpt"), slurp(ws / "b.ckpt"));
  ASSERT_EQ(a.size(), 7u);
  EXPECT_EQ(a[0], (std::vector<std::string>{"step", "loss", "lr", "peak_bytes"}));
  for (std::size_t i = 1; i < a.size(); ++i) {
    const double la = std::stod(a[i][1]), lc = std::stod(c[i][1]);
    EXPECT_NEAR(lc, la, 1e-4 * la) << i;
    EXPECT_LT(std::stoull(c[i][3]), std::stoull(a[i][3])) << i;
    EXPECT_EQ(a[i][2], c[i][2]);
  }
}

TEST(Train, MissingDataDirIsNamed) {
  Workspace ws;
  write(ws / "run.cfg", small_config({}, 2));
  TrainOptions opt;
  opt.config = ws / "run.cfg";
  std::ostringstream out;
  try {
    cmd_train(opt, out);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data_dir"), std::string::npos);
  }
}

TEST(Sample, UntrainedCheckpoint) {
  Workspace ws;
  IUNetConfig cfg = IUNetConfig::with_defaults(8, 2, 4, 1);
  cfg.time_embed_dim = 8;
  cfg.timesteps = 30;
  checkpoint_save(IUNet(cfg), ws / "m.ckpt");
  std::ostringstream out;
  ASSERT_EQ(cmd_sample({ws / "m.ckpt", 3, 9, ws / "s1"}, out), kOk);
  ASSERT_EQ(cmd_sample({ws / "m.ckpt", 3, 9, ws / "s2"}, out), kOk);
  const auto files = list_volumes(ws / "s1");
  ASSERT_EQ(files.size(), 3u);
  for (const auto& f : files) {
    const Volume v = volume_read(f);
    EXPECT_EQ(v.tensor.shape(), (Shape{1, 8, 8, 8}));
    EXPECT_TRUE(ops::all_finite(v.tensor));
    EXPECT_GE(ops::min_value(v.tensor), 0.0);
    EXPECT_LE(ops::max_value(v.tensor), 1.0);
    EXPECT_EQ(slurp(f), slurp(ws / "s2" / f.filename()));
  }
  EXPECT_THROW(cmd_sample({ws / "missing.ckpt", 1, 0, ws / "s3"}, out), FormatError);
}

// ---------------------------------------------------------------------------
// roundtrip / bench
// ---------------------------------------------------------------------------

TEST(Roundtrip, IdentityAndRandomTrunks) {
  IUNetConfig cfg = IUNetConfig::with_defaults(8, 2, 4, 2);
  cfg.time_embed_dim = 8;
  cfg.timesteps = 50;
  cfg.dtype = DType::F64;
  cfg.attn_levels = {1};  // level 0 keeps a plain merge
  const RoundtripResult id = run_roundtrip(cfg, 5, true, 1);
  EXPECT_LE(id.trunk_max_rel, 1e-12);
  const RoundtripResult r64 = run_roundtrip(cfg, 10, false, 2);
  EXPECT_LE(r64.trunk_max_rel, 1e-9);
  EXPECT_GT(r64.trunk_max_rel, 0.0);
  for (const char* type : {"coupling", "attention", "resample", "split", "merge"}) {
    ASSERT_TRUE(r64.block_max_rel.count(type)) << type;
    EXPECT_LE(r64.block_max_rel.at(type), 1e-10) << type;
  }
  cfg.dtype = DType::F32;
  const RoundtripResult r32 = run_roundtrip(cfg, 10, false, 2);
  EXPECT_LE(r32.trunk_max_rel, 1e-4);
  EXPECT_EQ(r32.tolerance, 1e-4);
  RecordProperty("trunk_f64", std::to_string(r64.trunk_max_rel));
  RecordProperty("trunk_f32", std::to_string(r32.trunk_max_rel));
}

TEST(Roundtrip, CommandReport) {
  Workspace ws;
  write(ws / "run.cfg", small_config({}, 1));
  RoundtripOptions opt;
  opt.config = ws / "run.cfg";
  opt.trials = 3;
  std::ostringstream out;
  EXPECT_EQ(cmd_roundtrip(opt, out), kOk);
  EXPECT_NE(out.str().find("block coupling"), std::string::npos);
  EXPECT_NE(out.str().find("trunk"), std::string::npos);
  opt.trials = 0;
  EXPECT_THROW(cmd_roundtrip(opt, out), ConfigError);
}

TEST(Bench, StoreGrowsInvertibleFlat) {
  BenchOptions opt;
  opt.edge = 8;
  opt.levels = 2;
  opt.base_channels = 4;
  opt.blocks = {2, 4, 8};
  const auto rows = run_bench(opt);
  ASSERT_EQ(rows.size(), 6u);
  std::vector<std::size_t> store, inv;
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    EXPECT_EQ(rows[i].mode, BackpropMode::StoreAll);
    EXPECT_EQ(rows[i + 1].mode, BackpropMode::InvertibleRecompute);
    EXPECT_GT(rows[i + 1].flops, rows[i].flops);
    EXPECT_LT(rows[i + 1].peak_bytes, rows[i].peak_bytes);
    store.push_back(rows[i].peak_bytes);
    inv.push_back(rows[i + 1].peak_bytes);
  }
  EXPECT_LT(store[0], store[1]);
  EXPECT_LT(store[1], store[2]);
  EXPECT_NEAR(static_cast<double>(inv[2]) / static_cast<double>(inv[0]), 1.0, 0.1);
  Workspace ws;
  opt.blocks = {2};
  opt.out = ws / "bench.csv";
  std::ostringstream out;
  EXPECT_EQ(cmd_bench_mem(opt, out), kOk);
  EXPECT_EQ(slurp(opt.out), out.str());
  EXPECT_EQ(read_csv(opt.out).size(), 3u);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

TEST(MetricsCommand, IdenticalDirectories) {
  Workspace ws;
  std::ostringstream sink;
  cmd_gen_data({ws / "a", 3, 8, 4}, sink);
  std::ostringstream out;
  ASSERT_EQ(cmd_metrics({ws / "a", ws / "a", ws / "m.csv"}, out), kOk);
  const auto rows = read_csv(ws / "m.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"name", "psnr", "ssim", "mae"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(std::stod(rows[i][1]), 100.0);
    EXPECT_NEAR(std::stod(rows[i][2]), 1.0, 1e-6);
    EXPECT_EQ(std::stod(rows[i][3]), 0.0);
  }
  EXPECT_EQ(rows[4][0], "mean");
}

TEST(MetricsCommand, MeanRowAndMismatch) {
  Workspace ws;
  std::ostringstream sink;
  cmd_gen_data({ws / "a", 3, 8, 4}, sink);
  cmd_gen_data({ws / "b", 3, 8, 5}, sink);
  std::ostringstream out;
  ASSERT_EQ(cmd_metrics({ws / "a", ws / "b", ws / "m.csv"}, out), kOk);
  const auto rows = read_csv(ws / "m.csv");
  ASSERT_EQ(rows.size(), 5u);
  for (int col = 1; col <= 3; ++col) {
    double sum = 0;
    for (std::size_t i = 1; i <= 3; ++i) sum += std::stod(rows[i][col]);
    EXPECT_NEAR(std::stod(rows[4][col]), sum / 3, 1e-9 * std::max(1.0, std::abs(sum)));
  }
  cmd_gen_data({ws / "c", 2, 8, 4}, sink);
  EXPECT_THROW(cmd_metrics({ws / "a", ws / "c", {}}, out), FormatError);
}

// ---------------------------------------------------------------------------
// binary exit codes
// ---------------------------------------------------------------------------

TEST(Binary, ExitCodes) {
  Workspace ws;
  const fs::path log = ws / "log.txt";
  EXPECT_EQ(run_binary("--help", log), 0);
  EXPECT_EQ(run_binary("no-such-command", log), 2);
  EXPECT_EQ(run_binary("gen-data --out " + (ws / "d").string() + " --n 2 --edge 8 --seed 1", log), 0);
  EXPECT_NE(slurp(log).find("manifest checksum"), std::string::npos);

  write(ws / "nodata.cfg", small_config({}, 1));
  EXPECT_EQ(run_binary("train --config " + (ws / "nodata.cfg").string(), log), 2);
  EXPECT_NE(slurp(log).find("data_dir"), std::string::npos);

  write(ws / "bad.cfg", "unknown_key = 1\n");
  EXPECT_EQ(run_binary("train --config " + (ws / "bad.cfg").string(), log), 2);
  EXPECT_NE(slurp(log).find("unknown_key"), std::string::npos);

  EXPECT_EQ(run_binary("metrics --a " + (ws / "d").string() + " --b " + (ws / "missing").string(), log), 4);
  EXPECT_EQ(run_binary("sample --ckpt " + (ws / "missing.ckpt").string() + " --out " + (ws / "s").string(), log), 4);

  write(ws / "ok.cfg", small_config(ws / "d", 2));
  EXPECT_EQ(run_binary("train --config " + (ws / "ok.cfg").string() + " --mode invertible --out " +
                           (ws / "m.ckpt").string() + " --log " + (ws / "t.csv").string(),
                       log),
            0);
  EXPECT_EQ(read_csv(ws / "t.csv").size(), 3u);
  EXPECT_EQ(run_binary("sample --ckpt " + (ws / "m.ckpt").string() + " --n 1 --seed 2 --out " + (ws / "s").string(), log), 0);
  EXPECT_EQ(list_volumes(ws / "s").size(), 1u);
  EXPECT_EQ(run_binary("roundtrip --config " + (ws / "ok.cfg").string() + " --trials 2 --dtype f64", log), 0);
  EXPECT_EQ(run_binary("bench-mem --edge 8 --levels 2 --base 4 --blocks-list 2,4 --mode both", log), 0);
  EXPECT_EQ(read_csv(log).size(), 5u);
}
