#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "idm/cli.hpp"
#include "idm/data.hpp"
#include "idm/flops.hpp"
#include "idm/keyvalue.hpp"
#include "idm/ops.hpp"

namespace idm::cli {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw FormatError("write to '" + path.string() + "' failed");
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory '" + dir.string() + "': " + ec.message());
}

double relative(const Tensor& got, const Tensor& want) {
  return ops::max_abs_diff(got, want) / std::max(ops::max_abs(want), 1e-300);
}

std::string block_type(const Node& node) {
  if (dynamic_cast<const AdditiveCoupling*>(&node)) return "coupling";
  if (dynamic_cast<const AttentionCoupling*>(&node)) return "attention";
  if (dynamic_cast<const OrthoResample*>(&node)) return "resample";
  if (dynamic_cast<const ChannelSplit*>(&node)) return "split";
  if (dynamic_cast<const ChannelMerge*>(&node)) return "merge";
  return node.name();
}

Tensor slice_batch(const Tensor& batch, std::int64_t index) {
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  Tensor out(shape, batch.dtype());
  visit_dtype(batch.dtype(), [&]<class T>() {
    auto src = batch.data<T>();
    auto dst = out.data<T>();
    std::copy_n(src.begin() + index * static_cast<std::int64_t>(dst.size()), dst.size(), dst.begin());
  });
  return out;
}

}  // namespace

int cmd_gen_data(const GenDataOptions& opt, std::ostream& out) {
  if (opt.n < 0) throw ConfigError("--n must be >= 0");
  ensure_dir(opt.out);
  const auto volumes = gen_dataset(opt.seed, opt.n, opt.edge);
  std::string manifest;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    const std::string name = volume_filename(static_cast<std::int64_t>(i));
    volume_write(opt.out / name, volumes[i]);
    manifest += name + " " + hex64(file_checksum(opt.out / name)) + "\n";
  }
  write_text(opt.out / "manifest.txt", manifest);
  out << "wrote " << volumes.size() << " volumes to " << opt.out.string() << "\n";
  out << "manifest checksum " << hex64(fnv1a64(manifest.data(), manifest.size())) << "\n";
  return kOk;
}

int cmd_train(const TrainOptions& opt, std::ostream& out) {
  RunConfig rc = RunConfig::load(opt.config, opt.overrides);
  if (opt.mode) rc.train.mode = *opt.mode;
  if (rc.data_dir.empty()) throw ConfigError("missing required config key 'data_dir'");
  const auto paths = list_volumes(rc.data_dir);
  if (paths.empty()) throw FormatError("no .idmv volumes in '" + rc.data_dir + "'");
  std::vector<Tensor> dataset;
  const std::int64_t e = rc.model.volume_edge;
  for (const auto& p : paths) {
    Volume v = volume_read(p);
    if (v.tensor.shape() != Shape{1, e, e, e})
      throw ConfigError("volume '" + p.string() + "' is " + shape_string(v.tensor.shape()) + " but volume_edge is " +
                        std::to_string(e));
    dataset.push_back(v.tensor.astype(rc.model.dtype));
  }

  IUNet model(rc.model);
  const BetaSchedule sched = cosine_schedule(rc.model.timesteps);
  std::ofstream log;
  if (!opt.log.empty()) {
    log.open(opt.log, std::ios::trunc);
    if (!log) throw FormatError("cannot open log '" + opt.log.string() + "'");
    log << "step,loss,lr,peak_bytes\n";
  }
  out << "training " << model.parameter_count() << " parameters on " << dataset.size() << " volumes, mode "
      << mode_name(rc.train.mode) << "\n";
  const auto history = train(model, dataset, rc.train, sched, [&](const StepStats& s) {
    if (log.is_open())
      log << s.step << ',' << format_double(s.loss) << ',' << format_double(s.lr) << ',' << s.peak_bytes << '\n';
    if (opt.print_every > 0 && s.step % opt.print_every == 0)
      out << "step " << s.step << " loss " << format_double(s.loss) << " lr " << format_double(s.lr) << "\n";
  });
  if (log.is_open()) {
    log.flush();
    if (!log) throw FormatError("write to log '" + opt.log.string() + "' failed");
  }
  if (!opt.checkpoint.empty()) checkpoint_save(model, opt.checkpoint);
  out << "final loss " << format_double(history.back().loss) << " peak_bytes " << history.back().peak_bytes << "\n";
  return kOk;
}

int cmd_sample(const SampleOptions& opt, std::ostream& out) {
  if (opt.n < 0) throw ConfigError("--n must be >= 0");
  const IUNet model = checkpoint_load(opt.checkpoint);
  ensure_dir(opt.out);
  if (opt.n > 0) {
    const BetaSchedule sched = cosine_schedule(model.config().timesteps);
    Prng prng(opt.seed);
    const Tensor samples = p_sample_loop(model, opt.n, prng, sched);
    for (std::int64_t i = 0; i < opt.n; ++i) {
      Volume v;
      v.tensor = slice_batch(samples, i);
      volume_write(opt.out / volume_filename(i), v);
    }
  }
  out << "wrote " << opt.n << " samples to " << opt.out.string() << "\n";
  return kOk;
}

RoundtripResult run_roundtrip(const IUNetConfig& cfg, int trials, bool identity_init, std::uint64_t seed) {
  IUNet model(cfg);
  if (!identity_init) {
    Prng init(seed ^ 0x9e3779b97f4a7c15ull);
    randomize_parameters(model, init);
  }
  RoundtripResult result;
  result.tolerance = cfg.dtype == DType::F32 ? 1e-4 : 1e-9;
  Prng prng(seed);
  const std::int64_t e = cfg.volume_edge;
  for (int trial = 0; trial < trials; ++trial) {
    const int t = 1 + static_cast<int>(prng.below(static_cast<std::uint64_t>(cfg.timesteps)));
    const Tensor h = ops::randn(prng, {1, cfg.base_channels, e, e, e}, cfg.dtype);
    const Tensor emb = model.time_embedding().forward(t);
    const RunContext ctx{&emb, nullptr};
    TensorList stack{h};
    for (Node* node : model.trunk_nodes()) {
      TensorList in(stack.end() - node->arity_in(), stack.end());
      stack.resize(stack.size() - static_cast<std::size_t>(node->arity_in()));
      TensorList outs = node->forward(in, ctx);
      const TensorList back = node->inverse(outs, ctx);
      double& worst = result.block_max_rel[block_type(*node)];
      for (std::size_t i = 0; i < in.size(); ++i) worst = std::max(worst, relative(back[i], in[i]));
      for (auto& o : outs) stack.push_back(std::move(o));
    }
    result.trunk_max_rel = std::max(result.trunk_max_rel, relative(model.trunk_inverse(stack.at(0), t), h));
  }
  return result;
}

int cmd_roundtrip(const RoundtripOptions& opt, std::ostream& out) {
  if (opt.trials < 1) throw ConfigError("--trials must be >= 1");
  RunConfig rc = RunConfig::load(opt.config, opt.overrides);
  rc.model.dtype = opt.dtype;
  const auto r = run_roundtrip(rc.model, opt.trials, opt.identity_init, rc.train.seed);
  char buf[96];
  for (const auto& [type, err] : r.block_max_rel) {
    std::snprintf(buf, sizeof buf, "block %-10s max_rel %.3e\n", type.c_str(), err);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "trunk %-10s max_rel %.3e (tolerance %.0e, %d trials, %s)\n", "", r.trunk_max_rel,
                r.tolerance, opt.trials, dtype_name(opt.dtype).c_str());
  out << buf;
  if (!(r.trunk_max_rel <= r.tolerance)) {
    out << "FAIL: trunk roundtrip error above tolerance\n";
    return kDivergence;
  }
  return kOk;
}

std::vector<BenchRow> run_bench(const BenchOptions& opt) {
  std::vector<BenchRow> rows;
  for (long blocks : opt.blocks) {
    IUNetConfig cfg = IUNetConfig::with_defaults(opt.edge, opt.levels, opt.base_channels, static_cast<int>(blocks));
    IUNet model(cfg);
    Prng prng(opt.seed);
    const std::int64_t e = cfg.volume_edge;
    const Tensor x0 = ops::rand_uniform(prng, {opt.batch, 1, e, e, e}, 0.0, 1.0, cfg.dtype);
    const Tensor eps = ops::randn(prng, x0.shape(), cfg.dtype);
    const BetaSchedule sched = cosine_schedule(cfg.timesteps);
    const int t = cfg.timesteps / 2;
    const Tensor x_t = q_sample(x0, t, eps, sched);
    for (BackpropMode mode : opt.modes) {
      TrainConfig tc;
      tc.mode = mode;
      model.zero_grad();
      MemoryTracker tracker(mode);
      const flops::Scope counted;
      loss_and_gradients(model, x_t, t, eps, tc, tracker);
      rows.push_back({mode, static_cast<int>(blocks), tracker.report().peak_bytes, counted.elapsed()});
    }
  }
  return rows;
}

int cmd_bench_mem(const BenchOptions& opt, std::ostream& out) {
  if (opt.blocks.empty()) throw ConfigError("--blocks-list must name at least one block count");
  const std::string csv = format_bench_csv(run_bench(opt));
  if (!opt.out.empty()) write_text(opt.out, csv);
  out << csv;
  return kOk;
}

int cmd_metrics(const MetricsOptions& opt, std::ostream& out) {
  const auto a = list_volumes(opt.a);
  const auto b = list_volumes(opt.b);
  if (a.size() != b.size())
    throw FormatError("mismatched volume counts: " + std::to_string(a.size()) + " in '" + opt.a.string() + "', " +
                      std::to_string(b.size()) + " in '" + opt.b.string() + "'");
  if (a.empty()) throw FormatError("no .idmv volumes to compare");
  std::ostringstream csv;
  csv << "name,psnr,ssim,mae\n";
  MetricReport mean;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].filename() != b[i].filename())
      throw FormatError("unpaired volume '" + a[i].filename().string() + "' vs '" + b[i].filename().string() + "'");
    const MetricReport m = evaluate_metrics(volume_read(a[i]).tensor, volume_read(b[i]).tensor);
    csv << a[i].filename().string() << ',' << format_double(m.psnr_db) << ',' << format_double(m.ssim) << ','
        << format_double(m.mae) << '\n';
    mean.psnr_db += m.psnr_db;
    mean.ssim += m.ssim;
    mean.mae += m.mae;
  }
  const double n = static_cast<double>(a.size());
  csv << "mean," << format_double(mean.psnr_db / n) << ',' << format_double(mean.ssim / n) << ','
      << format_double(mean.mae / n) << '\n';
  if (!opt.out.empty()) write_text(opt.out, csv.str());
  out << csv.str();
  return kOk;
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const ReconstructionError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const NumericDomainError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const FormatError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoError;
  }
}

}  // namespace idm::cli
