#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idm/revgraph.hpp"
#include "idm/tensor.hpp"

namespace idm {

inline constexpr double kPsnrCap = 100.0;

struct MetricReport {
  double psnr_db = 0;
  double ssim = 0;
  double mae = 0;
};

// Volumes are compared as [..., D, H, W] tensors of equal shape with data range 1.
double psnr(const Tensor& a, const Tensor& b);
// Mean SSIM over every valid window^3 cube with uniform weights and population
// statistics. Leading dimensions are treated as independent volumes.
double ssim3d(const Tensor& a, const Tensor& b, int window = 7, double c1 = 1e-4, double c2 = 9e-4);
double mae(const Tensor& a, const Tensor& b);
MetricReport evaluate_metrics(const Tensor& a, const Tensor& b);

struct BenchRow {
  BackpropMode mode = BackpropMode::StoreAll;
  int blocks = 0;
  std::size_t peak_bytes = 0;
  std::uint64_t flops = 0;
};

// "mode,blocks,peak_bytes,flops" header plus one line per row.
std::string format_bench_csv(const std::vector<BenchRow>& rows);
// "op_index,live_bytes" header plus one line per timeline sample.
std::string format_timeline_csv(const MemoryReport& report);

}  // namespace idm
