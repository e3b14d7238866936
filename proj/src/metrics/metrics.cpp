#include "idm/metrics.hpp"

#include <cmath>
#include <sstream>

#include "idm/errors.hpp"

namespace idm {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  if (a.rank() < 3) throw ShapeError(std::string(what) + ": needs at least three dimensions");
}

// Inclusive-exclusive 3D summed-area table with a zero border: (d+1)(h+1)(w+1) entries.
class SummedVolume {
 public:
  SummedVolume(const std::vector<double>& v, std::int64_t d, std::int64_t h, std::int64_t w)
      : h1_(h + 1), w1_(w + 1), s_(static_cast<std::size_t>((d + 1) * (h + 1) * (w + 1)), 0.0) {
    for (std::int64_t z = 1; z <= d; ++z)
      for (std::int64_t y = 1; y <= h; ++y)
        for (std::int64_t x = 1; x <= w; ++x) {
          const double val = v[static_cast<std::size_t>(((z - 1) * h + (y - 1)) * w + (x - 1))];
          at(z, y, x) = val + at(z - 1, y, x) + at(z, y - 1, x) + at(z, y, x - 1) - at(z - 1, y - 1, x) -
                        at(z - 1, y, x - 1) - at(z, y - 1, x - 1) + at(z - 1, y - 1, x - 1);
        }
  }

  // Sum over the cube [z, z+n) x [y, y+n) x [x, x+n).
  double cube(std::int64_t z, std::int64_t y, std::int64_t x, std::int64_t n) const {
    const auto z1 = z + n, y1 = y + n, x1 = x + n;
    return at(z1, y1, x1) - at(z, y1, x1) - at(z1, y, x1) - at(z1, y1, x) + at(z, y, x1) + at(z, y1, x) +
           at(z1, y, x) - at(z, y, x);
  }

 private:
  double& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return s_[static_cast<std::size_t>((z * h1_ + y) * w1_ + x)];
  }
  double at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return s_[static_cast<std::size_t>((z * h1_ + y) * w1_ + x)];
  }

  std::int64_t h1_, w1_;
  std::vector<double> s_;
};

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "psnr");
  const auto va = a.to_vector(), vb = b.to_vector();
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += (va[i] - vb[i]) * (va[i] - vb[i]);
  const double mse = s / static_cast<double>(va.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double mae(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "mae");
  const auto va = a.to_vector(), vb = b.to_vector();
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += std::abs(va[i] - vb[i]);
  return s / static_cast<double>(va.size());
}

double ssim3d(const Tensor& a, const Tensor& b, int window, double c1, double c2) {
  check_pair(a, b, "ssim3d");
  if (window < 1) throw ShapeError("ssim3d: window must be >= 1");
  const int r = a.rank();
  const std::int64_t d = a.dim(r - 3), h = a.dim(r - 2), w = a.dim(r - 1);
  if (d < window || h < window || w < window)
    throw ShapeError("ssim3d: volume " + shape_string(a.shape()) + " smaller than window " + std::to_string(window));
  const std::int64_t vox = d * h * w;
  const std::int64_t count = a.numel() / vox;
  const auto va = a.to_vector(), vb = b.to_vector();
  const double n = static_cast<double>(window) * window * window;
  double total = 0;
  std::int64_t windows = 0;
  for (std::int64_t k = 0; k < count; ++k) {
    std::vector<double> xa(va.begin() + k * vox, va.begin() + (k + 1) * vox);
    std::vector<double> xb(vb.begin() + k * vox, vb.begin() + (k + 1) * vox);
    std::vector<double> aa(xa.size()), bb(xa.size()), ab(xa.size());
    for (std::size_t i = 0; i < xa.size(); ++i) {
      aa[i] = xa[i] * xa[i];
      bb[i] = xb[i] * xb[i];
      ab[i] = xa[i] * xb[i];
    }
    const SummedVolume sa(xa, d, h, w), sb(xb, d, h, w), saa(aa, d, h, w), sbb(bb, d, h, w), sab(ab, d, h, w);
    for (std::int64_t z = 0; z + window <= d; ++z)
      for (std::int64_t y = 0; y + window <= h; ++y)
        for (std::int64_t x = 0; x + window <= w; ++x) {
          const double mu_a = sa.cube(z, y, x, window) / n;
          const double mu_b = sb.cube(z, y, x, window) / n;
          const double var_a = saa.cube(z, y, x, window) / n - mu_a * mu_a;
          const double var_b = sbb.cube(z, y, x, window) / n - mu_b * mu_b;
          const double cov = sab.cube(z, y, x, window) / n - mu_a * mu_b;
          total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
          ++windows;
        }
  }
  return total / static_cast<double>(windows);
}

MetricReport evaluate_metrics(const Tensor& a, const Tensor& b) { return {psnr(a, b), ssim3d(a, b), mae(a, b)}; }

std::string format_bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "mode,blocks,peak_bytes,flops\n";
  for (const auto& r : rows) out << mode_name(r.mode) << ',' << r.blocks << ',' << r.peak_bytes << ',' << r.flops << '\n';
  return out.str();
}

std::string format_timeline_csv(const MemoryReport& report) {
  std::ostringstream out;
  out << "op_index,live_bytes\n";
  for (const auto& s : report.timeline) out << s.op_index << ',' << s.live_bytes << '\n';
  return out.str();
}

}  // namespace idm
