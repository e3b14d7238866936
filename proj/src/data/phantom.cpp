#include <algorithm>
#include <cmath>

#include "idm/data.hpp"
#include "idm/ops.hpp"
#include "idm/prng.hpp"

namespace idm {

void PhantomSpec::validate() const {
  if (edge < 4) throw ConfigError("phantom edge must be >= 4");
  if (n_ellipsoids < 1 || n_ellipsoids > 4) throw ConfigError("phantom needs 1 to 4 ellipsoids");
  if (!(intensity_lo > 0 && intensity_lo <= intensity_hi)) throw ConfigError("phantom intensity range invalid");
  if (!(sigma > 0)) throw ConfigError("phantom sigma must be > 0");
}

namespace {

struct Ellipsoid {
  double c[3];
  double r[3];
  double intensity;
};

}  // namespace

Volume gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  Prng prng(spec.seed);
  const auto e = spec.edge;
  const double ed = static_cast<double>(e);
  std::vector<Ellipsoid> shapes;
  for (int n = 0; n < spec.n_ellipsoids; ++n) {
    Ellipsoid s{};
    for (int a = 0; a < 3; ++a) {
      const double center = prng.uniform(0.3 * ed, 0.7 * ed);
      s.c[a] = spec.centered ? (ed - 1.0) / 2.0 : center;
      s.r[a] = prng.uniform(0.12 * ed, 0.3 * ed);
    }
    s.intensity = prng.uniform(spec.intensity_lo, spec.intensity_hi);
    shapes.push_back(s);
  }

  std::vector<double> values(static_cast<std::size_t>(e * e * e), 0.0);
  const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
  for (std::int64_t z = 0; z < e; ++z)
    for (std::int64_t y = 0; y < e; ++y)
      for (std::int64_t x = 0; x < e; ++x) {
        const double p[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        double v = 0;
        for (const auto& s : shapes) {
          double q = 0;
          for (int a = 0; a < 3; ++a) q += ((p[a] - s.c[a]) / s.r[a]) * ((p[a] - s.c[a]) / s.r[a]);
          const double rho = std::sqrt(q);
          if (rho <= 1.0) {
            v += s.intensity;
          } else {
            const double dist = (rho - 1.0) * (s.r[0] + s.r[1] + s.r[2]) / 3.0;
            v += s.intensity * std::exp(-dist * dist * inv2s2);
          }
        }
        values[static_cast<std::size_t>((z * e + y) * e + x)] = v;
      }

  Volume out;
  out.tensor = normalize(Tensor::from_values({1, e, e, e}, values, DType::F64)).astype(DType::F32);
  out.seed = spec.seed;
  out.source = "phantom:" + std::to_string(spec.seed);
  return out;
}

std::vector<Volume> gen_dataset(std::uint64_t seed, std::int64_t n, std::int64_t edge) {
  if (n < 0) throw ConfigError("dataset size must be >= 0");
  PhantomSpec{.edge = edge}.validate();
  Prng prng(seed);
  std::vector<PhantomSpec> specs;
  for (std::int64_t i = 0; i < n; ++i) {
    PhantomSpec spec;
    spec.edge = edge;
    spec.n_ellipsoids = 1 + static_cast<int>(prng.below(4));
    spec.seed = prng.next_u64();
    specs.push_back(spec);
  }
  std::vector<Volume> out(specs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = gen_phantom(specs[static_cast<std::size_t>(i)]);
  return out;
}

Tensor normalize(const Tensor& t) {
  const double lo = ops::min_value(t);
  const double hi = ops::max_value(t);
  if (!(hi > lo)) throw NumericDomainError("normalize: constant input");
  Tensor out(t.shape(), t.dtype());
  visit_dtype(t.dtype(), [&]<class T>() {
    auto src = t.data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>((src[i] - lo) / (hi - lo));
  });
  return out;
}

}  // namespace idm
