#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "idm/tensor.hpp"

namespace idm {

// A single-channel volume [1,E,E,E] with values in [0,1].
struct Volume {
  Tensor tensor;
  std::string source;
  std::uint64_t seed = 0;
};

struct PhantomSpec {
  std::int64_t edge = 16;
  int n_ellipsoids = 2;  // 1..4
  double intensity_lo = 0.3;
  double intensity_hi = 1.0;
  double sigma = 1.5;  // falloff width in voxels
  bool centered = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// Sum of axis-aligned soft ellipsoids (flat inside, Gaussian falloff outside),
// renormalized to [0,1]. Deterministic per seed.
Volume gen_phantom(const PhantomSpec& spec);

// n phantoms whose specs are derived from `seed`.
std::vector<Volume> gen_dataset(std::uint64_t seed, std::int64_t n, std::int64_t edge);

// (t - min) / (max - min). Throws NumericDomainError for constant input.
Tensor normalize(const Tensor& t);

// IDMV file: "IDMV", u32 version 1, u8 dtype (0 f32, 1 f64), u8 ndim, u32 dims, raw
// little-endian values. Volumes are stored with ndim 3.
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t volume_header_bytes(int ndim) { return 4 + 4 + 1 + 1 + 4 * static_cast<std::size_t>(ndim); }

void volume_write(const std::filesystem::path& path, const Volume& v);
// Throws FormatError on bad magic, version, dtype, truncation or values outside [0,1].
Volume volume_read(const std::filesystem::path& path);

// "vol_%05d.idmv"
std::string volume_filename(std::int64_t index);
// Sorted paths of every *.idmv file in a directory.
std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir);

}  // namespace idm
