#include <algorithm>
#include <cmath>
#include <cstdio>

#include "../common/binary_io.hpp"
#include "idm/data.hpp"
#include "idm/ops.hpp"

namespace idm {

namespace {

constexpr char kMagic[4] = {'I', 'D', 'M', 'V'};

bool in_unit_range(const Tensor& t) {
  bool ok = true;
  visit_dtype(t.dtype(), [&]<class T>() {
    for (T v : t.data<T>())
      if (!(v >= T(0) && v <= T(1))) ok = false;
  });
  return ok;
}

}  // namespace

void volume_write(const std::filesystem::path& path, const Volume& v) {
  const Tensor& t = v.tensor;
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("volume must be [1,D,H,W], got " + shape_string(t.shape()));
  if (!in_unit_range(t)) throw NumericDomainError("volume values must lie in [0,1]");
  binary::Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kVolumeVersion);
  w.uint<std::uint8_t>(t.dtype() == DType::F32 ? 0 : 1);
  w.uint<std::uint8_t>(3);
  for (int a = 1; a < 4; ++a) w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.dim(a)));
  w.tensor_values(t);
  binary::write_file(path.string(), w.buffer());
}

Volume volume_read(const std::filesystem::path& path) {
  const auto buf = binary::read_file(path.string());
  const std::string what = "volume " + path.string();
  binary::Reader r(buf, what);
  if (r.bytes(4) != std::string(kMagic, 4)) throw FormatError(what + ": bad magic");
  const auto version = r.uint<std::uint32_t>();
  if (version != kVolumeVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto code = r.uint<std::uint8_t>();
  if (code > 1) throw FormatError(what + ": unknown dtype code " + std::to_string(code));
  const auto ndim = r.uint<std::uint8_t>();
  if (ndim != 3) throw FormatError(what + ": expected 3 dimensions, found " + std::to_string(ndim));
  Shape shape{1};
  for (int a = 0; a < 3; ++a) {
    const auto d = r.uint<std::uint32_t>();
    if (d == 0) throw FormatError(what + ": zero extent");
    shape.push_back(d);
  }
  Volume v;
  v.tensor = Tensor(shape, code == 0 ? DType::F32 : DType::F64);
  r.tensor_values(v.tensor);
  if (!r.at_end()) throw FormatError(what + ": trailing bytes");
  if (!in_unit_range(v.tensor)) throw FormatError(what + ": values outside [0,1]");
  v.source = path.filename().string();
  return v;
}

std::string volume_filename(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%05lld.idmv", static_cast<long long>(index));
  return buf;
}

std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw FormatError("not a directory: '" + dir.string() + "'");
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".idmv") out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace idm
