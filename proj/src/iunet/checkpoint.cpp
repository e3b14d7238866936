#include <string>

#include "../common/binary_io.hpp"
#include "idm/iunet.hpp"

namespace idm {

namespace {
constexpr char kMagic[] = "IDMCKPT1";
constexpr std::size_t kMagicLen = 8;
}  // namespace

void checkpoint_save(const IUNet& model, const std::filesystem::path& path) {
  binary::Writer w;
  w.bytes(kMagic, kMagicLen);
  const std::string text = model.config().to_text();
  w.uint<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
  for (const Param* p : model.params()) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(p->id));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(p->value.rank()));
    for (auto d : p->value.shape()) w.uint<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.tensor_values(p->value);
  }
  binary::write_file(path.string(), w.buffer());
}

IUNet checkpoint_load(const std::filesystem::path& path) {
  const auto buf = binary::read_file(path.string());
  const std::string what = "checkpoint " + path.string();
  binary::Reader r(buf, what);
  if (r.bytes(kMagicLen) != std::string(kMagic, kMagicLen)) throw FormatError(what + ": bad magic");
  const auto text_len = r.uint<std::uint64_t>();
  r.need(text_len);
  IUNetConfig cfg;
  try {
    cfg = IUNetConfig::from_text(r.bytes(text_len));
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid embedded config: " + e.what());
  }
  IUNet model(cfg);
  const auto count = r.uint<std::uint32_t>();
  if (count != model.params().size())
    throw FormatError(what + ": parameter count " + std::to_string(count) + " does not match architecture (" +
                      std::to_string(model.params().size()) + ")");
  for (Param* p : model.params()) {
    const auto id = r.uint<std::uint32_t>();
    if (static_cast<int>(id) != p->id) throw FormatError(what + ": unexpected parameter id " + std::to_string(id));
    const auto rank = r.uint<std::uint8_t>();
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(r.uint<std::uint32_t>());
    if (shape != p->value.shape())
      throw FormatError(what + ": parameter '" + p->name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(p->value.shape()));
    r.tensor_values(p->value);
  }
  if (!r.at_end()) throw FormatError(what + ": trailing bytes");
  return model;
}

}  // namespace idm
