#include <fstream>
#include <set>
#include <sstream>

#include "idm/cli.hpp"
#include "idm/keyvalue.hpp"

namespace idm::cli {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "volume_edge", "levels", "base_channels", "blocks_per_level", "channel_schedule", "attn_levels",
      "time_embed_dim", "dtype", "init_seed", "timesteps", "lr", "lambda_r", "lambda_l2", "batch", "steps",
      "adam_beta1", "adam_beta2", "adam_eps", "seed", "mode", "data_dir"};
  return keys;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::map<std::string, std::string>& overrides) {
  auto kv = parse_key_values(text);
  for (const auto& [k, v] : overrides) kv[k] = v;
  for (const auto& [k, v] : kv)
    if (!known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");

  auto has = [&](const char* k) { return kv.count(k) > 0; };
  auto get_int = [&](const char* k, long fallback) { return has(k) ? parse_int(k, kv.at(k)) : fallback; };
  auto get_double = [&](const char* k, double fallback) { return has(k) ? parse_double(k, kv.at(k)) : fallback; };

  const IUNetConfig defaults;
  RunConfig rc;
  rc.model = IUNetConfig::with_defaults(get_int("volume_edge", defaults.volume_edge),
                                        static_cast<int>(get_int("levels", defaults.levels)),
                                        get_int("base_channels", defaults.base_channels),
                                        static_cast<int>(get_int("blocks_per_level", defaults.blocks_per_level)));
  if (has("channel_schedule")) rc.model.channel_schedule = parse_int_list("channel_schedule", kv.at("channel_schedule"));
  if (has("attn_levels")) rc.model.attn_levels = parse_int_list("attn_levels", kv.at("attn_levels"));
  rc.model.time_embed_dim = get_int("time_embed_dim", defaults.time_embed_dim);
  rc.model.timesteps = static_cast<int>(get_int("timesteps", defaults.timesteps));
  rc.model.init_seed = static_cast<std::uint64_t>(get_int("init_seed", 0));
  if (has("dtype")) {
    try {
      rc.model.dtype = parse_dtype(kv.at("dtype"));
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("key 'dtype': ") + e.what());
    }
  }

  TrainConfig& t = rc.train;
  t.lr = get_double("lr", t.lr);
  t.lambda_r = get_double("lambda_r", t.lambda_r);
  t.lambda_l2 = get_double("lambda_l2", t.lambda_l2);
  t.batch = static_cast<int>(get_int("batch", t.batch));
  t.steps = static_cast<int>(get_int("steps", t.steps));
  t.adam_beta1 = get_double("adam_beta1", t.adam_beta1);
  t.adam_beta2 = get_double("adam_beta2", t.adam_beta2);
  t.adam_eps = get_double("adam_eps", t.adam_eps);
  t.seed = static_cast<std::uint64_t>(get_int("seed", 0));
  if (has("mode")) t.mode = parse_mode(kv.at("mode"));
  if (has("data_dir")) rc.data_dir = kv.at("data_dir");

  rc.model.validate();
  t.validate();
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::map<std::string, std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  return parse(text.str(), overrides);
}

std::string RunConfig::to_text() const {
  std::map<std::string, std::string> kv;
  kv["volume_edge"] = std::to_string(model.volume_edge);
  kv["levels"] = std::to_string(model.levels);
  kv["base_channels"] = std::to_string(model.base_channels);
  kv["blocks_per_level"] = std::to_string(model.blocks_per_level);
  kv["channel_schedule"] = format_int_list(model.channel_schedule);
  kv["attn_levels"] = format_int_list(model.attn_levels);
  kv["time_embed_dim"] = std::to_string(model.time_embed_dim);
  kv["dtype"] = dtype_name(model.dtype);
  kv["init_seed"] = std::to_string(model.init_seed);
  kv["timesteps"] = std::to_string(model.timesteps);
  kv["lr"] = format_double(train.lr);
  kv["lambda_r"] = format_double(train.lambda_r);
  kv["lambda_l2"] = format_double(train.lambda_l2);
  kv["batch"] = std::to_string(train.batch);
  kv["steps"] = std::to_string(train.steps);
  kv["adam_beta1"] = format_double(train.adam_beta1);
  kv["adam_beta2"] = format_double(train.adam_beta2);
  kv["adam_eps"] = format_double(train.adam_eps);
  kv["seed"] = std::to_string(train.seed);
  kv["mode"] = mode_name(train.mode);
  if (!data_dir.empty()) kv["data_dir"] = data_dir;
  return format_key_values(kv);
}

std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& items) {
  std::map<std::string, std::string> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + item + "' is not key=value");
    const std::string key = trim(item.substr(0, eq));
    if (key.empty()) throw ConfigError("override '" + item + "' is not key=value");
    out[key] = trim(item.substr(eq + 1));
  }
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace idm::cli
