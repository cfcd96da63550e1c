#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylemorph {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// recon_mode "none" drops both reconstruction targets; it exists for the
// early ablation rungs that predate the style encoder.
struct AblationConfig {
  std::string discriminator_head = "multitask";  // multitask | acgan
  std::string conditioning = "adain";            // adain | concat
  std::string recon_mode = "style";              // style | latent | none
  bool use_ds = true;
};

struct ExperimentConfig {
  int image_size = 256;
  int num_domains = 2;
  int latent_dim = 16;
  int style_dim = 64;
  int hidden_dim = 512;
  int base_channels = 64;
  int max_channels = 512;
  double lambda_sty = 1.0;
  double lambda_ds = 1.0;
  double lambda_cyc = 1.0;
  double r1_gamma = 1.0;
  int batch_size = 8;
  int total_iters = 100000;
  int ds_decay_iters = 100000;
  double lr_gde = 1e-4;
  double lr_f = 1e-6;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double ema_decay = 0.999;
  uint64_t seed = 0;
  AblationConfig ablation;

  // The generator always uses 4 resampling stages; encoder/discriminator
  // trunks are 6 blocks deep and stop downsampling at 4x4.
  static constexpr int kGeneratorUpdownBlocks = 4;
  static constexpr int kGeneratorIntermediateBlocks = 4;
  static constexpr int kTrunkBlocks = 6;

  bool operator==(const ExperimentConfig&) const = default;
};

inline bool operator==(const AblationConfig& a, const AblationConfig& b) {
  return a.discriminator_head == b.discriminator_head && a.conditioning == b.conditioning &&
         a.recon_mode == b.recon_mode && a.use_ds == b.use_ds;
}

inline ExperimentConfig default_config(const std::string& preset) {
  ExperimentConfig cfg;
  if (preset == "face") {
    cfg.num_domains = 2;
  } else if (preset == "animal") {
    cfg.num_domains = 3;
    cfg.lambda_ds = 2.0;
  } else if (preset == "toy") {
    cfg.num_domains = 3;
    cfg.image_size = 32;
    cfg.base_channels = 16;
    cfg.max_channels = 64;
    cfg.batch_size = 4;
    cfg.total_iters = 500;
    cfg.ds_decay_iters = 500;
  } else {
    throw ConfigError("unknown preset '" + preset + "' (expected face, animal, or toy)");
  }
  return cfg;
}

// Every violated invariant, keyed by field name. Empty result means valid.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> v;
  auto bad = [&v](const std::string& key, const std::string& why) {
    v.push_back(key + ": " + why);
  };
  const int stride = 1 << ExperimentConfig::kGeneratorUpdownBlocks;
  if (cfg.image_size <= 0 || cfg.image_size % stride != 0)
    bad("image_size", "must be a positive multiple of " + std::to_string(stride));
  else if (cfg.image_size / stride < 2)
    bad("image_size", "bottleneck keeps >= 2 spatial positions; need at least " +
                          std::to_string(2 * stride));
  if (cfg.num_domains < 2) bad("num_domains", "must be >= 2");
  if (cfg.latent_dim < 1) bad("latent_dim", "must be >= 1");
  if (cfg.style_dim < 1) bad("style_dim", "must be >= 1");
  if (cfg.hidden_dim < 1) bad("hidden_dim", "must be >= 1");
  if (cfg.base_channels < 1) bad("base_channels", "must be >= 1");
  if (cfg.max_channels < cfg.base_channels) bad("max_channels", "must be >= base_channels");
  if (cfg.lambda_sty < 0) bad("lambda_sty", "must be >= 0");
  if (cfg.lambda_ds < 0) bad("lambda_ds", "must be >= 0");
  if (cfg.lambda_cyc < 0) bad("lambda_cyc", "must be >= 0");
  if (cfg.r1_gamma < 0) bad("r1_gamma", "must be >= 0");
  if (cfg.batch_size < 1) bad("batch_size", "must be >= 1");
  if (cfg.total_iters < 1) bad("total_iters", "must be >= 1");
  if (cfg.ds_decay_iters < 1) bad("ds_decay_iters", "must be >= 1");
  else if (cfg.ds_decay_iters > cfg.total_iters)
    bad("ds_decay_iters", "must be <= total_iters");
  if (cfg.lr_gde < 0) bad("lr_gde", "must be >= 0");
  if (cfg.lr_f < 0) bad("lr_f", "must be >= 0");
  if (cfg.adam_beta1 < 0 || cfg.adam_beta1 >= 1) bad("adam_beta1", "must be in [0, 1)");
  if (cfg.adam_beta2 < 0 || cfg.adam_beta2 >= 1) bad("adam_beta2", "must be in [0, 1)");
  if (!(cfg.ema_decay > 0.0 && cfg.ema_decay < 1.0)) bad("ema_decay", "must be in (0, 1)");
  if (cfg.ablation.discriminator_head != "multitask" && cfg.ablation.discriminator_head != "acgan")
    bad("ablation.discriminator_head", "must be multitask or acgan");
  if (cfg.ablation.conditioning != "adain" && cfg.ablation.conditioning != "concat")
    bad("ablation.conditioning", "must be adain or concat");
  if (cfg.ablation.recon_mode != "style" && cfg.ablation.recon_mode != "latent" &&
      cfg.ablation.recon_mode != "none")
    bad("ablation.recon_mode", "must be style, latent, or none");
  return v;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
}

inline uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "image_size") cfg.image_size = parse_int(key, value);
  else if (key == "num_domains") cfg.num_domains = parse_int(key, value);
  else if (key == "latent_dim") cfg.latent_dim = parse_int(key, value);
  else if (key == "style_dim") cfg.style_dim = parse_int(key, value);
  else if (key == "hidden_dim") cfg.hidden_dim = parse_int(key, value);
  else if (key == "base_channels") cfg.base_channels = parse_int(key, value);
  else if (key == "max_channels") cfg.max_channels = parse_int(key, value);
  else if (key == "lambda_sty") cfg.lambda_sty = parse_double(key, value);
  else if (key == "lambda_ds") cfg.lambda_ds = parse_double(key, value);
  else if (key == "lambda_cyc") cfg.lambda_cyc = parse_double(key, value);
  else if (key == "r1_gamma") cfg.r1_gamma = parse_double(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "total_iters") cfg.total_iters = parse_int(key, value);
  else if (key == "ds_decay_iters") cfg.ds_decay_iters = parse_int(key, value);
  else if (key == "lr_gde") cfg.lr_gde = parse_double(key, value);
  else if (key == "lr_f") cfg.lr_f = parse_double(key, value);
  else if (key == "adam_beta1") cfg.adam_beta1 = parse_double(key, value);
  else if (key == "adam_beta2") cfg.adam_beta2 = parse_double(key, value);
  else if (key == "ema_decay") cfg.ema_decay = parse_double(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "ablation.discriminator_head") cfg.ablation.discriminator_head = value;
  else if (key == "ablation.conditioning") cfg.ablation.conditioning = value;
  else if (key == "ablation.recon_mode") cfg.ablation.recon_mode = value;
  else if (key == "ablation.use_ds") cfg.ablation.use_ds = parse_bool(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace detail

// One `key = value` pair per line; `#` starts a comment. Key list matches
// the ExperimentConfig fields, with ablation switches as dotted names.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  using detail::format_double;
  std::ostringstream os;
  os << "image_size = " << cfg.image_size << '\n'
     << "num_domains = " << cfg.num_domains << '\n'
     << "latent_dim = " << cfg.latent_dim << '\n'
     << "style_dim = " << cfg.style_dim << '\n'
     << "hidden_dim = " << cfg.hidden_dim << '\n'
     << "base_channels = " << cfg.base_channels << '\n'
     << "max_channels = " << cfg.max_channels << '\n'
     << "lambda_sty = " << format_double(cfg.lambda_sty) << '\n'
     << "lambda_ds = " << format_double(cfg.lambda_ds) << '\n'
     << "lambda_cyc = " << format_double(cfg.lambda_cyc) << '\n'
     << "r1_gamma = " << format_double(cfg.r1_gamma) << '\n'
     << "batch_size = " << cfg.batch_size << '\n'
     << "total_iters = " << cfg.total_iters << '\n'
     << "ds_decay_iters = " << cfg.ds_decay_iters << '\n'
     << "lr_gde = " << format_double(cfg.lr_gde) << '\n'
     << "lr_f = " << format_double(cfg.lr_f) << '\n'
     << "adam_beta1 = " << format_double(cfg.adam_beta1) << '\n'
     << "adam_beta2 = " << format_double(cfg.adam_beta2) << '\n'
     << "ema_decay = " << format_double(cfg.ema_decay) << '\n'
     << "seed = " << cfg.seed << '\n'
     << "ablation.discriminator_head = " << cfg.ablation.discriminator_head << '\n'
     << "ablation.conditioning = " << cfg.ablation.conditioning << '\n'
     << "ablation.recon_mode = " << cfg.ablation.recon_mode << '\n'
     << "ablation.use_ds = " << (cfg.ablation.use_ds ? "true" : "false") << '\n';
  return os.str();
}

// Parses the documented config text into key/value pairs, preserving order.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    pairs.emplace_back(key, value);
  }
  return pairs;
}

// Inverse of serialize_config: every key applied on top of field defaults.
// serialize_config writes all fields at full precision, so the round trip is
// exact.
inline ExperimentConfig deserialize_config(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : parse_config_text(text))
    if (k != "preset") detail::apply_key(cfg, k, v);
  return cfg;
}

// Layering: preset defaults, then file values, then overrides. A `preset`
// key may appear in the file or overrides; overrides win, matching the
// flags > file > preset precedence used by the command line.
inline ExperimentConfig load_config(const std::string& path,
                                    const std::map<std::string, std::string>& overrides,
                                    const std::string& default_preset = "face") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  auto pairs = parse_config_text(ss.str());

  std::string preset = default_preset;
  for (const auto& [k, v] : pairs)
    if (k == "preset") preset = v;
  if (auto it = overrides.find("preset"); it != overrides.end()) preset = it->second;

  ExperimentConfig cfg = default_config(preset);
  for (const auto& [k, v] : pairs)
    if (k != "preset") detail::apply_key(cfg, k, v);
  for (const auto& [k, v] : overrides)
    if (k != "preset") detail::apply_key(cfg, k, v);

  auto violations = validate_config(cfg);
  if (!violations.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& s : violations) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  return cfg;
}

}  // namespace stylemorph
