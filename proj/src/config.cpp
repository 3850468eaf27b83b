#include "nucleiforge/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nf {

std::vector<std::string> DataConfig::auxiliary_presets() const {
  std::vector<std::string> out;
  std::stringstream ss(auxiliary);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty() && item != "none") out.push_back(item);
  }
  return out;
}

void ExperimentConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (align.lambda < 0.0) fail("align.lambda must be >= 0");
  if (align.warmup_frac < 0.0 || align.warmup_frac > 1.0) fail("align.warmup_frac must lie in [0,1]");
  if (train.epochs < 1) fail("train.epochs must be >= 1");
  if (train.lr <= 0.0) fail("train.lr must be > 0");
  if (train.lr_images < 1) fail("train.lr_images must be >= 1");
  if (train.decay <= 0.0) fail("train.decay must be > 0");
  if (train.alpha < 0.0 || train.beta < 0.0) fail("train.alpha and train.beta must be >= 0");
  if (train.batch_size < 1) fail("train.batch_size must be >= 1");
  if (train.clip_norm < 0.0) fail("train.clip_norm must be >= 0");
  if (train.threshold < 0.0 || train.threshold > 1.0) fail("train.threshold must lie in [0,1]");
  if (data.manifest.empty() && data.primary_train == 0) fail("data.primary_train must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument(key + ": expected an integer, got '" + text + "'");
  return value;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw std::invalid_argument(key + ": expected a number, got '" + text + "'");
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw std::invalid_argument(key + ": expected true/false, got '" + text + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Field accessors return a mutable reference; getters only read through it.
ExperimentConfig& mut(const ExperimentConfig& c) { return const_cast<ExperimentConfig&>(c); }

template <typename Getter>
ConfigField size_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help, [member](const ExperimentConfig& c) { return std::to_string(member(mut(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_integer<std::size_t>(name, v); }};
}

template <typename Getter>
ConfigField u64_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help, [member](const ExperimentConfig& c) { return std::to_string(member(mut(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_integer<std::uint64_t>(name, v); }};
}

template <typename Getter>
ConfigField int_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help, [member](const ExperimentConfig& c) { return std::to_string(member(mut(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_integer<int>(name, v); }};
}

template <typename Getter>
ConfigField double_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help, [member](const ExperimentConfig& c) { return format_double(member(mut(c))); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_double(name, v); }};
}

template <typename Getter>
ConfigField bool_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help,
          [member](const ExperimentConfig& c) { return std::string(member(mut(c)) ? "true" : "false"); },
          [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(name, v); }};
}

template <typename Getter>
ConfigField string_field(const std::string& name, const std::string& help, Getter member) {
  return {name, help, [member](const ExperimentConfig& c) { return member(mut(c)); },
          [member](ExperimentConfig& c, const std::string& v) { member(c) = v; }};
}

#define NF_FIELD(kind, name, help, path) kind##_field(name, help, [](ExperimentConfig& c) -> auto& { return c.path; })

std::vector<ConfigField> build_fields() {
  std::vector<ConfigField> f = {
      NF_FIELD(size, "model.image_size", "input side in pixels", model.encoder.image_size),
      NF_FIELD(size, "model.patch_size", "encoder patch side", model.encoder.patch_size),
      NF_FIELD(size, "model.layers", "encoder blocks", model.encoder.layers),
      NF_FIELD(size, "model.embed_dim", "encoder width", model.encoder.embed_dim),
      NF_FIELD(size, "model.adapter_hidden", "adapter bottleneck width", model.encoder.adapter_hidden),
      NF_FIELD(size, "model.heads", "encoder attention heads", model.encoder.heads),
      NF_FIELD(bool, "model.freeze_base", "freeze pretrained encoder/decoder weights", model.freeze_base),
      NF_FIELD(size, "model.spgen_hidden", "SPGen conv width", model.spgen_hidden),
      NF_FIELD(size, "model.discriminator_hidden", "discriminator hidden width", model.discriminator_hidden),
      {"align.mode", "none | grl | cgrl", [](const ExperimentConfig& c) { return to_string(c.align.mode); },
       [](ExperimentConfig& c, const std::string& v) { c.align.mode = parse_align_mode(v); }},
      NF_FIELD(double, "align.lambda", "reversal strength", align.lambda),
      NF_FIELD(double, "align.warmup_frac", "fraction of steps for linear lambda warm-up", align.warmup_frac),
      {"decoder.mode", "base | hr", [](const ExperimentConfig& c) { return to_string(c.model.decoder.mode); },
       [](ExperimentConfig& c, const std::string& v) { c.model.decoder.mode = parse_decoder_mode(v); }},
      NF_FIELD(size, "decoder.layers", "two-way transformer layers", model.decoder.layers),
      NF_FIELD(size, "decoder.embed_dim", "decoder width", model.decoder.embed_dim),
      NF_FIELD(size, "decoder.heads", "decoder attention heads", model.decoder.heads),
      NF_FIELD(size, "decoder.prompt_tokens", "learned prompt tokens", model.decoder.prompt_tokens),
      NF_FIELD(bool, "decoder.hr_warm_start", "initialize the HR additions from the pretrained base decoder",
               model.decoder.hr_warm_start),
      NF_FIELD(string, "data.manifest", "dataset manifest; empty generates synthetic data", data.manifest),
      NF_FIELD(int, "data.primary_id", "primary domain id", data.primary_id),
      NF_FIELD(string, "data.primary", "synthetic primary preset", data.primary),
      NF_FIELD(string, "data.auxiliary", "comma-separated synthetic auxiliary presets (none for primary only)", data.auxiliary),
      NF_FIELD(size, "data.primary_train", "synthetic primary training images", data.primary_train),
      NF_FIELD(size, "data.aux_train", "synthetic training images per auxiliary domain", data.aux_train),
      NF_FIELD(size, "data.val", "synthetic primary validation images", data.val),
      NF_FIELD(size, "data.test", "synthetic primary test images", data.test),
      NF_FIELD(u64, "data.seed", "synthetic data seed", data.seed),
      NF_FIELD(size, "train.epochs", "training epochs", train.epochs),
      NF_FIELD(double, "train.lr", "learning rate at train.lr_images primary images", train.lr),
      NF_FIELD(size, "train.lr_images", "reference primary image count for train.lr", train.lr_images),
      NF_FIELD(double, "train.decay", "per-epoch learning-rate multiplier", train.decay),
      NF_FIELD(size, "train.batch_size", "samples per batch", train.batch_size),
      NF_FIELD(double, "train.primary_fraction", "share of primary samples in mixed batches", train.primary_fraction),
      NF_FIELD(double, "train.alpha", "adversarial loss weight", train.alpha),
      NF_FIELD(double, "train.beta", "coarse loss weight", train.beta),
      NF_FIELD(u64, "train.seed", "initialization and sampling seed", train.seed),
      NF_FIELD(double, "train.clip_norm", "global gradient-norm clip, 0 disables", train.clip_norm),
      NF_FIELD(bool, "train.fine_on_primary_only", "fine loss on primary samples only", train.fine_on_primary_only),
      NF_FIELD(double, "train.threshold", "probability threshold for metrics", train.threshold),
      NF_FIELD(size, "train.pretrain_images", "images used to fit the frozen base", train.pretrain_images),
      NF_FIELD(size, "train.pretrain_epochs", "epochs used to fit the frozen base", train.pretrain_epochs),
      NF_FIELD(double, "train.pretrain_lr", "learning rate for fitting the frozen base", train.pretrain_lr),
      NF_FIELD(u64, "train.pretrain_seed", "seed for fitting the frozen base", train.pretrain_seed),
  };
  return f;
}

#undef NF_FIELD

const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.name == key) return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, trim(value));
}

std::string get_config_value(const ExperimentConfig& config, const std::string& key) {
  return find_field(key).get(config);
}

ExperimentConfig parse_config(std::istream& in, const std::string& source) {
  ExperimentConfig config;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = source + ":" + std::to_string(lineno) + ": ";
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.resize(comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
    if (section.empty()) throw std::invalid_argument(where + "key outside of a section");
    try {
      set_config_value(config, section + "." + trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  return parse_config(in, path.string());
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
  std::string section;
  for (const auto& f : config_fields()) {
    const auto dot = f.name.find('.');
    const auto s = f.name.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out << '\n';
      out << '[' << s << "]\n";
      section = s;
    }
    out << f.name.substr(dot + 1) << " = " << f.get(config) << '\n';
  }
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  write_config(out, config);
}

std::vector<std::string> config_warnings(const ExperimentConfig& config,
                                         const std::map<std::string, std::string>& overrides) {
  std::vector<std::string> out;
  if (config.align.mode == AlignMode::None) {
    for (const char* key : {"align.lambda", "align.warmup_frac"})
      if (overrides.count(key)) out.push_back(std::string(key) + " has no effect with align.mode=none");
  }
  if (config.data.auxiliary_presets().empty() && config.data.manifest.empty() && config.align.mode != AlignMode::None) {
    out.push_back("align.mode=" + to_string(config.align.mode) + " without auxiliary data only sees primary samples");
  }
  return out;
}

}  // namespace nf
