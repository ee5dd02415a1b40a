#include "eres/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace eres {

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

SyntheticKind DataConfig::synthetic_kind() const {
  if (!synthetic()) throw ConfigError("data source '" + source + "' is not synthetic");
  return parse_synthetic_kind(source.substr(std::string("synthetic:").size()));
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_real(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "+inf") return INFINITY;
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_count(const std::string& key, const std::string& v) {
  const long long n = to_int(key, v);
  if (n < 0) throw ConfigError(key + ": must be non-negative, got " + v);
  return static_cast<std::size_t>(n);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& s : split(v, ',')) out.push_back(static_cast<int>(to_int(key, s)));
  return out;
}

std::array<std::size_t, 3> to_triple(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  std::array<std::size_t, 3> out{};
  if (parts.size() == 1) {
    out.fill(to_count(key, parts[0]));
  } else if (parts.size() == 3) {
    for (std::size_t i = 0; i < 3; ++i) out[i] = to_count(key, parts[i]);
  } else {
    throw ConfigError(key + ": expected one or three comma-separated counts, got '" + v + "'");
  }
  return out;
}

template <typename C>
std::string join(const C& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ',';
    out += std::to_string(v);
  }
  return out;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"blocks_per_group", [](const RunConfig& c) { return join(c.net.blocks_per_group); },
                 [](RunConfig& c, const std::string& v) { c.net.blocks_per_group = to_triple("blocks_per_group", v); }});
    f.push_back({"widths", [](const RunConfig& c) { return join(c.net.widths); },
                 [](RunConfig& c, const std::string& v) { c.net.widths = to_triple("widths", v); }});
    f.push_back({"in_channels", [](const RunConfig& c) { return std::to_string(c.net.in_channels); },
                 [](RunConfig& c, const std::string& v) { c.net.in_channels = to_count("in_channels", v); }});
    f.push_back({"image_size", [](const RunConfig& c) { return std::to_string(c.net.image_size); },
                 [](RunConfig& c, const std::string& v) { c.net.image_size = to_count("image_size", v); }});
    f.push_back({"classes", [](const RunConfig& c) { return std::to_string(c.net.classes); },
                 [](RunConfig& c, const std::string& v) { c.net.classes = to_count("classes", v); }});
    f.push_back({"epsilon", [](const RunConfig& c) { return format_real(c.net.gate.epsilon); },
                 [](RunConfig& c, const std::string& v) { c.net.gate.epsilon = to_real("epsilon", v); }});
    f.push_back({"gate_realization", [](const RunConfig& c) { return to_string(c.net.gate.realization); },
                 [](RunConfig& c, const std::string& v) { c.net.gate.realization = parse_gate_realization(v); }});
    f.push_back({"big_L", [](const RunConfig& c) { return format_real(c.net.gate.big_L); },
                 [](RunConfig& c, const std::string& v) { c.net.gate.big_L = to_real("big_L", v); }});
    f.push_back({"side_supervision", [](const RunConfig& c) { return bool_str(c.net.side_supervision); },
                 [](RunConfig& c, const std::string& v) { c.net.side_supervision = to_bool("side_supervision", v); }});
    f.push_back({"side_coefficient", [](const RunConfig& c) { return format_real(c.net.side_coefficient); },
                 [](RunConfig& c, const std::string& v) { c.net.side_coefficient = to_real("side_coefficient", v); }});
    f.push_back({"init_std", [](const RunConfig& c) { return format_real(c.net.init_std); },
                 [](RunConfig& c, const std::string& v) { c.net.init_std = to_real("init_std", v); }});
    f.push_back({"bn_momentum", [](const RunConfig& c) { return format_real(c.net.bn_momentum); },
                 [](RunConfig& c, const std::string& v) { c.net.bn_momentum = to_real("bn_momentum", v); }});
    f.push_back({"bn_eps", [](const RunConfig& c) { return format_real(c.net.bn_eps); },
                 [](RunConfig& c, const std::string& v) { c.net.bn_eps = to_real("bn_eps", v); }});

    f.push_back({"epochs", [](const RunConfig& c) { return std::to_string(c.train.epochs); },
                 [](RunConfig& c, const std::string& v) { c.train.epochs = static_cast<int>(to_count("epochs", v)); }});
    f.push_back({"batch_size", [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
                 [](RunConfig& c, const std::string& v) { c.train.batch_size = to_count("batch_size", v); }});
    f.push_back({"eval_batch", [](const RunConfig& c) { return std::to_string(c.train.eval_batch); },
                 [](RunConfig& c, const std::string& v) { c.train.eval_batch = to_count("eval_batch", v); }});
    f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                 [](RunConfig& c, const std::string& v) { c.train.seed = to_count("seed", v); }});
    f.push_back({"base_lr", [](const RunConfig& c) { return format_real(c.train.lr.base_lr); },
                 [](RunConfig& c, const std::string& v) { c.train.lr.base_lr = to_real("base_lr", v); }});
    f.push_back({"lr_milestones", [](const RunConfig& c) { return join(c.train.lr.standard_milestones); },
                 [](RunConfig& c, const std::string& v) { c.train.lr.standard_milestones = to_int_list("lr_milestones", v); }});
    f.push_back({"adaptive_milestones", [](const RunConfig& c) { return join(c.train.lr.adaptive_milestones); },
                 [](RunConfig& c, const std::string& v) { c.train.lr.adaptive_milestones = to_int_list("adaptive_milestones", v); }});
    f.push_back({"momentum", [](const RunConfig& c) { return format_real(c.train.momentum); },
                 [](RunConfig& c, const std::string& v) { c.train.momentum = to_real("momentum", v); }});
    f.push_back({"weight_decay", [](const RunConfig& c) { return format_real(c.train.weight_decay); },
                 [](RunConfig& c, const std::string& v) { c.train.weight_decay = to_real("weight_decay", v); }});
    f.push_back({"decay_bn", [](const RunConfig& c) { return bool_str(c.train.decay_bn); },
                 [](RunConfig& c, const std::string& v) { c.train.decay_bn = to_bool("decay_bn", v); }});
    f.push_back({"augment", [](const RunConfig& c) { return bool_str(c.train.augment.enabled); },
                 [](RunConfig& c, const std::string& v) { c.train.augment.enabled = to_bool("augment", v); }});
    f.push_back({"pad", [](const RunConfig& c) { return std::to_string(c.train.augment.pad); },
                 [](RunConfig& c, const std::string& v) { c.train.augment.pad = to_count("pad", v); }});
    f.push_back({"hflip_prob", [](const RunConfig& c) { return format_real(c.train.augment.hflip_prob); },
                 [](RunConfig& c, const std::string& v) { c.train.augment.hflip_prob = to_real("hflip_prob", v); }});
    f.push_back({"collapse_threshold", [](const RunConfig& c) { return format_real(c.train.collapse.threshold); },
                 [](RunConfig& c, const std::string& v) { c.train.collapse.threshold = to_real("collapse_threshold", v); }});
    f.push_back({"confirm_epochs", [](const RunConfig& c) { return std::to_string(c.train.collapse.confirm_epochs); },
                 [](RunConfig& c, const std::string& v) { c.train.collapse.confirm_epochs = static_cast<int>(to_int("confirm_epochs", v)); }});
    f.push_back({"zero_tolerance", [](const RunConfig& c) { return format_real(c.train.collapse.zero_tolerance); },
                 [](RunConfig& c, const std::string& v) { c.train.collapse.zero_tolerance = to_real("zero_tolerance", v); }});

    f.push_back({"data", [](const RunConfig& c) { return c.data.source; },
                 [](RunConfig& c, const std::string& v) { c.data.source = v; }});
    f.push_back({"train_subset", [](const RunConfig& c) { return std::to_string(c.data.train_subset); },
                 [](RunConfig& c, const std::string& v) { c.data.train_subset = to_count("train_subset", v); }});
    f.push_back({"val_subset", [](const RunConfig& c) { return std::to_string(c.data.val_subset); },
                 [](RunConfig& c, const std::string& v) { c.data.val_subset = to_count("val_subset", v); }});
    f.push_back({"synthetic_train", [](const RunConfig& c) { return std::to_string(c.data.synthetic_train); },
                 [](RunConfig& c, const std::string& v) { c.data.synthetic_train = to_count("synthetic_train", v); }});
    f.push_back({"synthetic_val", [](const RunConfig& c) { return std::to_string(c.data.synthetic_val); },
                 [](RunConfig& c, const std::string& v) { c.data.synthetic_val = to_count("synthetic_val", v); }});

    f.push_back({"out", [](const RunConfig& c) { return c.out; },
                 [](RunConfig& c, const std::string& v) { c.out = v; }});
    f.push_back({"dtype", [](const RunConfig& c) { return c.dtype; },
                 [](RunConfig& c, const std::string& v) {
                   if (v != "f32" && v != "f64") throw ConfigError("dtype must be f32 or f64, got '" + v + "'");
                   c.dtype = v;
                 }});
    f.push_back({"equivalence_tolerance", [](const RunConfig& c) { return format_real(c.equivalence_tolerance); },
                 [](RunConfig& c, const std::string& v) { c.equivalence_tolerance = to_real("equivalence_tolerance", v); }});
    return f;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

KeyValues RunConfig::to_kv() const {
  KeyValues out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_kv()) out += k + " = " + v + "\n";
  return out;
}

RunConfig RunConfig::from_kv(const KeyValues& kv, RunConfig base,
                             const std::vector<std::string>& ignored_prefixes) {
  for (const auto& [k, v] : kv) {
    bool skip = false;
    for (const auto& p : ignored_prefixes) skip = skip || k.rfind(p, 0) == 0;
    if (!skip) base.set(k, v);
  }
  return base;
}

KeyValues RunConfig::parse_text(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig RunConfig::load(const std::filesystem::path& file, RunConfig base) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_kv(parse_text(ss.str()), std::move(base));
}

void RunConfig::resolve() {
  train.augment.crop = net.image_size;
  net.validate();
  train.validate();
  train.augment.validate(net.image_size);
  if (data.synthetic()) {
    (void)data.synthetic_kind();
    if (data.synthetic_train < 2) throw ConfigError("synthetic_train must be at least 2");
  }
  if (!(equivalence_tolerance >= 0.0)) throw ConfigError("equivalence_tolerance must be non-negative");
  if (out.empty()) throw ConfigError("out directory must not be empty");
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"cifar10-eps110", "cifar10-eps20"};
  return names;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.net.gate.epsilon = 2.5;
  c.train.lr.standard_milestones = {82, 123};
  c.train.lr.adaptive_milestones = {41, 61};
  c.train.batch_size = 128;
  c.train.weight_decay = 0.0002;
  c.train.momentum = 0.9;
  if (name == "cifar10-eps110") {
    c.net.blocks_per_group = {18, 18, 18};
    c.train.epochs = 1000;
  } else if (name == "cifar10-eps20") {
    c.net.blocks_per_group = {3, 3, 3};
    c.train.epochs = 40;
    c.data.train_subset = 5000;
    c.data.val_subset = 1000;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  c.out = "runs/" + name;
  return c;
}

}  // namespace eres
