#include "ramp/run_config.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <concepts>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "ramp/binary_io.hpp"
#include "ramp/error.hpp"

namespace ramp {

namespace {

std::string text_of(int v) { return std::to_string(v); }
template <std::unsigned_integral T>
std::string text_of(T v) {
  return std::to_string(v);
}
std::string text_of(bool v) { return v ? "true" : "false"; }
std::string text_of(const std::string& v) { return v; }
std::string text_of(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string text_of(NeighborOrder v) { return v == NeighborOrder::as_stored ? "as_stored" : "seeded_shuffle"; }
std::string text_of(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
std::string text_of(const std::set<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  fail(ErrorKind::config, "'" + key + "': cannot read '" + value + "' as " + what);
}

template <class T>
T parse_number(const std::string& key, const std::string& value, const char* what) {
  T out{};
  const char* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) bad_value(key, value, what);
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(part);
  return out;
}

void read_into(const std::string& k, const std::string& v, int& out) { out = parse_number<int>(k, v, "an integer"); }
template <std::unsigned_integral T>
void read_into(const std::string& k, const std::string& v, T& out) {
  out = parse_number<T>(k, v, "a non-negative integer");
}
void read_into(const std::string& k, const std::string& v, double& out) { out = parse_number<double>(k, v, "a number"); }
void read_into(const std::string& k, const std::string& v, bool& out) {
  if (v == "true" || v == "1") out = true;
  else if (v == "false" || v == "0") out = false;
  else bad_value(k, v, "true/false");
}
void read_into(const std::string&, const std::string& v, std::string& out) { out = v; }
void read_into(const std::string& k, const std::string& v, NeighborOrder& out) {
  if (v == "as_stored") out = NeighborOrder::as_stored;
  else if (v == "seeded_shuffle") out = NeighborOrder::seeded_shuffle;
  else bad_value(k, v, "as_stored or seeded_shuffle");
}
void read_into(const std::string& k, const std::string& v, std::vector<std::uint64_t>& out) {
  out.clear();
  for (const auto& part : split_commas(v)) out.push_back(parse_number<std::uint64_t>(k, part, "a seed list"));
}
void read_into(const std::string&, const std::string& v, std::set<std::string>& out) {
  const auto parts = split_commas(v);
  out = std::set<std::string>(parts.begin(), parts.end());
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Ref>
Field make_field(std::string key, Ref ref) {
  return {key, [ref](const RunConfig& c) { return text_of(ref(c)); },
          [ref, key](RunConfig& c, const std::string& v) { read_into(key, v, ref(c)); }};
}

#define RAMP_FIELD(key, member) make_field(key, [](auto& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      RAMP_FIELD("decoder.n_layers", decoder.n_layers),
      RAMP_FIELD("decoder.n_heads", decoder.n_heads),
      RAMP_FIELD("decoder.d_model", decoder.d_model),
      RAMP_FIELD("decoder.d_ff", decoder.d_ff),
      RAMP_FIELD("decoder.vocab_size", decoder.vocab_size),
      RAMP_FIELD("decoder.max_positions", decoder.max_positions),
      RAMP_FIELD("ramp.rho", ramp.rho),
      RAMP_FIELD("ramp.mp_rounds", ramp.mp_rounds),
      RAMP_FIELD("ramp.compact", ramp.compact),
      RAMP_FIELD("ramp.neighbor_order", ramp.neighbor_order),
      RAMP_FIELD("ramp.order_seed", ramp.order_seed),
      RAMP_FIELD("corpus.n_nodes", corpus.n_nodes),
      RAMP_FIELD("corpus.n_classes", corpus.n_classes),
      RAMP_FIELD("corpus.homophily", corpus.homophily),
      RAMP_FIELD("corpus.self_signal", corpus.self_signal),
      RAMP_FIELD("corpus.text_min", corpus.text_min),
      RAMP_FIELD("corpus.text_max", corpus.text_max),
      RAMP_FIELD("corpus.degree", corpus.degree),
      RAMP_FIELD("pretrain.steps", pretrain.steps),
      RAMP_FIELD("pretrain.batch_nodes", pretrain.batch_nodes),
      RAMP_FIELD("pretrain.learning_rate", pretrain.learning_rate),
      RAMP_FIELD("pretrain.ego_max_size", pretrain.ego_max_size),
      RAMP_FIELD("pretrain.freeze", pretrain.freeze),
      RAMP_FIELD("finetune.max_epochs", finetune.max_epochs),
      RAMP_FIELD("finetune.batch_nodes", finetune.batch_nodes),
      RAMP_FIELD("finetune.learning_rate", finetune.learning_rate),
      RAMP_FIELD("finetune.early_stop_patience", finetune.early_stop_patience),
      RAMP_FIELD("finetune.ego_hops", finetune.ego_hops),
      RAMP_FIELD("finetune.ego_max_size", finetune.ego_max_size),
      RAMP_FIELD("finetune.shuffle_neighbors", finetune.shuffle_neighbors),
      RAMP_FIELD("finetune.round_supervision", finetune.round_supervision),
      RAMP_FIELD("finetune.freeze", finetune.freeze),
      RAMP_FIELD("adam.beta1", adam.beta1),
      RAMP_FIELD("adam.beta2", adam.beta2),
      RAMP_FIELD("adam.eps", adam.eps),
      RAMP_FIELD("adam.weight_decay", adam.weight_decay),
      RAMP_FIELD("adam.warmup_fraction", adam.warmup_fraction),
      RAMP_FIELD("adam.min_lr_fraction", adam.min_lr_fraction),
      RAMP_FIELD("adam.clip_norm", adam.clip_norm),
      RAMP_FIELD("eval.shuffle_seeds", eval.shuffle_seeds),
      RAMP_FIELD("eval.scale_samples", eval.scale_samples),
      RAMP_FIELD("eval.scale_reps", eval.scale_reps),
      RAMP_FIELD("seeds.corpus", seeds.corpus),
      RAMP_FIELD("seeds.init", seeds.init),
      RAMP_FIELD("seeds.pretrain", seeds.pretrain),
      RAMP_FIELD("seeds.finetune", seeds.finetune),
      RAMP_FIELD("seeds.eval", seeds.eval),
      RAMP_FIELD("paths.graph", paths.graph),
      RAMP_FIELD("paths.split", paths.split),
      RAMP_FIELD("paths.checkpoint", paths.checkpoint),
      RAMP_FIELD("paths.out", paths.out),
  };
  return all;
}

#undef RAMP_FIELD

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  fail(ErrorKind::config, "unknown config key '" + key + "'");
}

std::string quoted(const std::string& v) {
  const bool plain = !v.empty() && v.find_first_of(" \t,\"'#;[]=") == std::string::npos;
  if (plain) return v;
  if (v.find('"') != std::string::npos) fail(ErrorKind::config, "config values cannot contain '\"': " + v);
  return '"' + v + '"';
}

std::string dump(const RunConfig& cfg, bool with_paths) {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec == "paths" && !with_paths) continue;
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + quoted(f.get(cfg)) + "\n";
  }
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  // Sized so the acceptance suite fits a single desktop core.
  decoder.n_layers = 2;
  decoder.n_heads = 4;
  decoder.d_model = 64;
  decoder.d_ff = 256;
  decoder.max_positions = 4096;
  ramp.mp_rounds = 1;

  pretrain.stage = Stage::pretrain;
  pretrain.steps = 2000;
  pretrain.batch_nodes = 4;
  pretrain.learning_rate = 1e-3;
  pretrain.ego_max_size = 20;

  finetune.stage = Stage::finetune;
  finetune.max_epochs = 15;
  finetune.batch_nodes = 1;
  finetune.learning_rate = 3e-4;
  finetune.early_stop_patience = 6;
  finetune.shuffle_neighbors = true;
  finetune.round_supervision = true;
  finetune.ego_hops = 2;
  finetune.ego_max_size = 12;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::validate() const {
  decoder.validate();
  ramp.validate();
  corpus.validate();
  pretrain.validate();
  finetune.validate();
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    fail(ErrorKind::config, "adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) fail(ErrorKind::config, "adam.eps must be > 0");
  if (!(adam.weight_decay >= 0.0)) fail(ErrorKind::config, "adam.weight_decay must be >= 0");
  if (!(adam.warmup_fraction >= 0.0 && adam.warmup_fraction <= 1.0))
    fail(ErrorKind::config, "adam.warmup_fraction must lie in [0, 1]");
  if (!(adam.min_lr_fraction >= 0.0 && adam.min_lr_fraction <= 1.0))
    fail(ErrorKind::config, "adam.min_lr_fraction must lie in [0, 1]");
  if (eval.shuffle_seeds.empty()) fail(ErrorKind::config, "eval.shuffle_seeds must not be empty");
  if (eval.scale_samples < 1 || eval.scale_reps < 1)
    fail(ErrorKind::config, "eval.scale_samples and eval.scale_reps must be >= 1");
  if (paths.out.empty()) fail(ErrorKind::config, "paths.out must not be empty");
}

std::string RunConfig::to_ini() const { return dump(*this, true); }

std::string RunConfig::fingerprint() const { return fnv1a_hex(dump(*this, false)); }

void apply_ini(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigBase().from_config(in);
  } catch (const CLI::Error& e) {
    fail(ErrorKind::config, source + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    try {
      cfg.set(item.fullname(), value);
    } catch (const Error& e) {
      throw Error(ErrorKind::config, source + ": " + e.what());
    }
  }
}

void apply_ini_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_ini(cfg, ss.str(), path.string());
}

void put_ramp_config(std::map<std::string, std::string>& meta, const RampConfig& ramp) {
  meta["ramp.rho"] = text_of(ramp.rho);
  meta["ramp.mp_rounds"] = text_of(ramp.mp_rounds);
  meta["ramp.compact"] = text_of(ramp.compact);
  meta["ramp.neighbor_order"] = text_of(ramp.neighbor_order);
  meta["ramp.order_seed"] = text_of(ramp.order_seed);
}

RampConfig get_ramp_config(const std::map<std::string, std::string>& meta) {
  RunConfig tmp;
  for (const char* key : {"ramp.rho", "ramp.mp_rounds", "ramp.compact", "ramp.neighbor_order", "ramp.order_seed"}) {
    const auto it = meta.find(key);
    if (it == meta.end()) fail(ErrorKind::validation, std::string("checkpoint metadata lacks '") + key + "'");
    try {
      tmp.set(key, it->second);
    } catch (const Error& e) {
      throw Error(ErrorKind::validation, std::string("checkpoint metadata: ") + e.what());
    }
  }
  return tmp.ramp;
}

std::string fnv1a_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(io::fnv1a(bytes)));
  return buf;
}

}  // namespace ramp
