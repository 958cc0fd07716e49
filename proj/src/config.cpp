#include "fedbs/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>
#include <string_view>

namespace fedbs {

namespace {

[[noreturn]] void fail(int line_no, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line_no) + ": " + msg);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_f64(std::string_view v, int line_no, std::string_view key) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    fail(line_no, "key \"" + std::string(key) + "\" expects a number, got \"" + std::string(v) + "\"");
  return out;
}

std::int64_t parse_i64(std::string_view v, int line_no, std::string_view key) {
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    fail(line_no, "key \"" + std::string(key) + "\" expects an integer, got \"" + std::string(v) + "\"");
  return out;
}

std::uint64_t parse_u64(std::string_view v, int line_no, std::string_view key) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    fail(line_no, "key \"" + std::string(key) + "\" expects a non-negative integer, got \"" + std::string(v) + "\"");
  return out;
}

bool parse_bool(std::string_view v, int line_no, std::string_view key) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(line_no, "key \"" + std::string(key) + "\" expects true or false, got \"" + std::string(v) + "\"");
}

std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> parts;
  while (true) {
    const auto comma = v.find(',');
    parts.push_back(trim(v.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return parts;
}

std::string fmt_f64(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string_view arch_name(Architecture a) {
  return a == Architecture::EEGNetLite ? "eegnet" : "mlp";
}

Architecture parse_arch(std::string_view v, int line_no) {
  if (v == "eegnet") return Architecture::EEGNetLite;
  if (v == "mlp") return Architecture::TestMLP;
  fail(line_no, "unknown architecture \"" + std::string(v) + "\" (expected eegnet or mlp)");
}

void require(bool ok, int line_no, const std::string& msg) {
  if (!ok) fail(line_no, msg);
}

void apply_data_key(ExperimentConfig& c, std::string_view key, std::string_view v, int ln) {
  if (key == "source") {
    if (v == "synthetic") {
      c.use_synthetic = true;
    } else if (v == "path") {
      c.use_synthetic = false;
    } else {
      fail(ln, "key \"source\" expects synthetic or path, got \"" + std::string(v) + "\"");
    }
  } else if (key == "path") {
    c.data_path = std::string(v);
  } else if (key == "subjects") {
    c.synthetic.subjects = parse_i64(v, ln, key);
    require(c.synthetic.subjects >= 1, ln, "subjects must be at least 1");
  } else if (key == "trials_per_subject") {
    c.synthetic.trials_per_subject = parse_i64(v, ln, key);
    require(c.synthetic.trials_per_subject >= 1, ln, "trials_per_subject must be at least 1");
  } else if (key == "channels") {
    c.synthetic.channels = parse_i64(v, ln, key);
    require(c.synthetic.channels >= 1, ln, "channels must be at least 1");
  } else if (key == "samples") {
    c.synthetic.samples = parse_i64(v, ln, key);
    require(c.synthetic.samples >= 2, ln, "samples must be at least 2");
  } else if (key == "classes") {
    c.synthetic.n_classes = parse_i64(v, ln, key);
    require(c.synthetic.n_classes >= 2, ln, "classes must be at least 2");
  } else if (key == "snr") {
    c.synthetic.snr = parse_f64(v, ln, key);
    require(c.synthetic.snr > 0.0, ln, "snr must be positive");
  } else if (key == "shift") {
    c.synthetic.shift_strength = parse_f64(v, ln, key);
    require(c.synthetic.shift_strength >= 0.0, ln, "shift must be non-negative");
  } else if (key == "sample_rate") {
    c.synthetic.sample_rate = parse_f64(v, ln, key);
    require(c.synthetic.sample_rate > 0.0, ln, "sample_rate must be positive");
  } else if (key == "data_seed") {
    c.synthetic.seed = parse_u64(v, ln, key);
  } else if (key == "apply_ea") {
    c.apply_ea = parse_bool(v, ln, key);
  } else {
    fail(ln, "unknown key \"" + std::string(key) + "\" in section [data]");
  }
}

void apply_backbone_key(ExperimentConfig& c, std::string_view key, std::string_view v, int ln) {
  if (key == "arch") {
    c.backbone.arch = parse_arch(v, ln);
  } else if (key == "f1") {
    c.backbone.f1 = parse_i64(v, ln, key);
    require(c.backbone.f1 >= 1, ln, "f1 must be at least 1");
  } else if (key == "depth_mult") {
    c.backbone.depth_mult = parse_i64(v, ln, key);
    require(c.backbone.depth_mult >= 1, ln, "depth_mult must be at least 1");
  } else if (key == "f2") {
    c.backbone.f2 = parse_i64(v, ln, key);
    require(c.backbone.f2 >= 1, ln, "f2 must be at least 1");
  } else if (key == "dropout") {
    c.backbone.dropout_p = parse_f64(v, ln, key);
    require(c.backbone.dropout_p >= 0.0 && c.backbone.dropout_p < 1.0, ln,
            "dropout must lie in [0, 1)");
  } else {
    fail(ln, "unknown key \"" + std::string(key) + "\" in section [backbone]");
  }
}

void apply_federated_key(ExperimentConfig& c, std::string_view key, std::string_view v, int ln) {
  FederatedConfig& f = c.federated;
  if (key == "participation") {
    f.participation = parse_f64(v, ln, key);
    require(f.participation > 0.0 && f.participation <= 1.0, ln,
            "participation must lie in (0, 1]");
  } else if (key == "local_epochs") {
    f.local_epochs = parse_i64(v, ln, key);
    require(f.local_epochs >= 1, ln, "local_epochs must be at least 1");
  } else if (key == "rounds") {
    f.rounds = parse_i64(v, ln, key);
    require(f.rounds >= 0, ln, "rounds must be non-negative");
  } else if (key == "batch_size") {
    f.batch_size = parse_i64(v, ln, key);
    require(f.batch_size >= 1, ln, "batch_size must be at least 1");
  } else if (key == "lr") {
    f.lr = parse_f64(v, ln, key);
    require(f.lr > 0.0, ln, "lr must be positive");
  } else if (key == "rho") {
    f.rho = parse_f64(v, ln, key);
    require(f.rho >= 0.0, ln, "rho must be non-negative");
  } else if (key == "weight_decay") {
    f.weight_decay = parse_f64(v, ln, key);
    require(f.weight_decay >= 0.0, ln, "weight_decay must be non-negative");
  } else if (key == "momentum") {
    f.momentum = parse_f64(v, ln, key);
    require(f.momentum >= 0.0 && f.momentum < 1.0, ln, "momentum must lie in [0, 1)");
  } else if (key == "mu_prox") {
    f.mu_prox = parse_f64(v, ln, key);
    require(f.mu_prox >= 0.0, ln, "mu_prox must be non-negative");
  } else if (key == "test_batch_size") {
    f.test_batch_size = parse_i64(v, ln, key);
    require(f.test_batch_size >= 1, ln, "test_batch_size must be at least 1");
  } else {
    fail(ln, "unknown key \"" + std::string(key) + "\" in section [federated]");
  }
}

void apply_experiment_key(ExperimentConfig& c, std::string_view key, std::string_view v, int ln) {
  if (key == "seeds") {
    c.seeds.clear();
    for (const auto part : split_list(v)) c.seeds.push_back(parse_u64(part, ln, key));
    require(!c.seeds.empty(), ln, "seeds must list at least one value");
  } else if (key == "strategies") {
    c.strategies.clear();
    for (const auto part : split_list(v)) {
      try {
        c.strategies.push_back(parse_strategy(part));
      } catch (const std::invalid_argument& e) {
        fail(ln, e.what());
      }
    }
  } else if (key == "out") {
    c.out_dir = std::string(v);
    require(!c.out_dir.empty(), ln, "out must not be empty");
  } else {
    fail(ln, "unknown key \"" + std::string(key) + "\" in section [experiment]");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (use_synthetic) {
    if (synthetic.subjects < 2) throw ConfigError("synthetic data needs at least 2 subjects for leave-one-subject-out");
  } else if (data_path.empty()) {
    throw ConfigError("data source is a path but no path was given");
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (strategies.empty()) throw ConfigError("at least one strategy is required");
  for (std::size_t i = 0; i < strategies.size(); ++i)
    for (std::size_t j = i + 1; j < strategies.size(); ++j)
      if (strategies[i] == strategies[j])
        throw ConfigError(std::string("duplicate strategy \"") + std::string(strategy_name(strategies[i])) + "\"");
  if (out_dir.empty()) throw ConfigError("output directory must not be empty");
  FederatedConfig probe = federated;  // K and strategy are per-cell; check the rest
  probe.clients = 1;
  try {
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(line_no, "unterminated section header");
      const std::string name(trim(line.substr(1, line.size() - 2)));
      if (name != "data" && name != "backbone" && name != "federated" && name != "experiment")
        fail(line_no, "unknown section [" + name + "]");
      section = name;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(line_no, "expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) fail(line_no, "empty key");
    if (section.empty()) fail(line_no, "key \"" + std::string(key) + "\" appears before any [section]");
    if (section == "data") {
      apply_data_key(cfg, key, value, line_no);
    } else if (section == "backbone") {
      apply_backbone_key(cfg, key, value, line_no);
    } else if (section == "federated") {
      apply_federated_key(cfg, key, value, line_no);
    } else {
      apply_experiment_key(cfg, key, value, line_no);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file \"" + path + "\"");
  return parse_config(in);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "[data]\n";
  out << "source = " << (cfg.use_synthetic ? "synthetic" : "path") << "\n";
  if (!cfg.data_path.empty()) out << "path = " << cfg.data_path << "\n";
  out << "subjects = " << cfg.synthetic.subjects << "\n";
  out << "trials_per_subject = " << cfg.synthetic.trials_per_subject << "\n";
  out << "channels = " << cfg.synthetic.channels << "\n";
  out << "samples = " << cfg.synthetic.samples << "\n";
  out << "classes = " << cfg.synthetic.n_classes << "\n";
  out << "snr = " << fmt_f64(cfg.synthetic.snr) << "\n";
  out << "shift = " << fmt_f64(cfg.synthetic.shift_strength) << "\n";
  out << "sample_rate = " << fmt_f64(cfg.synthetic.sample_rate) << "\n";
  out << "data_seed = " << cfg.synthetic.seed << "\n";
  out << "apply_ea = " << (cfg.apply_ea ? "true" : "false") << "\n";
  out << "\n[backbone]\n";
  out << "arch = " << arch_name(cfg.backbone.arch) << "\n";
  out << "f1 = " << cfg.backbone.f1 << "\n";
  out << "depth_mult = " << cfg.backbone.depth_mult << "\n";
  out << "f2 = " << cfg.backbone.f2 << "\n";
  out << "dropout = " << fmt_f64(cfg.backbone.dropout_p) << "\n";
  out << "\n[federated]\n";
  out << "participation = " << fmt_f64(cfg.federated.participation) << "\n";
  out << "local_epochs = " << cfg.federated.local_epochs << "\n";
  out << "rounds = " << cfg.federated.rounds << "\n";
  out << "batch_size = " << cfg.federated.batch_size << "\n";
  out << "lr = " << fmt_f64(cfg.federated.lr) << "\n";
  out << "rho = " << fmt_f64(cfg.federated.rho) << "\n";
  out << "weight_decay = " << fmt_f64(cfg.federated.weight_decay) << "\n";
  out << "momentum = " << fmt_f64(cfg.federated.momentum) << "\n";
  out << "mu_prox = " << fmt_f64(cfg.federated.mu_prox) << "\n";
  out << "test_batch_size = " << cfg.federated.test_batch_size << "\n";
  out << "\n[experiment]\n";
  out << "seeds = ";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) out << (i ? "," : "") << cfg.seeds[i];
  out << "\n";
  out << "strategies = ";
  for (std::size_t i = 0; i < cfg.strategies.size(); ++i)
    out << (i ? "," : "") << strategy_name(cfg.strategies[i]);
  out << "\n";
  out << "out = " << cfg.out_dir << "\n";
  return out.str();
}

}  // namespace fedbs
