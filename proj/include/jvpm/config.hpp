#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jvpm/training.hpp"

namespace jvpm {

// Flat dotted-key configuration: "key = value" per line, '#' comments. Every
// key has a default; unknown keys are rejected so typos never pass silently.

inline const std::vector<std::pair<std::string, std::string>>& config_schema() {
  static const std::vector<std::pair<std::string, std::string>> schema = {
      {"tokenizer.frames", "17"},    // observed frames per window: 2, 5, 9, 17
      {"tokenizer.horizon", "17"},   // window span: 9, 13, 17, 21
      {"tokenizer.patch", "8"},
      {"model.dim", "32"},
      {"model.heads", "4"},
      {"model.gate_iterations", "3"},
      {"model.split_visual", "0"},   // 0 = even split
      {"head.kind", "oft"},
      {"flow.tau_alpha", "1.5"},
      {"flow.tau_beta", "1"},
      {"flow.steps", "10"},
      {"train.batch", "16"},
      {"train.lr", "0.002"},
      {"train.warmup", "200"},
      {"train.steps", "2000"},
      {"loss.lambda", "1"},
      {"loss.beta0", "1"},
      {"ablation.variant", "full_d"},
      {"seed", "0"},
  };
  return schema;
}

class Config {
 public:
  Config() {
    for (const auto& [key, value] : config_schema()) values_[key] = value;
  }

  void set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end()) {
      throw std::invalid_argument("unknown config key: " + key);
    }
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
    return it->second;
  }

  void parse_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    " is not 'key = value': " + line);
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    parse_text(buf.str());
  }

  // Every key in schema order — written verbatim into run directories.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [key, unused] : config_schema()) {
      os << key << " = " << values_.at(key) << "\n";
    }
    return os.str();
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t pos = 0;
      std::uint64_t out = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key " + key + " needs an unsigned integer, got '" +
                                  v + "'");
    }
  }

  double get_f64(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key " + key + " needs a number, got '" + v + "'");
    }
  }

  TrainConfig to_train_config() const {
    TrainConfig cfg;
    cfg.frames = get_u64("tokenizer.frames");
    cfg.horizon = get_u64("tokenizer.horizon");
    cfg.clip.patch = get_u64("tokenizer.patch");
    cfg.model.dim = get_u64("model.dim");
    cfg.model.heads = get_u64("model.heads");
    cfg.model.gate_iterations = get_u64("model.gate_iterations");
    cfg.model.n_visual = get_u64("model.split_visual");
    cfg.model.variant = parse_variant(get("ablation.variant"));
    cfg.head_kind = get("head.kind");
    if (cfg.head_kind != "oft" && cfg.head_kind != "flow") {
      throw std::invalid_argument("config key head.kind must be oft or flow, got '" +
                                  cfg.head_kind + "'");
    }
    cfg.head.tau_alpha = get_f64("flow.tau_alpha");
    cfg.head.tau_beta = get_f64("flow.tau_beta");
    cfg.head.flow_steps = get_u64("flow.steps");
    cfg.batch = get_u64("train.batch");
    if (cfg.batch == 0) throw std::invalid_argument("config key train.batch must be positive");
    cfg.lr = get_f64("train.lr");
    cfg.warmup = get_u64("train.warmup");
    cfg.steps = get_u64("train.steps");
    if (cfg.steps == 0) throw std::invalid_argument("config key train.steps must be positive");
    cfg.lambda = get_f64("loss.lambda");
    if (cfg.lambda < 0.0) {
      throw std::invalid_argument("config key loss.lambda must be non-negative");
    }
    cfg.beta0 = get_f64("loss.beta0");
    cfg.seed = get_u64("seed");
    cfg.clip.seed = cfg.seed;
    return cfg;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace jvpm
