#pragma once

#include "dali/common.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dali {

// Thrown for schema violations; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat typed key=value configuration. Unknown keys are rejected; the resolved
// form (all keys, sorted) is written next to every run for provenance.
class Config {
 public:
  enum class Type { integer, real, boolean, text };

  struct Entry {
    Type type;
    std::string value;                // canonical string form
    std::vector<std::string> choices; // allowed values when non-empty
  };

  Config() { install_schema(); }

  static Config from_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
    Config cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      cfg.apply_line(line, path + ":" + std::to_string(lineno));
    }
    for (const auto& ov : overrides) cfg.apply_line(ov, "--set " + ov);
    return cfg;
  }

  static Config from_overrides(const std::vector<std::string>& overrides) {
    Config cfg;
    for (const auto& ov : overrides) cfg.apply_line(ov, "--set " + ov);
    return cfg;
  }

  void set(const std::string& key, const std::string& raw) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown config key: " + key);
    std::string v = trim(raw);
    Entry& e = it->second;
    switch (e.type) {
      case Type::integer: {
        try {
          std::size_t pos = 0;
          (void)std::stoll(v, &pos);
          if (pos != v.size()) throw std::invalid_argument("");
        } catch (...) {
          throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
        }
        break;
      }
      case Type::real: {
        try {
          std::size_t pos = 0;
          (void)std::stod(v, &pos);
          if (pos != v.size()) throw std::invalid_argument("");
        } catch (...) {
          throw ConfigError("key '" + key + "' expects a real number, got '" + v + "'");
        }
        break;
      }
      case Type::boolean: {
        if (v != "true" && v != "false")
          throw ConfigError("key '" + key + "' expects true/false, got '" + v + "'");
        break;
      }
      case Type::text: break;
    }
    if (!e.choices.empty() &&
        std::find(e.choices.begin(), e.choices.end(), v) == e.choices.end()) {
      std::string allowed;
      for (const auto& c : e.choices) allowed += (allowed.empty() ? "" : "|") + c;
      throw ConfigError("key '" + key + "' must be one of {" + allowed + "}, got '" + v + "'");
    }
    e.value = v;
  }

  long get_int(const std::string& key) const { return std::stoll(fetch(key, Type::integer)); }
  double get_real(const std::string& key) const { return std::stod(fetch(key, Type::real)); }
  bool get_bool(const std::string& key) const { return fetch(key, Type::boolean) == "true"; }
  const std::string& get_text(const std::string& key) const {
    return entries_.at(check_key(key)).value;
  }

  // Canonical resolved form: every key, sorted, one per line.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [k, e] : entries_) os << k << " = " << e.value << "\n";
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a(resolved_text()); }

  void validate() const {
    double lc = get_real("lambda_cross");
    if (lc != 0.0 && lc != 1.0) throw ConfigError("lambda_cross must be 0 or 1");
    for (const char* k : {"total_steps", "episode_len", "context_k", "batch_size", "seq_len",
                          "horizon", "seed_episodes", "collect_interval"})
      if (get_int(k) < 1) throw ConfigError(std::string(k) + " must be positive");
    if (get_real("noise_sigma") < 0) throw ConfigError("noise_sigma must be >= 0");
  }

 private:
  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
  }

  void apply_line(const std::string& line, const std::string& where) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') return;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value' at " + where);
    try {
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& err) {
      throw ConfigError(std::string(err.what()) + " (at " + where + ")");
    }
  }

  const std::string& check_key(const std::string& key) const {
    if (!entries_.count(key)) throw ConfigError("unknown config key: " + key);
    return key;
  }

  const std::string& fetch(const std::string& key, Type t) const {
    const Entry& e = entries_.at(check_key(key));
    if (e.type != t) throw ConfigError("wrong type for key: " + key);
    return e.value;
  }

  void add(const std::string& key, Type type, const std::string& def,
           std::vector<std::string> choices = {}) {
    entries_[key] = Entry{type, def, std::move(choices)};
  }

  void install_schema() {
    // experiment identity
    add("env", Type::text, "swing", {"swing", "hopper"});
    add("variant", Type::text, "dali_s",
        {"dreamer_dr", "dali_s", "dali_d", "crssm_s", "crssm_d"});
    add("context_mode", Type::text, "double", {"single_0", "single_1", "double"});
    add("seed", Type::integer, "0");
    add("out_dir", Type::text, "runs/run");

    // training loop
    add("total_steps", Type::integer, "50000");
    add("episode_len", Type::integer, "200");
    add("context_k", Type::integer, "32");
    add("batch_size", Type::integer, "16");
    add("seq_len", Type::integer, "64");
    add("horizon", Type::integer, "15");
    add("seed_episodes", Type::integer, "5");
    add("collect_interval", Type::integer, "4");
    add("lambda_cross", Type::real, "1");
    add("lr", Type::real, "3e-4");
    add("lr_ctx", Type::real, "1e-3");
    add("gamma", Type::real, "0.99");
    add("td_lambda", Type::real, "0.95");
    add("entropy_coef", Type::real, "3e-4");
    add("free_bits", Type::real, "1.0");
    add("kl_balance", Type::real, "0.8");
    add("grad_clip", Type::real, "100");
    add("imag_starts", Type::integer, "128");
    add("n_train_contexts", Type::integer, "100");
    add("checkpoint_every", Type::integer, "5000");

    // model sizes (paper-shaped defaults; context/posterior dims are fixed)
    add("d_h", Type::integer, "128");
    add("wm_hidden", Type::integer, "128");
    add("enc_width", Type::integer, "256");
    add("fwd_hidden", Type::integer, "128");
    add("ac_hidden", Type::integer, "128");
    add("pos_encoding", Type::boolean, "true");
    add("pooling", Type::text, "last", {"last", "mean"});
    add("learned_h0", Type::boolean, "false");

    // environment
    add("noise_sigma", Type::real, "0.01");
    // optional range overrides, "lo:hi" or empty for the environment default
    add("ctx0_train", Type::text, "");
    add("ctx0_eval", Type::text, "");
    add("ctx0_default", Type::text, "");
    add("ctx1_train", Type::text, "");
    add("ctx1_eval", Type::text, "");
    add("ctx1_default", Type::text, "");

    // evaluation protocol
    add("eval_contexts_per_regime", Type::integer, "20");
    add("eval_episodes_per_context", Type::integer, "5");
    add("eval_seeds", Type::integer, "10");

    // counterfactual analysis
    add("cf_n", Type::integer, "2500");
    add("cf_horizon", Type::integer, "50");
    add("cf_k", Type::integer, "50");
    add("cf_resamples", Type::integer, "500");
    add("cf_perm_iters", Type::integer, "1000");
    add("cf_folds", Type::integer, "5");
    add("cf_mlp_hidden", Type::integer, "64");
    add("cf_mlp_epochs", Type::integer, "60");
    add("cf_stumps", Type::integer, "100");
    add("cf_rff_features", Type::integer, "256");
    add("cf_action_mode", Type::text, "zero", {"zero", "policy"});

    // probes
    add("probe_episodes", Type::integer, "120");
    add("probe_ridge_lambda", Type::real, "1.0");
    add("probe_kgrid", Type::text, "1,2,4,8,16,32");
    add("probe_bins", Type::integer, "4");
  }

  std::map<std::string, Entry> entries_;
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace dali
