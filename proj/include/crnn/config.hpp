// SPDX-License-Identifier: Apache-2.0
//
// Run configuration shared by the command-line tool: a flat set of known
// keys read from a `key = value` file and overridden by command-line flags.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crnn/dataset.hpp"
#include "crnn/error.hpp"
#include "crnn/evaluation.hpp"
#include "crnn/model.hpp"
#include "crnn/training.hpp"

namespace crnn::config {

struct KeyInfo {
  const char* name;
  const char* help;
};

inline const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys = {
      {"features", "directory of feature CSVs (or one CSV for predict)"},
      {"annotations", "directory of annotation CSVs"},
      {"eval_features", "evaluation-set feature directory (sweep)"},
      {"eval_annotations", "evaluation-set annotation directory (sweep)"},
      {"audio", "directory of WAV files (extract)"},
      {"checkpoint", "model checkpoint path"},
      {"output", "output file or directory"},
      {"report", "per-epoch training report CSV"},
      {"feature_dim", "input feature count (param-count; inferred from data otherwise)"},
      {"cnn_filters", "convolution filters"},
      {"fc_units", "dense units per branch"},
      {"gru_units", "GRU units per direction"},
      {"branched", "separate valence/arousal branches (true/false)"},
      {"dropout", "dropout rate for the CNN and GRU input"},
      {"maxout_pieces", "affine pieces per maxout unit"},
      {"bn_eps", "batch-norm epsilon"},
      {"bn_momentum", "batch-norm running-stat momentum"},
      {"batch_size", "mini-batch size"},
      {"seq_len", "training/evaluation window length in segments"},
      {"learning_rate", "Adam learning rate"},
      {"beta1", "Adam beta1"},
      {"beta2", "Adam beta2"},
      {"adam_eps", "Adam epsilon"},
      {"l1", "ElasticNet L1 weight"},
      {"l2", "ElasticNet L2 weight"},
      {"max_epochs", "epoch limit"},
      {"patience", "early-stopping patience in epochs"},
      {"seed", "random seed"},
      {"val_ratio", "fraction of songs held out for early stopping"},
      {"shuffle", "shuffle windows every epoch (true/false)"},
      {"seeds", "comma-separated seeds (sweep)"},
      {"seq_lens", "comma-separated window lengths (sweep)"},
      {"eval_mode", "pooled or per_song_mean"},
      {"n_mels", "mel bands (extract)"},
  };
  return keys;
}

inline bool is_known(const std::string& key) {
  for (const auto& k : known_keys())
    if (key == k.name) return true;
  return false;
}

/// Raw key -> value strings after merging file and flags.
using Settings = std::map<std::string, std::string>;

inline Settings parse_config_text(const std::string& text, const std::string& origin) {
  Settings out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = dataset::detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = dataset::detail::trim(t.substr(0, eq));
    const std::string value = dataset::detail::trim(t.substr(eq + 1));
    if (!is_known(key)) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    out[key] = value;
  }
  return out;
}

inline Settings read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Later settings win.
inline Settings merge(Settings base, const Settings& overrides) {
  for (const auto& [k, v] : overrides) {
    if (!is_known(k)) throw ConfigError("unknown key '" + k + "'");
    base[k] = v;
  }
  return base;
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || x < 0) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return x;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <typename T, typename Conv>
std::vector<T> to_list(const std::string& key, const std::string& v, Conv conv) {
  std::vector<T> out;
  for (const auto& item : dataset::detail::split(v, ',')) {
    if (item.empty()) continue;
    out.push_back(conv(key, item));
  }
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

}  // namespace detail

/// Fully typed configuration.
struct RunConfig {
  std::string features, annotations, eval_features, eval_annotations, audio;
  std::string checkpoint, output, report;
  std::size_t feature_dim = 0;  // 0: infer from data
  ModelSpec model;
  training::TrainConfig train;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::size_t> seq_lens = {10, 20, 30, 60};
  evaluation::EvalMode eval_mode = evaluation::EvalMode::pooled;
  std::size_t n_mels = 64;
  Settings settings;  // resolved raw values

  /// Model specification for data with `dim` features.
  ModelSpec model_for(std::size_t dim) const {
    ModelSpec s = model;
    s.feature_dim = dim;
    return s;
  }
};

inline RunConfig resolve(const Settings& s) {
  namespace d = detail;
  RunConfig c;
  c.settings = s;
  const auto get = [&](const char* key) -> const std::string* {
    const auto it = s.find(key);
    return it == s.end() ? nullptr : &it->second;
  };
  for (const auto& [k, v] : s) {
    if (!is_known(k)) throw ConfigError("unknown key '" + k + "'");
  }
  if (auto v = get("features")) c.features = *v;
  if (auto v = get("annotations")) c.annotations = *v;
  if (auto v = get("eval_features")) c.eval_features = *v;
  if (auto v = get("eval_annotations")) c.eval_annotations = *v;
  if (auto v = get("audio")) c.audio = *v;
  if (auto v = get("checkpoint")) c.checkpoint = *v;
  if (auto v = get("output")) c.output = *v;
  if (auto v = get("report")) c.report = *v;
  if (auto v = get("feature_dim")) c.feature_dim = d::to_size("feature_dim", *v);
  if (auto v = get("cnn_filters")) c.model.cnn_filters = d::to_size("cnn_filters", *v);
  if (auto v = get("fc_units")) c.model.fc_units = d::to_size("fc_units", *v);
  if (auto v = get("gru_units")) c.model.gru_units = d::to_size("gru_units", *v);
  if (auto v = get("branched")) c.model.branched = d::to_bool("branched", *v);
  if (auto v = get("dropout")) c.model.dropout_rate = d::to_double("dropout", *v);
  if (auto v = get("maxout_pieces")) c.model.maxout_pieces = d::to_size("maxout_pieces", *v);
  if (auto v = get("bn_eps")) c.model.bn_eps = d::to_double("bn_eps", *v);
  if (auto v = get("bn_momentum")) c.model.bn_momentum = d::to_double("bn_momentum", *v);
  if (auto v = get("batch_size")) c.train.batch_size = d::to_size("batch_size", *v);
  if (auto v = get("seq_len")) c.train.seq_len = d::to_size("seq_len", *v);
  if (auto v = get("learning_rate")) c.train.learning_rate = d::to_double("learning_rate", *v);
  if (auto v = get("beta1")) c.train.beta1 = d::to_double("beta1", *v);
  if (auto v = get("beta2")) c.train.beta2 = d::to_double("beta2", *v);
  if (auto v = get("adam_eps")) c.train.adam_eps = d::to_double("adam_eps", *v);
  if (auto v = get("l1")) c.train.l1 = d::to_double("l1", *v);
  if (auto v = get("l2")) c.train.l2 = d::to_double("l2", *v);
  if (auto v = get("max_epochs")) c.train.max_epochs = d::to_size("max_epochs", *v);
  if (auto v = get("patience")) c.train.patience = d::to_size("patience", *v);
  if (auto v = get("seed")) c.train.seed = d::to_u64("seed", *v);
  if (auto v = get("val_ratio")) c.train.val_ratio = d::to_double("val_ratio", *v);
  if (auto v = get("shuffle")) c.train.shuffle = d::to_bool("shuffle", *v);
  if (auto v = get("seeds")) c.seeds = d::to_list<std::uint64_t>("seeds", *v, d::to_u64);
  if (auto v = get("seq_lens")) c.seq_lens = d::to_list<std::size_t>("seq_lens", *v, d::to_size);
  if (auto v = get("eval_mode")) {
    if (*v == "pooled") {
      c.eval_mode = evaluation::EvalMode::pooled;
    } else if (*v == "per_song_mean") {
      c.eval_mode = evaluation::EvalMode::per_song_mean;
    } else {
      throw ConfigError("eval_mode: expected pooled or per_song_mean, got '" + *v + "'");
    }
  }
  if (auto v = get("n_mels")) c.n_mels = d::to_size("n_mels", *v);
  if (c.n_mels == 0) throw ConfigError("n_mels: must be >= 1");
  for (std::size_t L : c.seq_lens) {
    if (L == 0) throw ConfigError("seq_lens: lengths must be >= 1");
  }

  ModelSpec probe = c.model;
  probe.feature_dim = 1;
  probe.validate();
  c.train.validate();
  return c;
}

/// Every result-affecting setting (defaults included) as sorted `key=value`
/// lines. Output destinations are left out.
inline std::string canonical(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  const auto num = [](double v) { return dataset::fmt_value(v); };
  const auto join = [](const auto& xs) {
    std::string out;
    for (const auto& x : xs) out += (out.empty() ? "" : ",") + std::to_string(x);
    return out;
  };
  kv["features"] = c.features;
  kv["annotations"] = c.annotations;
  kv["eval_features"] = c.eval_features;
  kv["eval_annotations"] = c.eval_annotations;
  kv["audio"] = c.audio;
  kv["feature_dim"] = std::to_string(c.feature_dim);
  kv["cnn_filters"] = std::to_string(c.model.cnn_filters);
  kv["fc_units"] = std::to_string(c.model.fc_units);
  kv["gru_units"] = std::to_string(c.model.gru_units);
  kv["branched"] = c.model.branched ? "true" : "false";
  kv["dropout"] = num(c.model.dropout_rate);
  kv["maxout_pieces"] = std::to_string(c.model.maxout_pieces);
  kv["bn_eps"] = num(c.model.bn_eps);
  kv["bn_momentum"] = num(c.model.bn_momentum);
  kv["batch_size"] = std::to_string(c.train.batch_size);
  kv["seq_len"] = std::to_string(c.train.seq_len);
  kv["learning_rate"] = num(c.train.learning_rate);
  kv["beta1"] = num(c.train.beta1);
  kv["beta2"] = num(c.train.beta2);
  kv["adam_eps"] = num(c.train.adam_eps);
  kv["l1"] = num(c.train.l1);
  kv["l2"] = num(c.train.l2);
  kv["max_epochs"] = std::to_string(c.train.max_epochs);
  kv["patience"] = std::to_string(c.train.patience);
  kv["seed"] = std::to_string(c.train.seed);
  kv["val_ratio"] = num(c.train.val_ratio);
  kv["shuffle"] = c.train.shuffle ? "true" : "false";
  kv["seeds"] = join(c.seeds);
  kv["seq_lens"] = join(c.seq_lens);
  kv["eval_mode"] = c.eval_mode == evaluation::EvalMode::pooled ? "pooled" : "per_song_mean";
  kv["n_mels"] = std::to_string(c.n_mels);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

/// 16 hex digits of FNV-1a over canonical(c).
inline std::string config_hash(const RunConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << dataset::fnv1a(canonical(c));
  return os.str();
}

}  // namespace crnn::config
