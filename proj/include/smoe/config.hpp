#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "smoe/model.hpp"

namespace smoe {

// Full experiment configuration: model shape plus training schedule. Stored
// as line-oriented key=value text with '#' comments.
struct RunConfig {
  ModelConfig model;
  long steps = 2000;
  long warmup = 160;  // 8% of the default step budget
  double peak_lr = 3e-3;
  int batch_tokens = 320;  // source+target token budget per training batch
  std::string data_dir;
  std::string out_dir = "run";
};

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream s;
  s.precision(17);
  s << "variant=" << cfg.model.variant_string() << "\n";
  s << "experts=" << cfg.model.n_experts << "\n";
  s << "k=" << cfg.model.k << "\n";
  s << "alpha=" << cfg.model.alpha << "\n";
  s << "d_model=" << cfg.model.d_model << "\n";
  s << "d_ff=" << cfg.model.d_ff << "\n";
  s << "n_heads=" << cfg.model.n_heads << "\n";
  s << "enc_layers=" << cfg.model.enc_layers << "\n";
  s << "dec_layers=" << cfg.model.dec_layers << "\n";
  s << "vocab_size=" << cfg.model.vocab_size << "\n";
  s << "max_seq_len=" << cfg.model.max_seq_len << "\n";
  s << "seed=" << cfg.model.seed << "\n";
  s << "steps=" << cfg.steps << "\n";
  s << "warmup=" << cfg.warmup << "\n";
  s << "peak_lr=" << cfg.peak_lr << "\n";
  s << "batch_tokens=" << cfg.batch_tokens << "\n";
  s << "data_dir=" << cfg.data_dir << "\n";
  s << "out_dir=" << cfg.out_dir << "\n";
  return s.str();
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(n) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "variant") cfg.model.set_variant(val);
    else if (key == "experts") cfg.model.n_experts = std::stoi(val);
    else if (key == "k") cfg.model.k = std::stoi(val);
    else if (key == "alpha") cfg.model.alpha = std::stod(val);
    else if (key == "d_model") cfg.model.d_model = std::stoi(val);
    else if (key == "d_ff") cfg.model.d_ff = std::stoi(val);
    else if (key == "n_heads") cfg.model.n_heads = std::stoi(val);
    else if (key == "enc_layers") cfg.model.enc_layers = std::stoi(val);
    else if (key == "dec_layers") cfg.model.dec_layers = std::stoi(val);
    else if (key == "vocab_size") cfg.model.vocab_size = std::stoi(val);
    else if (key == "max_seq_len") cfg.model.max_seq_len = std::stoi(val);
    else if (key == "seed") cfg.model.seed = std::stoull(val);
    else if (key == "steps") cfg.steps = std::stol(val);
    else if (key == "warmup") cfg.warmup = std::stol(val);
    else if (key == "peak_lr") cfg.peak_lr = std::stod(val);
    else if (key == "batch_tokens") cfg.batch_tokens = std::stoi(val);
    else if (key == "data_dir") cfg.data_dir = val;
    else if (key == "out_dir") cfg.out_dir = val;
    else throw std::invalid_argument("config: unknown key \"" + key + "\"");
  }
  // switch implies k=1 regardless of the key order in the file
  if (cfg.model.variant == MoeVariant::SwitchTop1) cfg.model.k = 1;
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), "cannot read config " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config(buf.str());
}

inline void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream f(path);
  require(f.good(), "cannot write config " + path.string());
  f << serialize_config(cfg);
}

}  // namespace smoe
