#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smoe/matrix.hpp"
#include "smoe/rng.hpp"

namespace smoe {

// Token id layout for the synthetic task: BOS, EOS, one <2xxx> tag per
// language, then one content range per language. The ranges are disjoint so
// the source language is identifiable from the text itself (as with real
// languages); the source carries only the *target* language tag, so a shared
// surface range would make the translation direction ambiguous and cap
// attainable token accuracy near 1/n_languages.
struct VocabSpec {
  int n_languages = 0;
  int content_vocab = 0;

  static constexpr int bos = 0;
  static constexpr int eos = 1;

  int tag(int lang) const { return 2 + lang; }
  int content(int lang, int c) const { return 2 + n_languages + lang * content_vocab + c; }
  int size() const { return 2 + n_languages + n_languages * content_vocab; }
  bool is_tag(int token) const { return token >= 2 && token < 2 + n_languages; }
};

// Source sequence carries the <2xxx> target-language tag in position 0.
struct Example {
  int src_lang = 0;
  int tgt_lang = 0;
  std::vector<int> src;
  std::vector<int> tgt;
};

struct Dataset {
  VocabSpec vocab;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::uint64_t seed = 0;
};

// Each "language" renders content tokens through a fixed seeded permutation;
// translating A -> B maps a sequence through pi_A on the source side and pi_B
// on the target side.
inline std::vector<int> language_permutation(int lang, int content_vocab, std::uint64_t seed) {
  std::vector<int> perm(content_vocab);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, "lang-perm-" + std::to_string(lang));
  rng.shuffle(perm);
  return perm;
}

struct SyntheticTaskConfig {
  int n_languages = 4;
  int content_vocab = 32;
  int train_per_direction = 400;
  int dev_per_direction = 32;
  int min_len = 4;
  int max_len = 10;
  std::uint64_t seed = 1;
  bool include_identity = false;  // also generate A -> A copy directions
  // optional per-direction override of train_per_direction, in (src, tgt)
  // lexicographic order; mimics high/low-resource imbalance
  std::vector<int> train_sizes;
};

inline Dataset gen_synthetic_task(const SyntheticTaskConfig& cfg) {
  require(cfg.n_languages >= 2 || cfg.include_identity, "gen_synthetic_task: need >= 2 languages");
  require(cfg.min_len >= 1 && cfg.max_len >= cfg.min_len, "gen_synthetic_task: bad lengths");
  Dataset ds;
  ds.vocab = {cfg.n_languages, cfg.content_vocab};
  ds.seed = cfg.seed;

  std::vector<std::vector<int>> perms;
  for (int l = 0; l < cfg.n_languages; ++l)
    perms.push_back(language_permutation(l, cfg.content_vocab, cfg.seed));

  std::vector<std::pair<int, int>> directions;
  for (int a = 0; a < cfg.n_languages; ++a)
    for (int b = 0; b < cfg.n_languages; ++b)
      if (a != b || cfg.include_identity) directions.emplace_back(a, b);
  if (!cfg.train_sizes.empty())
    require(cfg.train_sizes.size() == directions.size(),
            "gen_synthetic_task: train_sizes must cover every direction");

  auto emit = [&](Rng& rng, int a, int b, int count, std::vector<Example>& sink) {
    for (int n = 0; n < count; ++n) {
      const int len = rng.uniform_int(cfg.min_len, cfg.max_len);
      Example ex;
      ex.src_lang = a;
      ex.tgt_lang = b;
      ex.src.push_back(ds.vocab.tag(b));
      for (int i = 0; i < len; ++i) {
        const int c = rng.uniform_int(0, cfg.content_vocab - 1);
        ex.src.push_back(ds.vocab.content(a, perms[a][c]));
        ex.tgt.push_back(ds.vocab.content(b, perms[b][c]));
      }
      sink.push_back(std::move(ex));
    }
  };

  Rng train_rng(cfg.seed, "train-data");
  Rng dev_rng(cfg.seed, "dev-data");
  for (std::size_t d = 0; d < directions.size(); ++d) {
    const auto [a, b] = directions[d];
    const int n_train = cfg.train_sizes.empty() ? cfg.train_per_direction : cfg.train_sizes[d];
    emit(train_rng, a, b, n_train, ds.train);
    emit(dev_rng, a, b, cfg.dev_per_direction, ds.dev);
  }
  return ds;
}

// Counted as the model consumes tokens: the tagged source sequence plus the
// BOS-prefixed, EOS-terminated target sequence.
inline std::map<int, long> token_frequencies(const std::vector<Example>& examples,
                                             const VocabSpec& vocab) {
  std::map<int, long> freq;
  for (const Example& ex : examples) {
    for (int t : ex.src) ++freq[t];
    ++freq[vocab.bos];
    for (int t : ex.tgt) ++freq[t];
    ++freq[vocab.eos];
  }
  return freq;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------
// Example files: one example per line, `<2xxx>` tag then space-separated
// source token ids, a tab, then target token ids. `# dir lA-lB` comment lines
// carry the direction of the following group.

namespace detail {

inline void write_examples(const std::filesystem::path& path, const std::vector<Example>& exs) {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path.string());
  int cur_src = -1, cur_tgt = -1;
  for (const Example& ex : exs) {
    if (ex.src_lang != cur_src || ex.tgt_lang != cur_tgt) {
      cur_src = ex.src_lang;
      cur_tgt = ex.tgt_lang;
      f << "# dir l" << cur_src << "-l" << cur_tgt << "\n";
    }
    f << "<2l" << ex.tgt_lang << ">";
    for (std::size_t i = 1; i < ex.src.size(); ++i) f << ' ' << ex.src[i];
    f << '\t';
    for (std::size_t i = 0; i < ex.tgt.size(); ++i) {
      if (i) f << ' ';
      f << ex.tgt[i];
    }
    f << '\n';
  }
}

inline std::vector<Example> read_examples(const std::filesystem::path& path,
                                          const VocabSpec& vocab) {
  std::ifstream f(path);
  require(f.good(), "cannot read " + path.string());
  std::vector<Example> out;
  std::string line;
  int cur_src = -1, cur_tgt = -1;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto l = line.find('l');
      const auto dash = line.find('-', l);
      require(l != std::string::npos && dash != std::string::npos,
              "bad direction comment: " + line);
      cur_src = std::stoi(line.substr(l + 1, dash - l - 1));
      cur_tgt = std::stoi(line.substr(dash + 2));
      continue;
    }
    const auto tab = line.find('\t');
    require(tab != std::string::npos, "missing tab separator in: " + line);
    Example ex;
    std::istringstream src(line.substr(0, tab));
    std::string tok;
    src >> tok;
    require(tok.size() > 3 && tok.starts_with("<2l") && tok.back() == '>',
            "bad language tag: " + tok);
    ex.tgt_lang = std::stoi(tok.substr(3, tok.size() - 4));
    ex.src_lang = cur_src >= 0 ? cur_src : 0;
    require(cur_tgt < 0 || cur_tgt == ex.tgt_lang, "tag disagrees with direction comment");
    ex.src.push_back(vocab.tag(ex.tgt_lang));
    int id;
    while (src >> id) ex.src.push_back(id);
    std::istringstream tgt(line.substr(tab + 1));
    while (tgt >> id) ex.tgt.push_back(id);
    require(ex.src.size() >= 2 && !ex.tgt.empty(), "empty example line: " + line);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  detail::write_examples(dir / "train.txt", ds.train);
  detail::write_examples(dir / "dev.txt", ds.dev);
  {
    std::ofstream meta(dir / "meta.cfg");
    require(meta.good(), "cannot write dataset metadata");
    meta << "n_languages=" << ds.vocab.n_languages << "\n";
    meta << "content_vocab=" << ds.vocab.content_vocab << "\n";
    meta << "seed=" << ds.seed << "\n";
  }
  {
    std::ofstream freq(dir / "freq.csv");
    freq << "token_id,count\n";
    for (const auto& [tok, n] : token_frequencies(ds.train, ds.vocab)) freq << tok << ',' << n << '\n';
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream meta(dir / "meta.cfg");
  require(meta.good(), "cannot read " + (dir / "meta.cfg").string());
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "bad metadata line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "n_languages") ds.vocab.n_languages = std::stoi(val);
    else if (key == "content_vocab") ds.vocab.content_vocab = std::stoi(val);
    else if (key == "seed") ds.seed = std::stoull(val);
  }
  require(ds.vocab.n_languages > 0 && ds.vocab.content_vocab > 0, "incomplete dataset metadata");
  ds.train = detail::read_examples(dir / "train.txt", ds.vocab);
  ds.dev = detail::read_examples(dir / "dev.txt", ds.vocab);
  return ds;
}

inline std::map<int, long> load_frequency_table(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), "cannot read " + path.string());
  std::string header;
  std::getline(f, header);
  require(header.rfind("token_id,count", 0) == 0, "frequency table: missing column token_id");
  std::map<int, long> freq;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, "bad frequency row: " + line);
    freq[std::stoi(line.substr(0, comma))] = std::stol(line.substr(comma + 1));
  }
  return freq;
}

}  // namespace smoe
