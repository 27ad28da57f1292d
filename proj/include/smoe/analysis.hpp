#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "smoe/matrix.hpp"

namespace smoe {

// One routed token observation in one MoE block. Requested capacity (RC) is
// reported in two flavors: hop count (gate rounds, the headline metric) and
// non-dropped expert evaluations.
struct RcRecord {
  std::string split;  // "train" or "dev"
  int src_lang = 0;
  int tgt_lang = 0;
  char side = 'e';  // 'e' encoder, 'd' decoder
  int block_layer = 0;
  int token_id = 0;
  int hops = 0;
  int expert_evals = 0;
};

struct DirectionRc {
  int src_lang = 0;
  int tgt_lang = 0;
  char side = 'e';
  double mean_hops = 0.0;
  double mean_evals = 0.0;
  long n = 0;
};

struct BlockRcRow {
  char side = 'e';
  int block_layer = 0;
  double mean_hops = 0.0;
  double mean_evals = 0.0;
  long n = 0;
};

struct TokenRcRow {
  std::string group;  // "high" or "low"
  int token_id = 0;
  double mean_hops = 0.0;
  long freq_rank = 0;  // 0 = most frequent token in the training data
  long n = 0;
};

// Mean RC per (source language, target language, encoder/decoder side),
// averaged across all MoE blocks on that side. Empty groups are omitted.
inline std::vector<DirectionRc> rc_by_direction(const std::vector<RcRecord>& records) {
  std::map<std::tuple<int, int, char>, DirectionRc> groups;
  for (const RcRecord& r : records) {
    DirectionRc& g = groups[{r.src_lang, r.tgt_lang, r.side}];
    g.src_lang = r.src_lang;
    g.tgt_lang = r.tgt_lang;
    g.side = r.side;
    g.mean_hops += r.hops;
    g.mean_evals += r.expert_evals;
    g.n += 1;
  }
  std::vector<DirectionRc> out;
  for (auto& [key, g] : groups) {
    g.mean_hops /= g.n;
    g.mean_evals /= g.n;
    out.push_back(g);
  }
  return out;
}

// Mean RC per MoE block position, encoder blocks first, then decoder, by
// layer index.
inline std::vector<BlockRcRow> rc_by_block(const std::vector<RcRecord>& records) {
  std::map<std::pair<int, int>, BlockRcRow> groups;  // (side order, layer)
  for (const RcRecord& r : records) {
    BlockRcRow& g = groups[{r.side == 'e' ? 0 : 1, r.block_layer}];
    g.side = r.side;
    g.block_layer = r.block_layer;
    g.mean_hops += r.hops;
    g.mean_evals += r.expert_evals;
    g.n += 1;
  }
  std::vector<BlockRcRow> out;
  for (auto& [key, g] : groups) {
    g.mean_hops /= g.n;
    g.mean_evals /= g.n;
    out.push_back(g);
  }
  return out;
}

// Per block and per direction, pick the top-n highest and bottom-n lowest
// mean-RC tokens, then deduplicate tokens selected by several blocks or
// directions. freq_rank 0 is the most frequent training token.
inline std::vector<TokenRcRow> rc_by_token_frequency(const std::vector<RcRecord>& records,
                                                     const std::map<int, long>& frequencies,
                                                     int top_n = 25) {
  // frequency ranks: descending count, ties by token id
  std::vector<std::pair<long, int>> by_count;
  for (const auto& [tok, n] : frequencies) by_count.emplace_back(-n, tok);
  std::sort(by_count.begin(), by_count.end());
  std::map<int, long> rank;
  for (std::size_t i = 0; i < by_count.size(); ++i) rank[by_count[i].second] = i;

  struct Acc {
    double hops = 0.0;
    long n = 0;
  };
  // (side, layer, src, tgt) -> token -> mean hops
  std::map<std::tuple<char, int, int, int>, std::map<int, Acc>> cells;
  for (const RcRecord& r : records) {
    require(rank.contains(r.token_id),
            "rc_by_token_frequency: token " + std::to_string(r.token_id) +
                " missing from frequency table");
    Acc& a = cells[{r.side, r.block_layer, r.src_lang, r.tgt_lang}][r.token_id];
    a.hops += r.hops;
    a.n += 1;
  }
  std::set<int> high_ids, low_ids;
  for (const auto& [cell, tokens] : cells) {
    std::vector<std::pair<double, int>> means;
    for (const auto& [tok, a] : tokens) means.emplace_back(a.hops / a.n, tok);
    std::sort(means.begin(), means.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const int n = std::min<int>(top_n, static_cast<int>(means.size()));
    for (int i = 0; i < n; ++i) high_ids.insert(means[i].second);
    for (int i = 0; i < n; ++i) low_ids.insert(means[static_cast<int>(means.size()) - 1 - i].second);
  }
  // overall mean per token for reporting
  std::map<int, Acc> overall;
  for (const RcRecord& r : records) {
    Acc& a = overall[r.token_id];
    a.hops += r.hops;
    a.n += 1;
  }
  std::vector<TokenRcRow> out;
  for (int tok : high_ids)
    out.push_back({"high", tok, overall[tok].hops / overall[tok].n, rank[tok], overall[tok].n});
  for (int tok : low_ids)
    out.push_back({"low", tok, overall[tok].hops / overall[tok].n, rank[tok], overall[tok].n});
  return out;
}

// ---------------------------------------------------------------------------
// CSV schemas
// ---------------------------------------------------------------------------

inline void write_rc_records(const std::filesystem::path& path,
                             const std::vector<RcRecord>& records) {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path.string());
  f << "split,src_lang,tgt_lang,side,block_layer,token_id,hops,expert_evals\n";
  for (const RcRecord& r : records) {
    f << r.split << ',' << r.src_lang << ',' << r.tgt_lang << ',' << r.side << ','
      << r.block_layer << ',' << r.token_id << ',' << r.hops << ',' << r.expert_evals << '\n';
  }
}

inline std::vector<RcRecord> read_rc_records(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), "cannot read " + path.string());
  std::string header;
  std::getline(f, header);
  const std::vector<std::string> expected = {"split",       "src_lang", "tgt_lang",
                                             "side",        "block_layer", "token_id",
                                             "hops",        "expert_evals"};
  std::istringstream hs(header);
  std::string col;
  std::size_t i = 0;
  while (std::getline(hs, col, ',')) {
    require(i < expected.size() && col == expected[i],
            "rc_records: expected column \"" + (i < expected.size() ? expected[i] : "<none>") +
                "\", found \"" + col + "\"");
    ++i;
  }
  if (i != expected.size())
    throw std::invalid_argument("rc_records: missing column \"" + expected[i] + "\"");
  std::vector<RcRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    RcRecord r;
    std::string field;
    std::getline(ls, r.split, ',');
    std::getline(ls, field, ',');
    r.src_lang = std::stoi(field);
    std::getline(ls, field, ',');
    r.tgt_lang = std::stoi(field);
    std::getline(ls, field, ',');
    require(!field.empty(), "rc_records: empty side field");
    r.side = field[0];
    std::getline(ls, field, ',');
    r.block_layer = std::stoi(field);
    std::getline(ls, field, ',');
    r.token_id = std::stoi(field);
    std::getline(ls, field, ',');
    r.hops = std::stoi(field);
    std::getline(ls, field, ',');
    r.expert_evals = std::stoi(field);
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_rc_by_direction(const std::filesystem::path& path,
                                  const std::vector<DirectionRc>& rows) {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path.string());
  f << "src_lang,tgt_lang,side,mean_hops,mean_evals,n\n";
  for (const DirectionRc& r : rows)
    f << r.src_lang << ',' << r.tgt_lang << ',' << r.side << ',' << r.mean_hops << ','
      << r.mean_evals << ',' << r.n << '\n';
}

inline void write_rc_tokens(const std::filesystem::path& path,
                            const std::vector<TokenRcRow>& rows) {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path.string());
  f << "group,token_id,mean_hops,freq_rank,n\n";
  for (const TokenRcRow& r : rows)
    f << r.group << ',' << r.token_id << ',' << r.mean_hops << ',' << r.freq_rank << ',' << r.n
      << '\n';
}

inline void write_rc_by_block(const std::filesystem::path& path,
                              const std::vector<BlockRcRow>& rows) {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path.string());
  f << "side,block_layer,mean_hops,mean_evals,n\n";
  for (const BlockRcRow& r : rows)
    f << r.side << ',' << r.block_layer << ',' << r.mean_hops << ',' << r.mean_evals << ','
      << r.n << '\n';
}

}  // namespace smoe
