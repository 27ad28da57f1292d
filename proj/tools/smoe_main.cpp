// Experiment CLI: synthetic data generation, training, evaluation, requested
// capacity analysis, and the analytical FLOPs table.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "smoe/analysis.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/config.hpp"
#include "smoe/data.hpp"
#include "smoe/flops.hpp"
#include "smoe/model.hpp"
#include "smoe/trainer.hpp"

namespace fs = std::filesystem;
using namespace smoe;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_gen_data(const SyntheticTaskConfig& cfg, const std::string& sizes,
                 const std::string& out_dir) {
  SyntheticTaskConfig c = cfg;
  if (!sizes.empty()) {
    for (const std::string& s : split_list(sizes)) c.train_sizes.push_back(std::stoi(s));
  }
  Dataset ds = gen_synthetic_task(c);
  save_dataset(out_dir, ds);
  std::cout << "wrote " << ds.train.size() << " train / " << ds.dev.size()
            << " dev examples, vocab " << ds.vocab.size() << ", to " << out_dir << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, bool resume) {
  require(!cfg.data_dir.empty(), "train: --data is required");
  Dataset ds = load_dataset(cfg.data_dir);
  if (cfg.model.vocab_size < ds.vocab.size()) cfg.model.vocab_size = ds.vocab.size();
  fs::create_directories(cfg.out_dir);
  const fs::path ckpt = fs::path(cfg.out_dir) / "checkpoint.ckpt";
  const fs::path metrics_path = fs::path(cfg.out_dir) / "metrics.csv";

  Model model(cfg.model);
  std::ofstream metrics;
  if (resume) {
    require(fs::exists(ckpt), "train: no checkpoint to resume at " + ckpt.string());
    load_checkpoint(ckpt, model.store());
    metrics.open(metrics_path, std::ios::app);
  } else {
    metrics.open(metrics_path);
    metrics << "step,lr,task_loss,aux_loss,max_f\n";
  }
  save_config(fs::path(cfg.out_dir) / "config.cfg", cfg);

  try {
    train_loop(model, ds.train, cfg, [&](const TrainMetrics& m) {
      metrics << m.step << ',' << m.lr << ',' << m.task_loss << ',' << m.aux_loss << ','
              << m.max_f << '\n';
      if (m.step % 100 == 0 || m.step == cfg.steps) {
        std::cout << "step " << m.step << " lr " << m.lr << " task " << m.task_loss << " aux "
                  << m.aux_loss << " max_f " << m.max_f << "\n";
      }
    });
  } catch (const std::runtime_error& e) {
    // keep a partial checkpoint with the failure marker set
    save_checkpoint(ckpt, cfg, model.store(), /*failure_marker=*/true);
    std::cerr << "training aborted: " << e.what() << "\n";
    return 2;
  }
  save_checkpoint(ckpt, cfg, model.store());
  std::cout << "saved checkpoint to " << ckpt.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
             bool trace, const std::string& out_dir) {
  RunConfig cfg = read_checkpoint_config(ckpt_path);
  Dataset ds = load_dataset(data_dir);
  require(cfg.model.vocab_size >= ds.vocab.size(),
          "eval: dataset vocabulary exceeds checkpoint vocabulary");
  Model model(cfg.model);
  load_checkpoint(ckpt_path, model.store());

  const std::vector<Example>& examples = split == "train" ? ds.train : ds.dev;
  EvalResult res = evaluate(model, examples);
  std::cout << "token accuracy " << res.token_accuracy << " (" << res.correct << "/" << res.total
            << ")\n";
  for (const auto& [dir, ct] : res.per_direction) {
    std::cout << "  l" << dir.first << "->l" << dir.second << "  "
              << static_cast<double>(ct.first) / ct.second << "\n";
  }
  if (trace) {
    if (model.n_moe_blocks() == 0) {
      std::cout << "dense model: no routing traces to record\n";
    } else {
      fs::create_directories(out_dir);
      const std::vector<RcRecord> records = collect_rc_records(model, examples, split);
      write_rc_records(fs::path(out_dir) / "rc_records.csv", records);
      std::cout << "wrote " << records.size() << " rc records\n";
    }
  }
  return 0;
}

int cmd_analyze(const std::string& records_path, const std::string& freq_path,
                const std::string& out_dir, int top_n) {
  const std::vector<RcRecord> records = read_rc_records(records_path);
  const std::map<int, long> freq = load_frequency_table(freq_path);
  fs::create_directories(out_dir);
  write_rc_by_direction(fs::path(out_dir) / "rc_by_direction.csv", rc_by_direction(records));
  write_rc_tokens(fs::path(out_dir) / "rc_tokens.csv",
                  rc_by_token_frequency(records, freq, top_n));
  write_rc_by_block(fs::path(out_dir) / "rc_by_block.csv", rc_by_block(records));
  std::cout << "wrote rc_by_direction.csv, rc_tokens.csv, rc_by_block.csv to " << out_dir << "\n";
  return 0;
}

int cmd_flops(const std::string& arch_name, const std::string& variants, bool csv) {
  const ArchPreset arch = arch_preset(arch_name);
  if (csv) {
    std::cout << "variant,flops_per_token,reference_m,deviation_pct\n";
  } else {
    std::printf("%-12s %14s %12s %10s\n", "variant", "FLOPs/tok", "reference", "dev%");
  }
  for (const std::string& v : split_list(variants)) {
    const double flops = flops_per_token(v, arch);
    const auto ref = reference_flops_m(arch_name, v);
    if (csv) {
      std::cout << v << ',' << flops;
      if (ref) {
        std::cout << ',' << *ref << ',' << 100.0 * (flops / (*ref * 1e6) - 1.0);
      } else {
        std::cout << ",,";
      }
      std::cout << '\n';
    } else if (ref) {
      std::printf("%-12s %13.1fM %11.0fM %9.2f%%\n", v.c_str(), flops / 1e6, *ref,
                  100.0 * (flops / (*ref * 1e6) - 1.0));
    } else {
      std::printf("%-12s %13.1fM %11s %10s\n", v.c_str(), flops / 1e6, "-", "-");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stratified mixture-of-experts experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multilingual dataset");
  SyntheticTaskConfig gcfg;
  std::string gen_sizes, gen_out = "data";
  gen->add_option("--languages", gcfg.n_languages, "number of languages");
  gen->add_option("--content-vocab", gcfg.content_vocab, "content vocabulary size");
  gen->add_option("--train-per-direction", gcfg.train_per_direction, "training examples per direction");
  gen->add_option("--dev-per-direction", gcfg.dev_per_direction, "dev examples per direction");
  gen->add_option("--min-len", gcfg.min_len, "minimum content length");
  gen->add_option("--max-len", gcfg.max_len, "maximum content length");
  gen->add_option("--seed", gcfg.seed, "root seed");
  gen->add_option("--sizes", gen_sizes, "per-direction train sizes, comma separated");
  gen->add_flag("--include-identity", gcfg.include_identity, "also generate A->A copy directions");
  gen->add_option("--out", gen_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config, train_variant, train_data, train_out;
  RunConfig tcfg;
  bool resume = false;
  long opt_steps = -1, opt_warmup = -1;
  double opt_lr = -1.0, opt_alpha = -1.0;
  long long opt_seed = -1;
  int opt_batch_tokens = -1, opt_experts = -1;
  train->add_option("--config", train_config, "key=value config file");
  train->add_option("--variant", train_variant, "dense|vanilla|switch|stackedM|LAYOUT");
  train->add_option("--experts", opt_experts, "experts per block (baselines)");
  train->add_option("--data", train_data, "dataset directory");
  train->add_option("--out", train_out, "output directory");
  train->add_option("--steps", opt_steps, "training steps");
  train->add_option("--warmup", opt_warmup, "warmup steps");
  train->add_option("--peak-lr", opt_lr, "peak learning rate");
  train->add_option("--alpha", opt_alpha, "load-balancing loss coefficient");
  train->add_option("--batch-tokens", opt_batch_tokens, "token budget per batch");
  train->add_option("--seed", opt_seed, "root seed");
  train->add_flag("--resume", resume, "resume from the output checkpoint");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_split = "dev", eval_out = ".";
  bool eval_trace = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", eval_split, "train|dev")->check(CLI::IsMember({"train", "dev"}));
  eval->add_flag("--trace", eval_trace, "write rc_records.csv");
  eval->add_option("--out", eval_out, "output directory for traces");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "requested-capacity reports from rc records");
  std::string an_records, an_freq, an_out = ".";
  int an_top_n = 25;
  analyze->add_option("--records", an_records, "rc_records.csv")->required();
  analyze->add_option("--freq", an_freq, "token frequency table csv")->required();
  analyze->add_option("--out", an_out, "output directory");
  analyze->add_option("--top-n", an_top_n, "tokens per high/low selection");

  // flops
  auto* flops = app.add_subcommand("flops", "analytical FLOPs-per-token table");
  std::string fl_arch = "base", fl_variants = "dense,vanilla,switch";
  bool fl_csv = false;
  flops->add_option("--arch", fl_arch, "base|big")->check(CLI::IsMember({"base", "big"}));
  flops->add_option("--variants", fl_variants, "comma-separated variant list");
  flops->add_flag("--csv", fl_csv, "emit csv instead of a table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // fold CLI11's assorted usage-error codes into a single exit status
    const int r = app.exit(e);
    return r == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gcfg, gen_sizes, gen_out);
    if (train->parsed()) {
      if (!train_config.empty()) tcfg = load_config(train_config);
      if (!train_variant.empty()) tcfg.model.set_variant(train_variant);
      if (opt_experts >= 0) tcfg.model.n_experts = opt_experts;
      if (!train_data.empty()) tcfg.data_dir = train_data;
      if (!train_out.empty()) tcfg.out_dir = train_out;
      if (opt_steps >= 0) tcfg.steps = opt_steps;
      if (opt_warmup >= 0) tcfg.warmup = opt_warmup;
      if (opt_lr >= 0) tcfg.peak_lr = opt_lr;
      if (opt_alpha >= 0) tcfg.model.alpha = opt_alpha;
      if (opt_batch_tokens >= 0) tcfg.batch_tokens = opt_batch_tokens;
      if (opt_seed >= 0) tcfg.model.seed = static_cast<std::uint64_t>(opt_seed);
      return cmd_train(tcfg, resume);
    }
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_trace, eval_out);
    if (analyze->parsed()) return cmd_analyze(an_records, an_freq, an_out, an_top_n);
    if (flops->parsed()) return cmd_flops(fl_arch, fl_variants, fl_csv);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
