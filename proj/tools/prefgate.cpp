// prefgate: preference-data curation and DPO training pipeline driver.
//
// Subcommands mirror the pipeline stages:
//   gen       synthesize SFT corpus + preference pairs (optional label noise)
//   sft       train the reference model on the SFT corpus
//   score     annotate pairs with reference log-prob gaps
//   sample    keep pairs with gap >= delta
//   analyze   clarity-vs-threshold curve (CSV + SVG)
//   dpo       train a policy against the frozen reference
//   eval      implicit-reward accuracy on held-out pairs
//   gradcheck finite-difference audit of the hand-written gradients
//
// Configuration: defaults < --config file < PREFGATE_SEED (seed only)
// < command-line flags. Every run echoes its fully resolved config to
// <out-dir>/<subcommand>.resolved.cfg before doing any work; that file is
// itself a valid --config input, so any stage can be replayed from it.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/numeric error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prefgate/corpus.hpp"
#include "prefgate/eval.hpp"
#include "prefgate/lm.hpp"
#include "prefgate/sampler.hpp"
#include "prefgate/train.hpp"

namespace fs = std::filesystem;
using namespace prefgate;

namespace {

struct RunConfig {
  // [run]
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  double heldout_fraction = 0.1;
  // paths; empty means the per-subcommand default under out_dir
  std::string in_path, out_path, model_path, ref_path, policy_path;
  std::string corpus_path, csv_path, svg_path;
  std::string deltas = "0,0.5,1,2";

  ArchConfig arch;    // [arch]
  SynthConfig synth;  // [synth] (seed is derived, not a config key)
  TrainConfig train;  // [train] (ditto)

  // [noise] label noise for gen; flip_prob 0 disables
  double noise_cutoff = 2.0;
  double noise_flip_prob = 0.0;
};

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw usage_error(what + ": not an unsigned integer: \"" + s + "\"");
  }
}

double parse_f64(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw usage_error(what + ": not a number: \"" + s + "\"");
  }
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Sectioned key = value text. '#' starts a comment; unknown sections or
// keys are rejected so typos do not silently fall back to defaults.
void load_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config file " + path);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto bad = [&](const std::string& what) {
      return usage_error(path + ":" + std::to_string(line_no) + ": " + what);
    };
    if (line.front() == '[') {
      if (line.back() != ']') throw bad("unterminated section header");
      section = line.substr(1, line.size() - 2);
      if (section != "run" && section != "arch" && section != "synth" &&
          section != "train" && section != "noise")
        throw bad("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    const std::string ctx = "[" + section + "] " + key;
    if (section == "run") {
      if (key == "out_dir") cfg.out_dir = val;
      else if (key == "seed") cfg.seed = parse_u64(val, ctx);
      else if (key == "heldout_fraction") cfg.heldout_fraction = parse_f64(val, ctx);
      else if (key == "in") cfg.in_path = val;
      else if (key == "out") cfg.out_path = val;
      else if (key == "model") cfg.model_path = val;
      else if (key == "ref") cfg.ref_path = val;
      else if (key == "policy") cfg.policy_path = val;
      else if (key == "corpus") cfg.corpus_path = val;
      else if (key == "csv") cfg.csv_path = val;
      else if (key == "svg") cfg.svg_path = val;
      else if (key == "deltas") cfg.deltas = val;
      else if (key == "command" || key == "stage_seed") { /* echo metadata */ }
      else throw bad("unknown key " + ctx);
    } else if (section == "arch") {
      if (key == "d_model") cfg.arch.d_model = parse_u64(val, ctx);
      else if (key == "n_heads") cfg.arch.n_heads = parse_u64(val, ctx);
      else if (key == "ffn_hidden") cfg.arch.ffn_hidden = parse_u64(val, ctx);
      else if (key == "n_layers") cfg.arch.n_layers = parse_u64(val, ctx);
      else if (key == "max_len") cfg.arch.max_len = parse_u64(val, ctx);
      else throw bad("unknown key " + ctx);
    } else if (section == "synth") {
      if (key == "n_pairs") cfg.synth.n_pairs = parse_u64(val, ctx);
      else if (key == "n_sft_sequences") cfg.synth.n_sft_sequences = parse_u64(val, ctx);
      else if (key == "response_len_min") cfg.synth.response_len_min = parse_u64(val, ctx);
      else if (key == "response_len_max") cfg.synth.response_len_max = parse_u64(val, ctx);
      else throw bad("unknown key " + ctx);
    } else if (section == "train") {
      if (key == "beta") cfg.train.beta = parse_f64(val, ctx);
      else if (key == "learning_rate") cfg.train.learning_rate = parse_f64(val, ctx);
      else if (key == "epochs") cfg.train.epochs = parse_u64(val, ctx);
      else if (key == "batch_size") cfg.train.batch_size = parse_u64(val, ctx);
      else if (key == "grad_clip_norm") cfg.train.grad_clip_norm = parse_f64(val, ctx);
      else if (key == "delta") cfg.train.delta = parse_f64(val, ctx);
      else throw bad("unknown key " + ctx);
    } else if (section == "noise") {
      if (key == "cutoff") cfg.noise_cutoff = parse_f64(val, ctx);
      else if (key == "flip_prob") cfg.noise_flip_prob = parse_f64(val, ctx);
      else throw bad("unknown key " + ctx);
    } else {
      throw bad("key outside any section");
    }
  }
}

std::vector<double> parse_deltas(const std::string& spec) {
  std::vector<double> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_f64(item, "--deltas"));
  }
  if (out.empty()) throw usage_error("--deltas: no thresholds given");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.front() < 0.0) throw usage_error("--deltas: thresholds must be >= 0");
  return out;
}

std::string default_under(const std::string& given, const RunConfig& cfg,
                          const char* name) {
  if (!given.empty()) return given;
  return (fs::path(cfg.out_dir) / name).string();
}

// The echo is a complete, reloadable config: replaying a stage is
// `prefgate <command> --config <echo file>`.
void echo_config(const RunConfig& cfg, const std::string& command,
                 std::uint64_t stage_seed) {
  fs::create_directories(cfg.out_dir);
  const fs::path path = fs::path(cfg.out_dir) / (command + ".resolved.cfg");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  char num[64];
  auto f = [&](double v) {
    std::snprintf(num, sizeof num, "%.17g", v);
    return std::string(num);
  };
  out << "[run]\n"
      << "command = " << command << "\n"
      << "seed = " << cfg.seed << "\n"
      << "stage_seed = " << stage_seed << "\n"
      << "out_dir = " << cfg.out_dir << "\n"
      << "heldout_fraction = " << f(cfg.heldout_fraction) << "\n"
      << "in = " << cfg.in_path << "\n"
      << "out = " << cfg.out_path << "\n"
      << "model = " << cfg.model_path << "\n"
      << "ref = " << cfg.ref_path << "\n"
      << "policy = " << cfg.policy_path << "\n"
      << "corpus = " << cfg.corpus_path << "\n"
      << "csv = " << cfg.csv_path << "\n"
      << "svg = " << cfg.svg_path << "\n"
      << "deltas = " << cfg.deltas << "\n\n"
      << "[arch]\n"
      << "d_model = " << cfg.arch.d_model << "\n"
      << "n_heads = " << cfg.arch.n_heads << "\n"
      << "ffn_hidden = " << cfg.arch.ffn_hidden << "\n"
      << "n_layers = " << cfg.arch.n_layers << "\n"
      << "max_len = " << cfg.arch.max_len << "\n\n"
      << "[synth]\n"
      << "n_pairs = " << cfg.synth.n_pairs << "\n"
      << "n_sft_sequences = " << cfg.synth.n_sft_sequences << "\n"
      << "response_len_min = " << cfg.synth.response_len_min << "\n"
      << "response_len_max = " << cfg.synth.response_len_max << "\n\n"
      << "[train]\n"
      << "beta = " << f(cfg.train.beta) << "\n"
      << "learning_rate = " << f(cfg.train.learning_rate) << "\n"
      << "epochs = " << cfg.train.epochs << "\n"
      << "batch_size = " << cfg.train.batch_size << "\n"
      << "grad_clip_norm = " << f(cfg.train.grad_clip_norm) << "\n"
      << "delta = " << f(cfg.train.delta) << "\n\n"
      << "[noise]\n"
      << "cutoff = " << f(cfg.noise_cutoff) << "\n"
      << "flip_prob = " << f(cfg.noise_flip_prob) << "\n";
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path.string());
}

// ---------------------------------------------------------------------------
// Stage implementations
// ---------------------------------------------------------------------------

void run_gen(RunConfig& cfg) {
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "gen");
  if (!(cfg.heldout_fraction >= 0.0 && cfg.heldout_fraction < 1.0))
    throw usage_error("heldout_fraction must be in [0, 1)");
  echo_config(cfg, "gen", stage_seed);
  cfg.synth.seed = stage_seed;
  SynthData data = gen_synthetic(cfg.synth);

  // Held-out split is carved off before noise injection: evaluation labels
  // stay clean even when the training labels are deliberately corrupted.
  const std::size_t n = data.dataset.pairs.size();
  const std::size_t n_held = static_cast<std::size_t>(
      static_cast<double>(n) * cfg.heldout_fraction);
  Dataset train_ds, held_ds;
  train_ds.pairs.assign(data.dataset.pairs.begin(),
                        data.dataset.pairs.end() - n_held);
  held_ds.pairs.assign(data.dataset.pairs.end() - n_held,
                       data.dataset.pairs.end());
  if (cfg.noise_flip_prob > 0.0)
    train_ds = inject_label_noise(train_ds, cfg.noise_cutoff,
                                  cfg.noise_flip_prob,
                                  derive_seed(cfg.seed, "noise"));

  const fs::path dir(cfg.out_dir);
  write_jsonl(train_ds, (dir / "dataset.jsonl").string());
  write_jsonl(held_ds, (dir / "heldout.jsonl").string());
  const fs::path corpus_path = dir / "sft_corpus.txt";
  std::ofstream corpus(corpus_path, std::ios::binary);
  if (!corpus) throw data_error("cannot write " + corpus_path.string());
  for (const auto& line : data.sft_corpus) corpus << line << "\n";
  corpus.flush();
  if (!corpus) throw data_error("I/O error while writing " + corpus_path.string());
  std::cout << "gen: " << train_ds.pairs.size() << " training pairs, "
            << held_ds.pairs.size() << " held-out pairs, "
            << data.sft_corpus.size() << " SFT sequences -> " << cfg.out_dir
            << "\n";
}

void run_sft(RunConfig& cfg) {
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "sft");
  cfg.corpus_path = default_under(cfg.corpus_path, cfg, "sft_corpus.txt");
  cfg.out_path = default_under(cfg.out_path, cfg, "reference.bin");
  echo_config(cfg, "sft", stage_seed);

  std::ifstream in(cfg.corpus_path, std::ios::binary);
  if (!in) throw data_error("cannot open " + cfg.corpus_path);
  std::vector<std::string> corpus;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) corpus.push_back(line);
  if (corpus.empty()) throw data_error(cfg.corpus_path + " is empty");

  TrainConfig tc = cfg.train;
  tc.seed = stage_seed;
  ModelParams model = train_sft(tc, cfg.arch, corpus, nullptr, &std::cout);
  save_params(model, cfg.out_path);
  std::cout << "sft: saved " << cfg.out_path << "\n";
}

void run_score(RunConfig& cfg) {
  cfg.model_path = default_under(cfg.model_path, cfg, "reference.bin");
  cfg.in_path = default_under(cfg.in_path, cfg, "dataset.jsonl");
  cfg.out_path = default_under(cfg.out_path, cfg, "scored.jsonl");
  echo_config(cfg, "score", derive_seed(cfg.seed, "score"));
  ModelParams model = load_params(cfg.model_path, cfg.arch);
  Dataset ds = load_jsonl(cfg.in_path);
  std::vector<ScoredPair> scored = annotate(ds, model);
  write_scored_jsonl(scored, cfg.out_path);
  std::cout << "score: " << scored.size() << " pairs -> " << cfg.out_path
            << "\n";
}

void run_sample(RunConfig& cfg) {
  cfg.in_path = default_under(cfg.in_path, cfg, "scored.jsonl");
  cfg.out_path = default_under(cfg.out_path, cfg, "sampled.jsonl");
  echo_config(cfg, "sample", derive_seed(cfg.seed, "sample"));
  std::vector<ScoredPair> scored = load_scored_jsonl(cfg.in_path);
  std::vector<ScoredPair> kept = filter(scored, cfg.train.delta);
  write_scored_jsonl(kept, cfg.out_path);
  std::cout << "sample: delta " << cfg.train.delta << " retained "
            << kept.size() << " / " << scored.size() << " -> " << cfg.out_path
            << "\n";
}

void run_analyze(RunConfig& cfg) {
  cfg.in_path = default_under(cfg.in_path, cfg, "scored.jsonl");
  cfg.csv_path = default_under(cfg.csv_path, cfg, "curve.csv");
  cfg.svg_path = default_under(cfg.svg_path, cfg, "curve.svg");
  echo_config(cfg, "analyze", derive_seed(cfg.seed, "analyze"));
  std::vector<ScoredPair> scored = load_scored_jsonl(cfg.in_path);
  std::vector<ClarityCurveRow> rows =
      clarity_curve(scored, parse_deltas(cfg.deltas));
  write_curve_csv(rows, cfg.csv_path);
  write_curve_svg(rows, cfg.svg_path);
  std::cout << curve_csv(rows);
  std::cout << "analyze: wrote " << cfg.csv_path << " and " << cfg.svg_path
            << "\n";
}

void run_dpo(RunConfig& cfg) {
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "dpo");
  cfg.ref_path = default_under(cfg.ref_path, cfg, "reference.bin");
  cfg.in_path = default_under(cfg.in_path, cfg, "sampled.jsonl");
  cfg.out_path = default_under(cfg.out_path, cfg, "policy.bin");
  echo_config(cfg, "dpo", stage_seed);
  ModelParams reference = load_params(cfg.ref_path, cfg.arch);
  Dataset ds = load_jsonl(cfg.in_path);
  TrainConfig tc = cfg.train;
  tc.seed = stage_seed;
  ModelParams policy = train_dpo(tc, ds, reference, nullptr, &std::cout);
  save_params(policy, cfg.out_path);
  std::cout << "dpo: trained on " << ds.pairs.size() << " pairs, saved "
            << cfg.out_path << "\n";
}

void run_eval(RunConfig& cfg) {
  cfg.policy_path = default_under(cfg.policy_path, cfg, "policy.bin");
  cfg.ref_path = default_under(cfg.ref_path, cfg, "reference.bin");
  cfg.in_path = default_under(cfg.in_path, cfg, "heldout.jsonl");
  cfg.out_path = default_under(cfg.out_path, cfg, "eval.tsv");
  echo_config(cfg, "eval", derive_seed(cfg.seed, "eval"));
  ModelParams policy = load_params(cfg.policy_path, cfg.arch);
  ModelParams reference = load_params(cfg.ref_path, cfg.arch);
  Dataset held = load_jsonl(cfg.in_path);
  EvalReport report = evaluate(policy, reference, held, cfg.train.beta);
  std::ofstream out(cfg.out_path, std::ios::binary);
  if (!out) throw data_error("cannot write " + cfg.out_path);
  out << report_tsv(report);
  out.flush();
  if (!out) throw data_error("I/O error while writing " + cfg.out_path);
  std::cout << report_kv(report);
}

void run_gradcheck(RunConfig& cfg) {
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "gradcheck");
  echo_config(cfg, "gradcheck", stage_seed);
  GradCheckReport report = gradcheck(cfg.arch, stage_seed);
  std::cout << "gradcheck: " << report.ce_entries.size() << " CE + "
            << report.dpo_entries.size() << " DPO coordinates, max rel err "
            << report.max_rel_err << " (tolerance " << report.tolerance
            << ")\n";
  if (!report.pass)
    throw numeric_error("gradient check failed: max relative error " +
                        std::to_string(report.max_rel_err));
  std::cout << "gradcheck: PASS\n";
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  try {
    // --config is applied before the flag pass so flags always win.
    for (int i = 1; i < argc; ++i) {
      const std::string arg = argv[i];
      if (arg == "--config" && i + 1 < argc)
        load_config_file(argv[i + 1], cfg);
      else if (arg.rfind("--config=", 0) == 0)
        load_config_file(arg.substr(9), cfg);
    }
    if (const char* env = std::getenv("PREFGATE_SEED"))
      cfg.seed = parse_u64(env, "PREFGATE_SEED");
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Reference-gap preference sampling and DPO pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // accept global flags after the subcommand too
  std::string config_path;  // consumed above; registered so parsing accepts it
  app.add_option("--config", config_path, "sectioned key = value config file");
  app.add_option("--out-dir", cfg.out_dir, "run directory for artifacts");
  app.add_option("--seed", cfg.seed, "master seed (stage seeds derive from it)");
  app.add_option("--heldout-fraction", cfg.heldout_fraction,
                 "fraction of pairs held out by gen");
  app.add_option("--in", cfg.in_path, "input file");
  app.add_option("--out", cfg.out_path, "output file");
  app.add_option("--model", cfg.model_path, "model checkpoint (score)");
  app.add_option("--ref", cfg.ref_path, "reference checkpoint");
  app.add_option("--policy", cfg.policy_path, "policy checkpoint");
  app.add_option("--corpus", cfg.corpus_path, "SFT corpus file");
  app.add_option("--csv", cfg.csv_path, "curve CSV output");
  app.add_option("--svg", cfg.svg_path, "curve SVG output");
  app.add_option("--deltas", cfg.deltas, "comma-separated threshold grid");
  app.add_option("--d-model", cfg.arch.d_model, "model width");
  app.add_option("--n-heads", cfg.arch.n_heads, "attention heads");
  app.add_option("--ffn-hidden", cfg.arch.ffn_hidden, "FFN hidden width");
  app.add_option("--n-layers", cfg.arch.n_layers, "transformer layers");
  app.add_option("--max-len", cfg.arch.max_len, "maximum sequence length");
  app.add_option("--n-pairs", cfg.synth.n_pairs, "preference pairs to generate");
  app.add_option("--n-sft-sequences", cfg.synth.n_sft_sequences,
                 "SFT sequences to generate");
  app.add_option("--response-len-min", cfg.synth.response_len_min,
                 "minimum response length");
  app.add_option("--response-len-max", cfg.synth.response_len_max,
                 "maximum response length");
  app.add_option("--beta", cfg.train.beta, "DPO beta");
  app.add_option("--learning-rate", cfg.train.learning_rate, "learning rate");
  app.add_option("--epochs", cfg.train.epochs, "training epochs");
  app.add_option("--batch-size", cfg.train.batch_size, "batch size");
  app.add_option("--grad-clip-norm", cfg.train.grad_clip_norm,
                 "global gradient-norm clip");
  app.add_option("--delta", cfg.train.delta, "sampling threshold");
  app.add_option("--noise-cutoff", cfg.noise_cutoff,
                 "clarity cutoff below which gen may flip labels");
  app.add_option("--noise-flip-prob", cfg.noise_flip_prob,
                 "label flip probability under the cutoff (0 disables)");

  app.add_subcommand("gen", "generate synthetic corpus and preference pairs");
  app.add_subcommand("sft", "train the reference model");
  app.add_subcommand("score", "annotate pairs with reference gaps");
  app.add_subcommand("sample", "filter pairs by gap threshold");
  app.add_subcommand("analyze", "clarity curve over a threshold grid");
  app.add_subcommand("dpo", "preference-train a policy");
  app.add_subcommand("eval", "held-out implicit-reward accuracy");
  app.add_subcommand("gradcheck", "finite-difference gradient audit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "gen") run_gen(cfg);
    else if (sub == "sft") run_sft(cfg);
    else if (sub == "score") run_score(cfg);
    else if (sub == "sample") run_sample(cfg);
    else if (sub == "analyze") run_analyze(cfg);
    else if (sub == "dpo") run_dpo(cfg);
    else if (sub == "eval") run_eval(cfg);
    else if (sub == "gradcheck") run_gradcheck(cfg);
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
