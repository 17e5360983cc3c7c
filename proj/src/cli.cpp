#include "m2occ/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "m2occ/errors.hpp"
#include "m2occ/eval.hpp"
#include "m2occ/train.hpp"

namespace m2occ {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("M2OCC_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("M2OCC_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path default_run_dir(const std::string& hash) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return fs::path("runs") / (std::string(buf) + "-" + hash);
}

struct ConfigFlags {
  std::string preset;
  std::string config_file;
  std::string mmr;
  std::string fmm;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<double> p_mask;
  std::optional<std::size_t> max_masked;
  std::optional<std::size_t> protos;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app, bool training) {
    app->add_option("--preset", preset, "desk | paper");
    app->add_option("--config", config_file, "TOML config file; flags override it");
    app->add_option("--seed", seed, "run seed (falls back to M2OCC_SEED)");
    if (!training) return;
    app->add_option("--mmr", mmr, "on | off")->check(CLI::IsMember({"on", "off"}));
    app->add_option("--fmm", fmm, "off | single | multi")->check(CLI::IsMember({"off", "single", "multi"}));
    app->add_option("--epochs", epochs);
    app->add_option("--lr", lr);
    app->add_option("--p-mask", p_mask, "random view masking probability");
    app->add_option("--max-masked", max_masked, "largest masked subset during training");
    app->add_option("--protos", protos, "prototypes per class for --fmm multi");
  }

  PipelineConfig build() const {
    json j = config_file.empty() ? json::object() : load_toml_file(config_file);
    if (!preset.empty()) j["preset"] = preset;
    PipelineConfig c = PipelineConfig::from_json(j);
    if (!mmr.empty()) c.mmr = mmr == "on";
    if (!fmm.empty()) c.fmm = parse_fmm_mode(fmm);
    if (epochs) c.optim.epochs = *epochs;
    if (lr) c.optim.lr = *lr;
    if (p_mask) c.rvm.p_mask = *p_mask;
    if (max_masked) c.rvm.max_masked = *max_masked;
    if (protos) c.protos_per_class = *protos;
    const bool seed_in_file = j.contains("seed");
    c.seed = seed || !seed_in_file ? resolve_seed(seed) : c.seed;
    c.validate();
    return c;
  }
};

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw UsageError("--k expects a comma-separated list of integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("--k is empty");
  return out;
}

int cmd_gen_scene(std::size_t n, const ConfigFlags& flags, const std::string& split, const std::string& out_dir,
                  std::ostream& out) {
  if (n == 0) throw UsageError("--n must be at least 1");
  const PipelineConfig cfg = flags.build();
  const Split sp = parse_split(split);
  fs::create_directories(out_dir);
  std::array<std::size_t, kNumClasses> hist{};
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSample s = generate_scene(scene_seed(sp, cfg.seed, i), cfg.scene, i);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%06zu.m2s", i);
    write_scene(fs::path(out_dir) / name, s, cfg.scene);
    const auto h = s.grid.histogram();
    for (std::size_t c = 0; c < kNumClasses; ++c) hist[c] += h[c];
  }
  std::size_t total = 0;
  for (auto c : hist) total += c;
  out << "wrote " << n << " " << split_name(sp) << " scenes to " << out_dir << " (seed " << cfg.seed << ")\n";
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    char line[96];
    std::snprintf(line, sizeof line, "  %-9s %10zu  %6.2f%%\n", std::string(class_name(c)).c_str(), hist[c],
                  100.0 * static_cast<double>(hist[c]) / static_cast<double>(total));
    out << line;
  }
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string out_dir;
  std::string resume;
  std::optional<std::uint64_t> max_steps;
  std::uint64_t checkpoint_every = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, const ConfigFlags& flags, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = flags.build();
  const SceneDataset data = load_scene_dir(a.data);
  const fs::path dir = a.out_dir.empty() ? default_run_dir(cfg.hash()) : fs::path(a.out_dir);
  fs::create_directories(dir);
  Trainer trainer(cfg, data);
  const std::string hash = cfg.hash();

  const fs::path log_path = dir / "train_log.jsonl";
  std::string kept;
  if (!a.resume.empty()) {
    trainer.load_checkpoint(a.resume);
    if (fs::exists(log_path)) {
      std::istringstream prev(read_text(log_path));
      std::string line;
      while (std::getline(prev, line)) {
        if (line.empty()) continue;
        if (json::parse(line).at("step").get<std::uint64_t>() <= trainer.step()) kept += line + "\n";
      }
    }
    out << "resumed from " << a.resume << " at step " << trainer.step() << "\n";
  }
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  write_text(log_path, kept);
  std::ofstream log(log_path, std::ios::app);

  out << "training " << cfg.method_label() << " config " << hash << " seed " << cfg.seed << ": " << data.size()
      << " scenes, " << trainer.total_steps() << " steps\n";
  double epoch_loss = 0.0;
  std::size_t epoch_n = 0;
  try {
    trainer.run(a.max_steps, [&](const StepRecord& r) {
      log << r.to_json(hash, cfg.seed).dump() << '\n';
      epoch_loss += r.loss;
      ++epoch_n;
      if (r.step % trainer.steps_per_epoch() == 0 || (a.max_steps && r.step == *a.max_steps)) {
        if (!a.quiet) {
          char line[128];
          std::snprintf(line, sizeof line, "epoch %llu step %llu mean loss %.6f\n",
                        static_cast<unsigned long long>(r.epoch), static_cast<unsigned long long>(r.step),
                        epoch_loss / static_cast<double>(epoch_n));
          out << line << std::flush;
        }
        epoch_loss = 0.0;
        epoch_n = 0;
      }
      if (a.checkpoint_every && r.step % a.checkpoint_every == 0) {
        trainer.save_checkpoint(dir / ("ckpt_step_" + std::to_string(r.step) + ".m2ck"));
      }
      return true;
    });
  } catch (const TrainingDiverged& e) {
    write_text(dir / "divergence.json", e.diagnostics().dump(2) + "\n");
    err << "error: " << e.what() << "; diagnostics in " << (dir / "divergence.json").string() << "\n";
    return kExitFailure;
  }
  log.close();
  trainer.save_checkpoint(dir / "ckpt_final.m2ck");
  out << "checkpoint " << (dir / "ckpt_final.m2ck").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> ckpts;
  std::string data;
  std::string suite = "standard";
  std::string k = "1,3,5";
  std::optional<std::uint64_t> dropout_seed;
  bool timing = false;
  std::size_t threads = 1;
  std::string out_dir;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const SceneDataset data = load_scene_dir(a.data);
  SuiteOptions opts;
  opts.dropout_k = parse_k_list(a.k);
  opts.dropout_seed = resolve_seed(a.dropout_seed);
  opts.timing = a.timing;
  opts.threads = a.threads;
  if (a.suite != "ablation" && a.ckpts.size() != 1) throw UsageError("--ckpt must be given once for this suite");
  std::vector<ProtocolReport> rows;
  for (const auto& path : a.ckpts) {
    const OccupancyModel model = load_model(path);
    const auto r = run_protocol(model, data, a.suite, opts);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    write_text(fs::path(a.out_dir) / "report.json", render_report(rows, ReportFormat::json));
    write_text(fs::path(a.out_dir) / "report.csv", render_report(rows, ReportFormat::csv));
    write_text(fs::path(a.out_dir) / "plot_data.tsv", render_plot_data(rows));
  }
  out << render_report(rows, ReportFormat::text);
  return kExitOk;
}

int cmd_report(const std::string& in_path, const std::string& format, std::ostream& out) {
  const std::string text = read_text(in_path);
  const auto rows = fs::path(in_path).extension() == ".csv" ? parse_report_csv(text)
                                                            : parse_report_json(json::parse(text));
  out << render_report(rows, parse_report_format(format));
  return kExitOk;
}

struct BenchArgs {
  std::string ckpt;
  std::string data;
  std::size_t repeats = 5;
  std::size_t max_missing = 5;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const SceneDataset data = load_scene_dir(a.data);
  const OccupancyModel model = load_model(a.ckpt);
  const auto rows = run_bench(model, data, a.max_missing, a.repeats, resolve_seed(a.seed));
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    write_text(fs::path(a.out_dir) / "bench.json",
               bench_json(rows, model.config().hash(), model.config().seed).dump(2) + "\n");
    write_text(fs::path(a.out_dir) / "bench.csv", bench_csv(rows));
  }
  out << "missing  median_ms  p95_ms  peak_mb  decoder_calls\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%7zu  %9.3f  %6.3f  %7.3f  %13.2f\n", r.missing, r.latency.median_ms,
                  r.latency.p95_ms, r.peak_memory_mb, r.decoder_calls_per_sample);
    out << line;
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Occupancy prediction robust to missing camera views"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::size_t gen_n = 0;
  std::string gen_split = "train", gen_out;
  auto* gen = app.add_subcommand("gen-scene", "generate synthetic scenes");
  gen->add_option("--n", gen_n, "number of scenes")->required();
  gen->add_option("--split", gen_split, "train | val");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen_flags.attach(gen, false);

  ConfigFlags train_flags;
  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", train_args.data, "training scene directory")->required();
  train->add_option("--out", train_args.out_dir, "run directory (default runs/<time>-<hash>)");
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");
  train->add_option("--steps", train_args.max_steps, "stop after this many total steps");
  train->add_option("--checkpoint-every", train_args.checkpoint_every, "also checkpoint every N steps");
  train->add_flag("--quiet", train_args.quiet);
  train_flags.attach(train, true);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints under a missing-view suite");
  eval->add_option("--ckpt", eval_args.ckpts, "checkpoint (repeat for the ablation suite)")->required();
  eval->add_option("--data", eval_args.data, "evaluation scene directory")->required();
  eval->add_option("--suite", eval_args.suite, "standard | single-view | dropout | ablation | all");
  eval->add_option("--k", eval_args.k, "dropout sizes, comma separated");
  eval->add_option("--seed", eval_args.dropout_seed, "dropout plan seed (falls back to M2OCC_SEED)");
  eval->add_flag("--timing", eval_args.timing, "record latency and peak memory");
  eval->add_option("--threads", eval_args.threads, "worker threads");
  eval->add_option("--out", eval_args.out_dir, "write report.json, report.csv, plot_data.tsv here");

  std::string report_in, report_format = "text";
  auto* report = app.add_subcommand("report", "render a stored report");
  report->add_option("--in", report_in, "report.json or report.csv")->required();
  report->add_option("--format", report_format, "text | csv | json");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "latency and memory against missing-view count");
  bench->add_option("--ckpt", bench_args.ckpt)->required();
  bench->add_option("--data", bench_args.data)->required();
  bench->add_option("--repeats", bench_args.repeats);
  bench->add_option("--max-missing", bench_args.max_missing);
  bench->add_option("--seed", bench_args.seed);
  bench->add_option("--out", bench_args.out_dir);

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n" << app.help();
      return kExitUsage;
    }
    if (gen->parsed()) return cmd_gen_scene(gen_n, gen_flags, gen_split, gen_out, out);
    if (train->parsed()) return cmd_train(train_args, train_flags, out, err);
    if (eval->parsed()) return cmd_eval(eval_args, out);
    if (report->parsed()) return cmd_report(report_in, report_format, out);
    if (bench->parsed()) return cmd_bench(bench_args, out);
  } catch (const std::invalid_argument& e) {  // usage, parameter, dimension errors
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace m2occ
