// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Usage: m2occ_acceptance <path-to-m2occ_tests> [work-dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m2occ/cli.hpp"
#include "m2occ/eval.hpp"
#include "m2occ/train.hpp"

using namespace m2occ;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::size_t kTrainScenes = 500;
constexpr std::size_t kValScenes = 100;
constexpr std::uint64_t kDataSeed = 0;
constexpr std::uint64_t kDropoutSeed = 3;
constexpr std::size_t kEpochs = 10;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

// Random view masking used by every config that has MMR on.
constexpr double kMmrPMask = 0.15;
constexpr std::size_t kMmrMaxMasked = 1;

int failures = 0;

void verdict(int id, bool pass, const std::string& what, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << " " << what << ": " << detail << std::endl;
  if (!pass) ++failures;
}

void info(const std::string& line) { std::cout << "INFO " << line << std::endl; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Runs the selected unit test cases; `expected` guards against a filter
// silently matching fewer cases than intended.
bool run_unit(const std::string& unit_bin, const std::string& filters, int expected, const fs::path& log) {
  const std::string cmd = quote(unit_bin) + " --test-case=" + quote(filters) + " --no-colors > " +
                          quote(log.string()) + " 2>&1";
  if (std::system(cmd.c_str()) != 0) return false;
  const std::string text = slurp(log);
  const auto pos = text.find("test cases:");
  return pos != std::string::npos && std::atoi(text.c_str() + pos + 11) == expected;
}

PipelineConfig config_for(bool mmr, FmmMode fmm, double p_mask, std::size_t max_masked, std::uint64_t seed) {
  PipelineConfig c = PipelineConfig::desk();
  c.mmr = mmr;
  c.fmm = fmm;
  c.rvm.p_mask = p_mask;
  c.rvm.max_masked = max_masked;
  c.optim.epochs = kEpochs;
  c.seed = seed;
  c.validate();
  return c;
}

OccupancyModel train(const PipelineConfig& cfg, const SceneDataset& data) {
  Trainer t(cfg, data);
  t.run(std::nullopt, [](const StepRecord&) { return true; });
  return t.model();
}

struct Scores {
  std::map<std::string, double> iou;  // standard, dropout-k, masked
  std::vector<ProtocolReport> rows;
};

Scores evaluate(const OccupancyModel& model, const SceneDataset& val) {
  SuiteOptions opts;
  opts.dropout_k = {1, 3, 5};
  opts.dropout_seed = kDropoutSeed;
  Scores s;
  s.rows = run_protocol(model, val, "all", opts);
  std::vector<ProtocolReport> sv;
  for (const auto& r : s.rows) {
    s.iou[r.setting] = r.iou;
    if (r.setting != "standard" && r.setting.rfind("dropout-", 0) != 0) sv.push_back(r);
  }
  const auto masked = masked_suite_mean(sv);
  s.iou["masked"] = masked.iou;
  s.rows.push_back(masked);
  return s;
}

double mean_of(const std::vector<Scores>& runs, const std::string& key) {
  double sum = 0.0;
  for (const auto& r : runs) sum += r.iou.at(key);
  return sum / static_cast<double>(runs.size());
}

std::string summary(const std::string& name, const std::vector<Scores>& runs) {
  std::ostringstream os;
  os << name << " mean IoU over " << runs.size() << " seeds:";
  for (const char* k : {"standard", "dropout-1", "dropout-3", "dropout-5", "masked"})
    os << " " << k << "=" << fmt("%.2f", mean_of(runs, k));
  return os.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "m2occ");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: m2occ_acceptance <m2occ_tests> [work-dir]\n";
    return 2;
  }
  const std::string unit_bin = argv[1];
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "m2occ_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  // 1. finite-difference checks of every op, module, and the full loss
  {
    const auto t0 = Clock::now();
    const bool ok = run_unit(unit_bin,
                             "gradient checks: every differentiable op*,decoder gradients*,refine gradients*,"
                             "gate head,encoder? refiner and head gradients*,end-to-end loss gradient*",
                             6, work / "c1.log");
    const double secs = seconds_since(t0);
    verdict(1, ok && secs < 120.0, "gradient integrity",
            std::string(ok ? "all checks within tolerance" : "check failed, see c1.log") + ", " +
                fmt("%.1f s (limit 120 s)", secs));
  }

  // 2. equation oracles
  {
    const bool ok = run_unit(unit_bin,
                             "aggregate_reference*,mmr_loss*,50 EMA steps*,similarity examples*,"
                             "retrieval weights,refine: zero bank*",
                             10, work / "c2.log");
    verdict(2, ok, "reconstruction and memory oracles", ok ? "all oracles match" : "mismatch, see c2.log");
  }

  // 3. metric oracles
  {
    const bool ok = run_unit(unit_bin, "metrics match set oracles*,accumulator additivity*", 2, work / "c3.log");
    verdict(3, ok, "metric oracles", ok ? "exact agreement on 50 random pairs" : "mismatch, see c3.log");
  }

  const SceneConfig scene = SceneConfig::desk();
  const SceneDataset train_set(Split::train, kTrainScenes, kDataSeed, scene);
  const SceneDataset val_set(Split::val, kValScenes, kDataSeed, scene);

  std::vector<Scores> base, base_rvm, mmr, sp, mp;
  std::vector<ProtocolReport> report;
  double base_secs = 0.0;
  std::optional<OccupancyModel> mmr_model;  // first seed, for criteria 7 and 8
  for (std::uint64_t seed : kSeeds) {
    auto t0 = Clock::now();
    const auto b = train(config_for(false, FmmMode::off, 0.0, 1, seed), train_set);
    base.push_back(evaluate(b, val_set));
    base_secs += seconds_since(t0);

    base_rvm.push_back(
        evaluate(train(config_for(false, FmmMode::off, kMmrPMask, kMmrMaxMasked, seed), train_set), val_set));
    auto m = train(config_for(true, FmmMode::off, kMmrPMask, kMmrMaxMasked, seed), train_set);
    mmr.push_back(evaluate(m, val_set));
    if (!mmr_model) mmr_model.emplace(m);
    sp.push_back(
        evaluate(train(config_for(true, FmmMode::single, kMmrPMask, kMmrMaxMasked, seed), train_set), val_set));
    mp.push_back(
        evaluate(train(config_for(true, FmmMode::multi, kMmrPMask, kMmrMaxMasked, seed), train_set), val_set));
    for (auto* runs : {&base, &base_rvm, &mmr, &sp, &mp})
      report.insert(report.end(), runs->back().rows.begin(), runs->back().rows.end());
    info("seed " + std::to_string(seed) + " done");
  }
  std::ofstream(work / "report.csv") << render_report(report, ReportFormat::csv);
  info(summary("baseline", base));
  info(summary("baseline+RVM", base_rvm));
  info(summary("+MMR", mmr));
  info(summary("+MMR+SP", sp));
  info(summary("+MMR+MP", mp));

  // 4. degradation with missing views, baseline
  {
    const double k0 = mean_of(base, "standard"), k1 = mean_of(base, "dropout-1"), k3 = mean_of(base, "dropout-3"),
                 k5 = mean_of(base, "dropout-5");
    const bool ok = k0 - k1 > 1.0 && k1 - k3 > 1.0 && k3 - k5 > 1.0 && base_secs < 1800.0;
    std::ostringstream d;
    d << "IoU k=0/1/3/5 " << fmt("%.2f", k0) << " / " << fmt("%.2f", k1) << " / " << fmt("%.2f", k3) << " / "
      << fmt("%.2f", k5) << " (gaps > 1), " << fmt("%.0f s", base_secs) << " (limit 1800 s)";
    verdict(4, ok, "degradation trend", d.str());
  }

  // 5. recovery with MMR against the baseline
  {
    auto gaps = [&](const std::vector<Scores>& ref) {
      std::ostringstream d;
      bool ok = true;
      for (const char* k : {"dropout-1", "dropout-3", "dropout-5"}) {
        const double g = mean_of(mmr, k) - mean_of(ref, k);
        ok &= g >= 2.0;
        d << k << " " << fmt("%+.2f", g) << ", ";
      }
      const double g0 = mean_of(mmr, "standard") - mean_of(ref, "standard");
      ok &= g0 > -1.0;
      d << "standard " << fmt("%+.2f", g0) << " (need >= +2 each, standard > -1)";
      return std::make_pair(ok, d.str());
    };
    const auto [ok, detail] = gaps(base);
    verdict(5, ok, "recovery trend vs baseline", detail);
    info("vs baseline trained with the same view masking: " + gaps(base_rvm).second);
  }

  // 6. memory module on the masked suite
  {
    const double s = mean_of(sp, "masked"), m = mean_of(mmr, "masked"), p = mean_of(mp, "masked");
    std::ostringstream d;
    d << "masked-suite IoU +MMR+SP " << fmt("%.2f", s) << " vs +MMR " << fmt("%.2f", m) << " (regression limit 0.3)"
      << "; row pair +MMR+SP " << fmt("%.2f", s) << " / +MMR+MP " << fmt("%.2f", p);
    verdict(6, s >= m - 0.3, "memory module contribution", d.str());
  }

  // 7. reconstruction quality
  {
    const auto r = measure_reconstruction(*mmr_model, val_set);
    const double vs_token = r.decoder_mse / r.mask_token_mse, vs_zero = r.decoder_mse / r.zero_mse;
    std::ostringstream d;
    d << "decoder MSE " << fmt("%.4g", r.decoder_mse) << ", ratio to mask-token tiling " << fmt("%.3f", vs_token)
      << ", to zero features " << fmt("%.3f", vs_zero) << " over " << r.views << " views (limit 0.7)";
    verdict(7, vs_token < 0.7 && vs_zero < 0.7, "reconstruction quality", d.str());
  }

  // 8. latency against missing views
  {
    const auto rows = run_bench(*mmr_model, val_set, 5, 5, kDropoutSeed);
    bool mono = true;
    std::ostringstream d;
    d << "median ms";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      d << (i ? " / " : " ") << fmt("%.3f", rows[i].latency.median_ms);
      if (i && rows[i].latency.median_ms < rows[i - 1].latency.median_ms) mono = false;
    }
    d << " for 0..5 missing; decoder calls at 0 missing " << fmt("%.0f", rows.front().decoder_calls_per_sample);
    verdict(8, mono && rows.front().decoder_calls_per_sample == 0.0, "overhead trend", d.str());
  }

  // 9. determinism of train and eval through the CLI
  {
    const fs::path root = work / "determinism";
    bool ok = cli({"gen-scene", "--n", "60", "--out", (root / "train").string(), "--seed", "5"}) == 0 &&
              cli({"gen-scene", "--n", "20", "--split", "val", "--out", (root / "val").string(), "--seed", "5"}) == 0;
    for (const char* run : {"a", "b"}) {
      const fs::path dir = root / run;
      ok = ok &&
           cli({"train", "--data", (root / "train").string(), "--out", dir.string(), "--seed", "5", "--epochs", "2",
                "--steps", "100", "--mmr", "on", "--fmm", "single", "--quiet"}) == 0 &&
           cli({"eval", "--ckpt", (dir / "ckpt_final.m2ck").string(), "--data", (root / "val").string(), "--suite",
                "all", "--seed", "5", "--out", (dir / "eval").string()}) == 0;
    }
    std::size_t steps = 0;
    if (ok) {
      const std::string log = slurp(root / "a" / "train_log.jsonl");
      steps = static_cast<std::size_t>(std::count(log.begin(), log.end(), '\n'));
      for (const char* f : {"train_log.jsonl", "ckpt_final.m2ck", "eval/report.json", "eval/report.csv",
                            "eval/plot_data.tsv"})
        ok = ok && slurp(root / "a" / f) == slurp(root / "b" / f);
    }
    verdict(9, ok && steps == 100, "determinism",
            ok ? std::to_string(steps) + "-step logs, checkpoints, and reports bitwise identical"
               : "reruns differ or a command failed");
  }

  std::cout << (failures ? "ACCEPTANCE FAILED: " + std::to_string(failures) + " criteria" : "ACCEPTANCE PASSED")
            << std::endl;
  return failures ? 1 : 0;
}
