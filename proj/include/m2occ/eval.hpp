#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2occ/model.hpp"

namespace m2occ {

// Streaming (K x K) confusion counts, rows ground truth, columns prediction.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t classes = kNumClasses);

  void accumulate(const VoxelGrid& pred, const VoxelGrid& gt);
  void add(std::size_t gt, std::size_t pred, std::uint64_t count = 1);
  void merge(const ConfusionAccumulator& other);

  std::size_t classes() const { return k_; }
  std::uint64_t cell(std::size_t gt, std::size_t pred) const { return counts_.at(gt * k_ + pred); }
  std::uint64_t total() const;

  // TP / (TP + FP + FN); empty when the class never appears in either.
  std::optional<double> class_iou(std::size_t c) const;
  // Mean over defined semantic classes (free excluded).
  double miou() const;
  // Occupied-vs-free IoU; undefined (reported as 0) when nothing is occupied.
  std::optional<double> geometric_iou() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct LatencyStats {
  double median_ms = 0.0;
  double p95_ms = 0.0;
};

struct ProtocolReport {
  std::string setting;
  std::string method;
  double iou = 0.0;   // percent
  double miou = 0.0;  // percent
  bool iou_defined = true;
  std::array<std::optional<double>, kNumClasses> class_iou{};  // percent; index 0 unused
  std::size_t samples = 0;
  std::optional<LatencyStats> latency;
  std::optional<double> peak_memory_mb;
  std::uint64_t decoder_calls = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

struct SuiteOptions {
  std::vector<std::size_t> dropout_k = {1, 3, 5};
  std::uint64_t dropout_seed = 0;
  bool timing = false;
  std::size_t threads = 1;
};

// One evaluation setting over a dataset.
ProtocolReport evaluate_plan(const OccupancyModel& model, const SceneDataset& data, const MaskPlan& plan,
                             const SuiteOptions& opts);

// Suites: standard, single-view, dropout, ablation (one row: the single-view
// mean of this model; one checkpoint per toggle gives the grid), all (standard + single-view + dropout).
std::vector<ProtocolReport> run_protocol(const OccupancyModel& model, const SceneDataset& data,
                                         const std::string& suite, const SuiteOptions& opts);

// Mean over the six single-view settings: the "masked" row of the ablation.
ProtocolReport masked_suite_mean(const std::vector<ProtocolReport>& single_view_rows);

enum class ReportFormat { text, csv, json };
ReportFormat parse_report_format(const std::string& s);
std::string render_report(const std::vector<ProtocolReport>& rows, ReportFormat format);
std::vector<ProtocolReport> parse_report_json(const nlohmann::json& j);
std::vector<ProtocolReport> parse_report_csv(const std::string& csv);
// Tab-separated series (index, setting, method, iou, miou) for plotting.
std::string render_plot_data(const std::vector<ProtocolReport>& rows);

struct BenchRow {
  std::size_t missing = 0;
  LatencyStats latency;
  double peak_memory_mb = 0.0;
  double decoder_calls_per_sample = 0.0;
  std::size_t samples = 0;
};

// Latency and memory for 0..max_missing missing views. The median is taken
// over samples of each sample's fastest repeat; p95 covers every run.
std::vector<BenchRow> run_bench(const OccupancyModel& model, const SceneDataset& data, std::size_t max_missing,
                                std::size_t repeats, std::uint64_t seed);
nlohmann::json bench_json(const std::vector<BenchRow>& rows, const std::string& config_hash, std::uint64_t seed);
std::string bench_csv(const std::vector<BenchRow>& rows);

LatencyStats latency_stats(std::vector<double> samples_ms);

// Held-out masked-view feature error of the trained decoder against two
// references: the mask token tiled over the whole view, and all zeros.
struct ReconstructionStats {
  double decoder_mse = 0.0;
  double mask_token_mse = 0.0;
  double zero_mse = 0.0;
  std::size_t views = 0;
};

// Masks each view alone in turn on every sample.
ReconstructionStats measure_reconstruction(const OccupancyModel& model, const SceneDataset& data);

}  // namespace m2occ
