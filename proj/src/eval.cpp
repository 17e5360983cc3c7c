#include "m2occ/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <thread>

#include "m2occ/errors.hpp"

namespace m2occ {

using nlohmann::json;

namespace {

// shortest text that parses back to the same double
std::string fmt_num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct SampleResult {
  ConfusionAccumulator acc;
  std::vector<double> latency_ms;
  double peak_mb = 0.0;
};

// Evaluates data[begin, end) under `plan`.
SampleResult eval_range(const OccupancyModel& model, const SceneDataset& data, const MaskPlan& plan,
                        std::size_t begin, std::size_t end, bool timing) {
  SampleResult out;
  const auto& ring = model.config().scene.ring;
  for (std::size_t i = begin; i < end; ++i) {
    const SceneSample& s = data[i];
    const auto masked = resolve_mask(plan, ring, s.sample_id);
    reset_peak_memory();
    const auto t0 = std::chrono::steady_clock::now();
    const VoxelGrid pred = model.infer(s.images, masked);
    const auto t1 = std::chrono::steady_clock::now();
    if (timing) out.latency_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    out.peak_mb = std::max(out.peak_mb, static_cast<double>(memory_stats().peak_bytes) / (1024.0 * 1024.0));
    out.acc.accumulate(pred, s.grid);
  }
  return out;
}

const char* kCsvHeader =
    "setting,method,iou,miou,drivable,vehicle,building,pole,terrain,samples,decoder_calls,config_hash,seed,"
    "latency_median_ms,latency_p95_ms,peak_memory_mb";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

ConfusionAccumulator::ConfusionAccumulator(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes < 2) throw ParameterError("confusion matrix needs at least two classes");
}

void ConfusionAccumulator::add(std::size_t gt, std::size_t pred, std::uint64_t count) {
  if (gt >= k_ || pred >= k_) throw ParameterError("confusion: label out of range");
  counts_[gt * k_ + pred] += count;
}

void ConfusionAccumulator::accumulate(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (!(pred.spec == gt.spec) || pred.labels.size() != gt.labels.size()) {
    throw DimensionError("confusion: prediction and ground truth grids differ");
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) add(gt.labels[i], pred.labels[i]);
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.k_ != k_) throw DimensionError("confusion: merging different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionAccumulator::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::optional<double> ConfusionAccumulator::class_iou(std::size_t c) const {
  if (c >= k_) throw ParameterError("class_iou: class out of range");
  std::uint64_t tp = cell(c, c), fp = 0, fn = 0;
  for (std::size_t o = 0; o < k_; ++o) {
    if (o == c) continue;
    fp += cell(o, c);
    fn += cell(c, o);
  }
  const std::uint64_t denom = tp + fp + fn;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(denom);
}

double ConfusionAccumulator::miou() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 1; c < k_; ++c) {
    if (auto v = class_iou(c)) {
      sum += *v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::optional<double> ConfusionAccumulator::geometric_iou() const {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t g = 0; g < k_; ++g) {
    for (std::size_t p = 0; p < k_; ++p) {
      const bool go = g != 0, po = p != 0;
      if (go && po) tp += cell(g, p);
      else if (!go && po) fp += cell(g, p);
      else if (go && !po) fn += cell(g, p);
    }
  }
  if (tp + fp + fn == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
}

LatencyStats latency_stats(std::vector<double> samples_ms) {
  if (samples_ms.empty()) return {};
  std::sort(samples_ms.begin(), samples_ms.end());
  const std::size_t n = samples_ms.size();
  const double median = n % 2 ? samples_ms[n / 2] : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  return {median, samples_ms[std::max<std::size_t>(rank, 1) - 1]};
}

ProtocolReport evaluate_plan(const OccupancyModel& model, const SceneDataset& data, const MaskPlan& plan,
                             const SuiteOptions& opts) {
  const std::size_t n = data.size();
  if (n == 0) throw ParameterError("evaluation dataset is empty");
  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, n));
  const std::uint64_t calls_before = model.decoder().invocations();
  std::vector<SampleResult> shards(threads);
  if (threads == 1) {
    shards[0] = eval_range(model, data, plan, 0, n, opts.timing);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          shards[t] = eval_range(model, data, plan, t * n / threads, (t + 1) * n / threads, opts.timing);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  ConfusionAccumulator acc;
  std::vector<double> lat;
  double peak = 0.0;
  for (const auto& s : shards) {
    acc.merge(s.acc);
    lat.insert(lat.end(), s.latency_ms.begin(), s.latency_ms.end());
    peak = std::max(peak, s.peak_mb);
  }

  ProtocolReport r;
  r.setting = plan.label;
  r.method = model.config().method_label();
  const auto g = acc.geometric_iou();
  r.iou_defined = g.has_value();
  r.iou = 100.0 * g.value_or(0.0);
  r.miou = 100.0 * acc.miou();
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    if (auto v = acc.class_iou(c)) r.class_iou[c] = 100.0 * *v;
  }
  r.samples = n;
  r.decoder_calls = model.decoder().invocations() - calls_before;
  r.config_hash = model.config().hash();
  r.seed = model.config().seed;
  if (opts.timing) {
    r.latency = latency_stats(lat);
    r.peak_memory_mb = peak;
  }
  return r;
}

std::vector<ProtocolReport> run_protocol(const OccupancyModel& model, const SceneDataset& data,
                                         const std::string& suite, const SuiteOptions& opts) {
  const auto& ring = model.config().scene.ring;
  std::vector<ProtocolReport> rows;
  const bool all = suite == "all";
  if (suite == "standard" || all) rows.push_back(evaluate_plan(model, data, MaskPlan::none(), opts));
  if (suite == "single-view" || all) {
    for (const auto& plan : single_view_plans(ring)) rows.push_back(evaluate_plan(model, data, plan, opts));
  }
  if (suite == "dropout" || all) {
    for (std::size_t k : opts.dropout_k) {
      rows.push_back(evaluate_plan(model, data, MaskPlan::dropout(k, opts.dropout_seed), opts));
    }
  }
  if (suite == "ablation") {
    std::vector<ProtocolReport> sv;
    for (const auto& plan : single_view_plans(ring)) sv.push_back(evaluate_plan(model, data, plan, opts));
    rows.push_back(masked_suite_mean(sv));
  }
  if (rows.empty()) {
    throw ParameterError("unknown suite '" + suite + "' (expected standard|single-view|dropout|ablation|all)");
  }
  return rows;
}

ProtocolReport masked_suite_mean(const std::vector<ProtocolReport>& rows) {
  if (rows.empty()) throw ParameterError("masked_suite_mean: no rows");
  ProtocolReport out = rows.front();
  out.setting = "masked";
  out.iou = out.miou = 0.0;
  out.samples = 0;
  out.decoder_calls = 0;
  out.latency.reset();
  out.peak_memory_mb.reset();
  std::array<double, kNumClasses> sums{};
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& r : rows) {
    out.iou += r.iou;
    out.miou += r.miou;
    out.samples += r.samples;
    out.decoder_calls += r.decoder_calls;
    out.iou_defined = out.iou_defined && r.iou_defined;
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      if (r.class_iou[c]) {
        sums[c] += *r.class_iou[c];
        ++counts[c];
      }
    }
  }
  const double n = static_cast<double>(rows.size());
  out.iou /= n;
  out.miou /= n;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    out.class_iou[c] = counts[c] ? std::optional<double>(sums[c] / static_cast<double>(counts[c])) : std::nullopt;
  }
  return out;
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "text") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ParameterError("unknown report format '" + s + "' (expected text|csv|json)");
}

std::string render_report(const std::vector<ProtocolReport>& rows, ReportFormat format) {
  std::ostringstream os;
  switch (format) {
    case ReportFormat::text: {
      char line[256];
      std::snprintf(line, sizeof line, "%-14s %-10s %7s %7s", "setting", "method", "IoU", "mIoU");
      os << line;
      for (std::size_t c = 1; c < kNumClasses; ++c) {
        std::snprintf(line, sizeof line, " %9s", std::string(class_name(c)).c_str());
        os << line;
      }
      os << '\n';
      for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-14s %-10s %7s %7.2f", r.setting.c_str(), r.method.c_str(),
                      r.iou_defined ? fmt_fixed(r.iou, 2).c_str() : "n/a", r.miou);
        os << line;
        for (std::size_t c = 1; c < kNumClasses; ++c) {
          std::snprintf(line, sizeof line, " %9s", r.class_iou[c] ? fmt_fixed(*r.class_iou[c], 2).c_str() : "-");
          os << line;
        }
        if (r.latency) {
          std::snprintf(line, sizeof line, "  %.3f ms (p95 %.3f)", r.latency->median_ms, r.latency->p95_ms);
          os << line;
        }
        os << '\n';
      }
      break;
    }
    case ReportFormat::csv: {
      os << kCsvHeader << '\n';
      for (const auto& r : rows) {
        os << csv_field(r.setting) << ',' << csv_field(r.method) << ',' << (r.iou_defined ? fmt_num(r.iou) : "") << ','
           << fmt_num(r.miou);
        for (std::size_t c = 1; c < kNumClasses; ++c) os << ',' << (r.class_iou[c] ? fmt_num(*r.class_iou[c]) : "");
        os << ',' << r.samples << ',' << r.decoder_calls << ',' << r.config_hash << ',' << r.seed << ','
           << (r.latency ? fmt_num(r.latency->median_ms) : "") << ','
           << (r.latency ? fmt_num(r.latency->p95_ms) : "") << ','
           << (r.peak_memory_mb ? fmt_num(*r.peak_memory_mb) : "") << '\n';
      }
      break;
    }
    case ReportFormat::json: {
      json arr = json::array();
      for (const auto& r : rows) {
        json j = {{"setting", r.setting},   {"method", r.method},           {"iou", r.iou_defined ? json(r.iou) : json()},
                  {"miou", r.miou},         {"samples", r.samples},         {"decoder_calls", r.decoder_calls},
                  {"config_hash", r.config_hash}, {"seed", r.seed}};
        json cls = json::object();
        for (std::size_t c = 1; c < kNumClasses; ++c) {
          cls[std::string(class_name(c))] = r.class_iou[c] ? json(*r.class_iou[c]) : json();
        }
        j["class_iou"] = cls;
        if (r.latency) j["latency_ms"] = {{"median", r.latency->median_ms}, {"p95", r.latency->p95_ms}};
        if (r.peak_memory_mb) j["peak_memory_mb"] = *r.peak_memory_mb;
        arr.push_back(j);
      }
      os << json{{"rows", arr}}.dump(2) << '\n';
      break;
    }
  }
  return os.str();
}

std::vector<ProtocolReport> parse_report_json(const json& j) {
  if (!j.is_object() || !j.contains("rows") || !j["rows"].is_array()) throw FormatError("report JSON needs a rows array");
  std::vector<ProtocolReport> out;
  for (const auto& row : j["rows"]) {
    ProtocolReport r;
    r.setting = row.at("setting").get<std::string>();
    r.method = row.at("method").get<std::string>();
    r.iou_defined = !row.at("iou").is_null();
    r.iou = r.iou_defined ? row["iou"].get<double>() : 0.0;
    r.miou = row.at("miou").get<double>();
    r.samples = row.at("samples").get<std::size_t>();
    r.decoder_calls = row.value("decoder_calls", std::uint64_t{0});
    r.config_hash = row.at("config_hash").get<std::string>();
    r.seed = row.at("seed").get<std::uint64_t>();
    const auto& cls = row.at("class_iou");
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      const std::string name(class_name(c));
      if (cls.contains(name) && !cls[name].is_null()) r.class_iou[c] = cls[name].get<double>();
    }
    if (row.contains("latency_ms")) {
      r.latency = LatencyStats{row["latency_ms"].at("median").get<double>(), row["latency_ms"].at("p95").get<double>()};
    }
    if (row.contains("peak_memory_mb")) r.peak_memory_mb = row["peak_memory_mb"].get<double>();
    out.push_back(r);
  }
  return out;
}

std::vector<ProtocolReport> parse_report_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report CSV header mismatch");
  std::vector<ProtocolReport> out;
  auto num = [](const std::string& s) { return std::stod(s); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 16) throw FormatError("report CSV row has " + std::to_string(f.size()) + " fields");
    ProtocolReport r;
    r.setting = f[0];
    r.method = f[1];
    r.iou_defined = !f[2].empty();
    r.iou = r.iou_defined ? num(f[2]) : 0.0;
    r.miou = num(f[3]);
    for (std::size_t c = 1; c < kNumClasses; ++c)
      if (!f[3 + c].empty()) r.class_iou[c] = num(f[3 + c]);
    r.samples = std::stoull(f[9]);
    r.decoder_calls = std::stoull(f[10]);
    r.config_hash = f[11];
    r.seed = std::stoull(f[12]);
    if (!f[13].empty()) r.latency = LatencyStats{num(f[13]), num(f[14])};
    if (!f[15].empty()) r.peak_memory_mb = num(f[15]);
    out.push_back(r);
  }
  return out;
}

std::string render_plot_data(const std::vector<ProtocolReport>& rows) {
  std::ostringstream os;
  os << "# index\tsetting\tmethod\tiou\tmiou\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << i << '\t' << rows[i].setting << '\t' << rows[i].method << '\t' << fmt_num(rows[i].iou) << '\t'
       << fmt_num(rows[i].miou) << '\n';
  }
  return os.str();
}

std::vector<BenchRow> run_bench(const OccupancyModel& model, const SceneDataset& data, std::size_t max_missing,
                                std::size_t repeats, std::uint64_t seed) {
  const auto& ring = model.config().scene.ring;
  if (max_missing >= ring.size()) throw ParameterError("bench: at least one view must remain");
  if (data.size() == 0 || repeats == 0) throw ParameterError("bench: needs samples and repeats");
  const std::size_t levels = max_missing + 1;
  const std::size_t n = data.size();
  std::vector<MaskPlan> plans;
  for (std::size_t k = 0; k < levels; ++k) plans.push_back(k == 0 ? MaskPlan::none() : MaskPlan::dropout(k, seed));
  std::vector<std::vector<double>> lat(levels);
  std::vector<std::vector<double>> best(levels, std::vector<double>(n, std::numeric_limits<double>::infinity()));
  std::vector<double> peak(levels, 0.0);
  std::vector<std::uint64_t> calls(levels, 0);
  // Missing-view counts are interleaved per sample so that slow phases of the
  // host hit every count alike. One untimed pass warms caches first.
  for (std::size_t rep = 0; rep <= repeats; ++rep) {
    for (std::size_t i = 0; i < n; ++i) {
      const SceneSample& s = data[i];
      for (std::size_t k = 0; k < levels; ++k) {
        const auto masked = resolve_mask(plans[k], ring, s.sample_id);
        reset_peak_memory();
        const std::uint64_t before = model.decoder().invocations();
        const auto t0 = std::chrono::steady_clock::now();
        const VoxelGrid pred = model.infer(s.images, masked);
        const auto t1 = std::chrono::steady_clock::now();
        if (rep == 0) continue;
        const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        calls[k] += model.decoder().invocations() - before;
        lat[k].push_back(ms);
        best[k][i] = std::min(best[k][i], ms);
        peak[k] = std::max(peak[k], static_cast<double>(memory_stats().peak_bytes) / (1024.0 * 1024.0));
      }
    }
  }
  std::vector<BenchRow> rows;
  for (std::size_t k = 0; k < levels; ++k) {
    BenchRow row;
    row.missing = k;
    row.samples = lat[k].size();
    // median over samples of each sample's fastest repeat; p95 over every run
    row.latency.median_ms = latency_stats(best[k]).median_ms;
    row.latency.p95_ms = latency_stats(lat[k]).p95_ms;
    row.peak_memory_mb = peak[k];
    row.decoder_calls_per_sample = static_cast<double>(calls[k]) / static_cast<double>(lat[k].size());
    rows.push_back(row);
  }
  return rows;
}

json bench_json(const std::vector<BenchRow>& rows, const std::string& config_hash, std::uint64_t seed) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"missing", r.missing},
                   {"latency_median_ms", r.latency.median_ms},
                   {"latency_p95_ms", r.latency.p95_ms},
                   {"peak_memory_mb", r.peak_memory_mb},
                   {"decoder_calls_per_sample", r.decoder_calls_per_sample},
                   {"samples", r.samples}});
  }
  return {{"rows", arr}, {"config_hash", config_hash}, {"seed", seed}};
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "missing,latency_median_ms,latency_p95_ms,peak_memory_mb,decoder_calls_per_sample,samples\n";
  for (const auto& r : rows) {
    os << r.missing << ',' << fmt_num(r.latency.median_ms) << ',' << fmt_num(r.latency.p95_ms) << ','
       << fmt_num(r.peak_memory_mb) << ',' << fmt_num(r.decoder_calls_per_sample) << ',' << r.samples << '\n';
  }
  return os.str();
}

ReconstructionStats measure_reconstruction(const OccupancyModel& model, const SceneDataset& data) {
  const PipelineConfig& cfg = model.config();
  if (!cfg.mmr) throw ParameterError("measure_reconstruction: model has no reconstruction decoder");
  const auto& ring = cfg.scene.ring;
  const Tensor tiled = model.decoder().tiled_mask(ring.feature_width);
  ReconstructionStats st;
  for (const auto& s : data) {
    const auto feats = model.encode(s.images);
    for (std::size_t v = 0; v < ring.size(); ++v) {
      const auto rec = apply_recovery(feats, {v}, model.decoder(), ring);
      const Tensor& gt = feats[v].data;
      st.decoder_mse += ops::mse(rec.features[v].data, gt).item();
      st.mask_token_mse += ops::mse(tiled, gt).item();
      st.zero_mse += ops::mse(Tensor(gt.shape(), 0.0), gt).item();
      ++st.views;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(st.views, 1));
  st.decoder_mse /= n;
  st.mask_token_mse /= n;
  st.zero_mse /= n;
  return st;
}

}  // namespace m2occ
