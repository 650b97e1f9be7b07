#pragma once

// Threshold-free evaluation (ROC, AUC, box statistics) and the scan-vs-
// attention scaling benchmark.

#include "dms2f/data.hpp"
#include "dms2f/detection.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace dms2f {

struct RocCurve {
  // From threshold +inf to -inf: (0,0) first, (1,1) last.
  std::vector<double> far;
  std::vector<double> pd;
};

/// Inclusive quartiles with linear interpolation between order statistics:
/// q(p) = v[floor(p(n-1))] + frac * (next - v[floor(p(n-1))]).
struct BoxStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

struct EvalReport {
  double auc = 0.0;
  RocCurve roc;
  BoxStats anomaly;
  BoxStats background;
  Index positives = 0;
  Index negatives = 0;
};

/// One ROC point per distinct score. The area is accumulated in integer
/// pair counts, so it equals the Mann-Whitney statistic with ties counted
/// one half exactly. Throws std::invalid_argument when a class is empty.
EvalReport roc_auc(std::span<const double> scores, std::span<const bool> labels);
EvalReport roc_auc(const ScoreMap& scores, const Mask& mask);

BoxStats box_stats(std::vector<double> values);

std::string report_json(const EvalReport& report);
void write_roc_csv(const RocCurve& roc, const std::filesystem::path& path);

/// softmax(Q K^T / sqrt(d)) V, the quadratic-cost reference for the benchmark.
Matrix<float> attention_reference(const Matrix<float>& q, const Matrix<float>& k, const Matrix<float>& v);

struct BenchRow {
  Index length = 0;
  double scan_ms = 0.0;  // median wall time
  double attn_ms = 0.0;
};

/// Times the selective scan and the attention reference at each length
/// (width `inner`, scan state `state`), median over `reps` runs. Requires at
/// least two lengths, each >= 64.
std::vector<BenchRow> bench_scan(std::span<const Index> lengths, int reps, Index inner = 64, Index state = 16,
                                 std::uint64_t seed = 0);

void write_bench_csv(const std::vector<BenchRow>& rows, const std::filesystem::path& path);

}  // namespace dms2f
