#include "dms2f/eval.hpp"

#include "dms2f/ssm.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace dms2f {

EvalReport roc_auc(std::span<const double> scores, std::span<const bool> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("roc_auc: " + std::to_string(scores.size()) + " scores but " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw NumericError("roc_auc: score " + std::to_string(i) + " is NaN");
    (labels[i] ? pos : neg).push_back(scores[i]);
  }
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("roc_auc: mask needs at least one anomalous and one background pixel (got " +
                                std::to_string(pos.size()) + " and " + std::to_string(neg.size()) + ")");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  EvalReport report;
  report.positives = Index(pos.size());
  report.negatives = Index(neg.size());
  const auto P = static_cast<std::int64_t>(pos.size()), N = static_cast<std::int64_t>(neg.size());
  report.roc.far.push_back(0.0);
  report.roc.pd.push_back(0.0);
  // Twice the area in units of 1/(P*N): each tie block contributes a
  // trapezoid fp * (2 tp_before + tp_block) / 2.
  std::int64_t tp = 0, fp = 0, area2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::int64_t dtp = 0, dfp = 0;
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? dtp : dfp) += 1;
    area2 += dfp * (2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    report.roc.far.push_back(double(fp) / double(N));
    report.roc.pd.push_back(double(tp) / double(P));
  }
  report.auc = double(area2) / double(2 * P * N);
  report.anomaly = box_stats(std::move(pos));
  report.background = box_stats(std::move(neg));
  return report;
}

EvalReport roc_auc(const ScoreMap& scores, const Mask& mask) {
  if (mask.rows() != scores.height || mask.cols() != scores.width) {
    throw ShapeError("roc_auc: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     ", scores are " + std::to_string(scores.height) + "x" + std::to_string(scores.width));
  }
  return roc_auc(std::span<const double>(scores.scores.data(), std::size_t(scores.scores.size())),
                 std::span<const bool>(mask.data(), std::size_t(mask.size())));
}

BoxStats box_stats(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("box_stats: no values");
  std::sort(values.begin(), values.end());
  auto quantile = [&](double p) {
    const double pos = p * double(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - double(lo);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + frac * (values[lo + 1] - values[lo]);
  };
  return {values.front(), quantile(0.25), quantile(0.5), quantile(0.75), values.back()};
}

std::string report_json(const EvalReport& r) {
  auto box = [](const BoxStats& b) {
    nlohmann::ordered_json j;
    j["min"] = b.min;
    j["q1"] = b.q1;
    j["median"] = b.median;
    j["q3"] = b.q3;
    j["max"] = b.max;
    return j;
  };
  nlohmann::ordered_json j;
  j["auc"] = r.auc;
  j["positives"] = r.positives;
  j["negatives"] = r.negatives;
  j["anomaly"] = box(r.anomaly);
  j["background"] = box(r.background);
  j["roc_points"] = r.roc.far.size();
  return j.dump(2);
}

void write_roc_csv(const RocCurve& roc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "far,pd\n";
  char line[64];
  for (std::size_t i = 0; i < roc.far.size(); ++i) {
    std::snprintf(line, sizeof line, "%.17g,%.17g\n", roc.far[i], roc.pd[i]);
    out << line;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Matrix<float> attention_reference(const Matrix<float>& q, const Matrix<float>& k, const Matrix<float>& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw ShapeError("attention_reference: incompatible shapes");
  Matrix<float> s(q.rows(), k.rows());
  s.noalias() = q * k.transpose();
  s *= 1.0f / std::sqrt(float(q.cols()));
  s.colwise() -= s.rowwise().maxCoeff();
  s = s.array().exp().matrix();
  s.array().colwise() /= s.rowwise().sum().array();
  Matrix<float> out(q.rows(), v.cols());
  out.noalias() = s * v;
  return out;
}

std::vector<BenchRow> bench_scan(std::span<const Index> lengths, int reps, Index inner, Index state,
                                 std::uint64_t seed) {
  if (lengths.size() < 2) throw std::invalid_argument("bench_scan: need at least two lengths");
  for (Index L : lengths) {
    if (L < 64) throw std::invalid_argument("bench_scan: lengths must be >= 64, got " + std::to_string(L));
  }
  if (reps < 1) throw std::invalid_argument("bench_scan: reps must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> step(0.01f, 0.5f), decay(0.1f, 2.0f);
  auto fill = [&](Index r, Index c, auto& dist) {
    Matrix<float> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  auto median_ms = [&](auto&& run) {
    run();  // warm-up
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      run();
      times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(times.begin(), times.begin() + std::ptrdiff_t(times.size() / 2), times.end());
    return times[times.size() / 2];
  };

  std::vector<BenchRow> rows;
  float sink = 0.0f;
  for (Index L : lengths) {
    const Matrix<float> u = fill(L, inner, normal), delta = fill(L, inner, step);
    const Matrix<float> A = -fill(inner, state, decay);
    const Matrix<float> B = fill(L, state, normal), C = fill(L, state, normal), D = fill(1, inner, normal);
    const Matrix<float> q = fill(L, inner, normal), k = fill(L, inner, normal), v = fill(L, inner, normal);
    BenchRow row;
    row.length = L;
    row.scan_ms = median_ms([&] { sink += selective_scan(u, delta, A, B, C, D, L)(L - 1, 0); });
    row.attn_ms = median_ms([&] { sink += attention_reference(q, k, v)(L - 1, 0); });
    rows.push_back(row);
  }
  // Keeps the timed results observable.
  if (std::isnan(sink)) rows.front().scan_ms = std::numeric_limits<double>::quiet_NaN();
  return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "L,scan_ms,attn_ms\n";
  char line[96];
  for (const BenchRow& r : rows) {
    std::snprintf(line, sizeof line, "%lld,%.6f,%.6f\n", static_cast<long long>(r.length), r.scan_ms, r.attn_ms);
    out << line;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace dms2f
