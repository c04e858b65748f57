#include "tsal/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>

#include "tsal/common.hpp"
#include "tsal/tensor.hpp"

namespace tsal {

namespace {

void check_sizes(const char* name, std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty())
    throw ShapeError(std::string(name) + ": map sizes " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " differ or are empty");
}

std::vector<double> normalized(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += x;
  std::vector<double> out(v.size(), 0.0);
  if (s > 0.0)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / s;
  return out;
}

void check_grid(const SaliencyMap& a, const SaliencyMap& b) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("metric: map grids " + std::to_string(a.height) + "x" + std::to_string(a.width) + " and " +
                     std::to_string(b.height) + "x" + std::to_string(b.width) + " differ");
}

}  // namespace

double cc(std::span<const float> pred, std::span<const float> gt) {
  check_sizes("cc", pred, gt);
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mq += gt[i];
  }
  mp /= n;
  mq /= n;
  double spp = 0.0, sqq = 0.0, spq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = gt[i] - mq;
    spp += a * a;
    sqq += b * b;
    spq += a * b;
  }
  if (spp == 0.0 || sqq == 0.0) throw Error("cc: correlation undefined for a constant map");
  return std::clamp(spq / std::sqrt(spp * sqq), -1.0, 1.0);
}

double sim(std::span<const float> pred, std::span<const float> gt) {
  check_sizes("sim", pred, gt);
  const auto P = normalized(pred), Q = normalized(gt);
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += std::min(P[i], Q[i]);
  return s;
}

double kld(std::span<const float> pred, std::span<const float> gt) {
  check_sizes("kld", pred, gt);
  const auto P = normalized(pred), Q = normalized(gt);
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += Q[i] * std::log(Q[i] / (P[i] + kKldEpsilon) + kKldEpsilon);
  return s;
}

double cc(const SaliencyMap& pred, const SaliencyMap& gt) {
  check_grid(pred, gt);
  return cc(std::span<const float>(pred.values), gt.values);
}
double sim(const SaliencyMap& pred, const SaliencyMap& gt) {
  check_grid(pred, gt);
  return sim(std::span<const float>(pred.values), gt.values);
}
double kld(const SaliencyMap& pred, const SaliencyMap& gt) {
  check_grid(pred, gt);
  return kld(std::span<const float>(pred.values), gt.values);
}

SampleScore score_sample(const SaliencyMap& pred, const SaliencyMap& gt, int fold, std::string id) {
  return {fold, std::move(id), cc(pred, gt), sim(pred, gt), kld(pred, gt)};
}

namespace {

MetricStat stat(const std::vector<double>& v) {
  MetricStat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(v.size()));
  return s;
}

MetricsReport report_of(const std::vector<double>& c, const std::vector<double>& s, const std::vector<double>& k,
                        std::size_t n) {
  return {stat(c), stat(s), stat(k), n};
}

}  // namespace

AggregateReport aggregate(std::span<const SampleScore> scores) {
  if (scores.empty()) throw Error("aggregate: no samples");
  std::map<int, std::array<std::vector<double>, 3>> by_fold;
  std::array<std::vector<double>, 3> all;
  for (const auto& s : scores) {
    auto& f = by_fold[s.fold];
    f[0].push_back(s.cc);
    f[1].push_back(s.sim);
    f[2].push_back(s.kld);
    all[0].push_back(s.cc);
    all[1].push_back(s.sim);
    all[2].push_back(s.kld);
  }
  AggregateReport out;
  std::array<std::vector<double>, 3> fold_means;
  for (const auto& [fold, v] : by_fold) {
    FoldReport fr{fold, report_of(v[0], v[1], v[2], v[0].size())};
    fold_means[0].push_back(fr.report.cc.mean);
    fold_means[1].push_back(fr.report.sim.mean);
    fold_means[2].push_back(fr.report.kld.mean);
    out.folds.push_back(fr);
  }
  out.overall = report_of(fold_means[0], fold_means[1], fold_means[2], scores.size());
  out.samples = report_of(all[0], all[1], all[2], scores.size());
  return out;
}

namespace {

void csv_rows(std::ostream& os, const std::string& fold, const MetricsReport& r) {
  char buf[160];
  const std::pair<const char*, const MetricStat*> rows[] = {{"cc", &r.cc}, {"sim", &r.sim}, {"kld", &r.kld}};
  for (const auto& [name, st] : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f\n", fold.c_str(), name, st->mean, st->std);
    os << buf;
  }
}

std::string cell(const MetricStat& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f ± %.3f", s.mean, s.std);
  return buf;
}

}  // namespace

void write_report_csv(std::ostream& os, const AggregateReport& report) {
  os << "fold,metric,mean,std\n";
  for (const auto& f : report.folds) csv_rows(os, std::to_string(f.fold), f.report);
  csv_rows(os, "all", report.overall);
  csv_rows(os, "samples", report.samples);
}

void write_report_table(std::ostream& os, const AggregateReport& report) {
  char buf[256];
  auto line = [&](const std::string& label, const MetricsReport& r) {
    std::snprintf(buf, sizeof buf, "%-10s %6zu  %-16s %-16s %-16s\n", label.c_str(), r.n, cell(r.cc).c_str(),
                  cell(r.sim).c_str(), cell(r.kld).c_str());
    os << buf;
  };
  std::snprintf(buf, sizeof buf, "%-10s %6s  %-15s %-15s %-15s\n", "fold", "n", "CC", "SIM", "KLD");
  os << buf;
  for (const auto& f : report.folds) line(std::to_string(f.fold), f.report);
  line("mean", report.overall);
}

}  // namespace tsal
