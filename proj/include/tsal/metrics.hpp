#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tsal/image.hpp"

namespace tsal {

/// Pearson correlation. Throws if either map has zero variance.
double cc(std::span<const float> pred, std::span<const float> gt);
/// Histogram intersection of the sum-normalized maps.
double sim(std::span<const float> pred, std::span<const float> gt);
/// sum Q ln(Q / (P + eps) + eps), P and Q sum-normalized, Q the ground truth.
double kld(std::span<const float> pred, std::span<const float> gt);

double cc(const SaliencyMap& pred, const SaliencyMap& gt);
double sim(const SaliencyMap& pred, const SaliencyMap& gt);
double kld(const SaliencyMap& pred, const SaliencyMap& gt);

struct SampleScore {
  int fold = 0;
  std::string id;
  double cc = 0.0;
  double sim = 0.0;
  double kld = 0.0;
};

SampleScore score_sample(const SaliencyMap& pred, const SaliencyMap& gt, int fold = 0, std::string id = {});

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;
};

struct MetricsReport {
  MetricStat cc, sim, kld;
  std::size_t n = 0;
};

struct FoldReport {
  int fold = 0;
  MetricsReport report;
};

struct AggregateReport {
  std::vector<FoldReport> folds;  // sorted by fold id
  MetricsReport overall;          // mean and population std of fold means
  MetricsReport samples;          // mean and population std over all samples
};

AggregateReport aggregate(std::span<const SampleScore> scores);

/// Rows "fold,metric,mean,std"; fold is the id, "all" for fold-level
/// aggregation, or "samples" for sample-level statistics.
void write_report_csv(std::ostream& os, const AggregateReport& report);
void write_report_table(std::ostream& os, const AggregateReport& report);

}  // namespace tsal
