#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsal/adamw.hpp"
#include "tsal/encoders.hpp"
#include "tsal/image.hpp"
#include "tsal/metrics.hpp"
#include "tsal/model.hpp"

namespace tsal {

/// One (frame window, text) pair with its ground truth at output resolution.
struct TrainingSample {
  std::string id;
  FeatureBundle features;
  SaliencyMap gt;
};

struct TrainOptions {
  int epochs = 4;
  int batch = 8;
  int max_steps = 0;  // stop after this many optimizer steps; 0 = no limit
  bool shuffle = true;
  bool evaluate_epochs = true;
  std::uint64_t seed = 0;
  AdamWOptions optimizer;
};

struct StepLog {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  MetricsReport metrics;  // on the training samples, when evaluate_epochs is set
};

/// Predicted map at output resolution, max-normalized.
SaliencyMap predict(const Network<float>& net, const FeatureBundle& features);

class Trainer {
 public:
  Trainer(Network<float>& net, TrainOptions options);

  /// Mean loss over the batch; gradients averaged, one optimizer step.
  double step(std::span<const TrainingSample* const> batch);

  /// Runs the epochs. Throws on an empty dataset.
  void fit(const std::vector<TrainingSample>& data, const std::function<void(const StepLog&)>& on_step = {},
           const std::function<void(const EpochLog&)>& on_epoch = {});

  int steps_taken() const { return steps_; }

 private:
  Network<float>& net_;
  TrainOptions options_;
  AdamW optimizer_;
  int steps_ = 0;
};

MetricsReport evaluate(const Network<float>& net, const std::vector<TrainingSample>& data);

}  // namespace tsal
