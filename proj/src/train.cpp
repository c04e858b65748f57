#include "tsal/train.hpp"

#include <numeric>

#include "tsal/random.hpp"

namespace tsal {

namespace {

Tensor gt_tensor(const Network<float>& net, const SaliencyMap& gt) {
  const auto& c = net.config();
  if (gt.height != c.output_height || gt.width != c.output_width)
    throw ShapeError("ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                     " does not match output " + std::to_string(c.output_height) + "x" +
                     std::to_string(c.output_width));
  return Tensor({static_cast<std::size_t>(gt.height), static_cast<std::size_t>(gt.width)}, gt.values);
}

}  // namespace

SaliencyMap predict(const Network<float>& net, const FeatureBundle& features) {
  return to_saliency_map(net.forward(features).output);
}

Trainer::Trainer(Network<float>& net, TrainOptions options)
    : net_(net), options_(options), optimizer_(net.parameters(), options.optimizer) {
  if (options_.batch <= 0) throw ConfigError("batch size must be positive");
  if (options_.epochs <= 0) throw ConfigError("epochs must be positive");
}

double Trainer::step(std::span<const TrainingSample* const> batch) {
  if (batch.empty()) throw Error("empty batch");
  optimizer_.zero_grad();
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const TrainingSample* s : batch) {
    auto out = net_.forward(s->features).output;
    auto l = net_.loss(out, gt_tensor(net_, s->gt));
    total += l.item();
    scale(l, w).backward();
  }
  optimizer_.step();
  ++steps_;
  return total * w;
}

void Trainer::fit(const std::vector<TrainingSample>& data, const std::function<void(const StepLog&)>& on_step,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (data.empty()) throw Error("training dataset is empty");
  Rng rng(options_.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t B = static_cast<std::size_t>(options_.batch);
  for (int epoch = 0; epoch < options_.epochs; ++epoch) {
    if (options_.shuffle)
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double sum = 0.0;
    int count = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      if (options_.max_steps > 0 && steps_ >= options_.max_steps) break;
      std::vector<const TrainingSample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + B); ++i) batch.push_back(&data[order[i]]);
      const double l = step(batch);
      sum += l;
      ++count;
      if (on_step) on_step({epoch, steps_, l});
    }
    if (count == 0) break;
    if (on_epoch) {
      EpochLog log{epoch, sum / count, {}};
      if (options_.evaluate_epochs) log.metrics = evaluate(net_, data);
      on_epoch(log);
    }
    if (options_.max_steps > 0 && steps_ >= options_.max_steps) break;
  }
}

MetricsReport evaluate(const Network<float>& net, const std::vector<TrainingSample>& data) {
  std::vector<SampleScore> scores;
  for (const auto& s : data) {
    const auto pred = predict(net, s.features);
    SampleScore sc;
    sc.id = s.id;
    sc.sim = sim(pred, s.gt);
    sc.kld = kld(pred, s.gt);
    try {
      sc.cc = cc(pred, s.gt);
    } catch (const Error&) {
      sc.cc = 0.0;
    }
    scores.push_back(sc);
  }
  return aggregate(scores).samples;
}

}  // namespace tsal
