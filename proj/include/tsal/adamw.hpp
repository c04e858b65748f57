#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tsal/tensor.hpp"

namespace tsal {

struct AdamWOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Decay multiplies the weights by
/// (1 - lr * weight_decay) before the moment update; moments never see it.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options = {});

  /// One update from the grads currently stored on the parameters.
  /// Parameters without a grad buffer are treated as having zero grad.
  void step();
  void zero_grad();

  std::size_t step_count() const { return step_; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<std::vector<float>>& first_moment() const { return m_; }
  const std::vector<std::vector<float>>& second_moment() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t step_ = 0;
};

}  // namespace tsal
