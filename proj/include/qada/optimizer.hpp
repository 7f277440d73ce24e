#pragma once

#include <cstddef>
#include <vector>

#include "qada/tensor.hpp"

namespace qada {

/// Adam with decoupled weight decay. Decay applies to rank-2 tensors only
/// (matrices and embedding tables); vectors (biases, norm scales) are exempt.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
  };

  AdamW(std::vector<Tensor> params, Options options);

  /// One update with learning rate lr; returns the pre-clip gradient norm.
  double step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup over the first warmup_fraction of steps, then linear decay
/// to zero at total_steps.
class LinearSchedule {
 public:
  LinearSchedule(std::size_t total_steps, double warmup_fraction, double peak_lr);
  double lr(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_; }

 private:
  std::size_t total_;
  std::size_t warmup_;
  double peak_;
};

}  // namespace qada
