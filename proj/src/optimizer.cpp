#include "qada/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qada {

AdamW::AdamW(std::vector<Tensor> params, Options options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].mutable_data();
    auto g = params_[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = params_[k].rank() == 2 ? opt_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
      w[i] -= lr * decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
    }
  }
  return norm;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

LinearSchedule::LinearSchedule(std::size_t total_steps, double warmup_fraction, double peak_lr)
    : total_(total_steps), peak_(peak_lr) {
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("LinearSchedule: warmup fraction must lie in [0, 1)");
  }
  warmup_ = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
}

double LinearSchedule::lr(std::size_t step) const {
  if (step >= total_) return 0.0;
  if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  return peak_ * static_cast<double>(total_ - step) / static_cast<double>(total_ - warmup_);
}

}  // namespace qada
