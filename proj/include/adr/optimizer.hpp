// SGD with momentum and weight decay, plus the cosine annealing schedule.
#pragma once

#include <cmath>
#include <vector>

#include "adr/common.hpp"
#include "adr/layers.hpp"

namespace adr {

// lr(e) = base * (1 + cos(pi * e / E)) / 2 on e in [0, E]; the endpoint value
// lr(E) is 0 exactly, epoch 0 is the base rate and the midpoint is base/2.
struct CosineSchedule {
  double base_lr = 0.01;
  int total_epochs = 1;

  double lr_at(int epoch) const {
    if (total_epochs <= 0) return base_lr;
    const double t = std::min(std::max(epoch, 0), total_epochs) /
                     static_cast<double>(total_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  }
};

template <typename R>
class SGD {
 public:
  SGD(std::vector<NamedParam<R>> params, R momentum, R weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (auto& np : params_) velocity_.emplace_back(np.p->v.shape());
  }

  void zero_grad() {
    for (auto& np : params_) np.p->zero_grad();
  }

  void step(R lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<R>& v = velocity_[i];
      Tensor<R>& w = params_[i].p->v;
      Tensor<R>& g = params_[i].p->g;
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  std::vector<NamedParam<R>> params_;
  std::vector<Tensor<R>> velocity_;
  R momentum_;
  R weight_decay_;
};

}  // namespace adr
