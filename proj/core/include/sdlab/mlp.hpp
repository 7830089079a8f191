#pragma once

#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/numerics.hpp"

namespace sdlab {

// Fully-connected network with a linear output layer, parameters packed into
// one flat buffer (layer by layer: weights row-major, then biases).
// Backward is hand-written reverse accumulation; every gradient it produces
// is checked against finite differences in the test suite.
enum class Activation { tanh_act, relu };

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> widths, Activation act);

  const std::vector<int>& widths() const { return widths_; }
  int in_dim() const { return widths_.front(); }
  int out_dim() const { return widths_.back(); }
  std::size_t param_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  // He/Xavier-ish init scaled by 1/sqrt(fan_in); optionally zero the last
  // layer so the initial output is exactly 0.
  void init(RngStream& rng, bool zero_last_layer);

  struct Trace {
    std::vector<Vec> acts;  // acts[0] = input, acts[l] = post-activation of layer l
    std::vector<Vec> pre;   // pre-activation of each layer
  };

  Vec forward(const Vec& in, Trace* trace = nullptr) const;

  // Accumulates dL/dparams into param_grad (must be param_count() long);
  // if in_grad is non-null, writes dL/dinput there.
  void backward(const Trace& trace, const Vec& upstream, std::span<double> param_grad,
                Vec* in_grad = nullptr) const;

 private:
  std::vector<int> widths_;
  Activation act_ = Activation::tanh_act;
  Vec params_;
  std::vector<std::size_t> layer_offsets_;  // offset of each layer's weight block

  std::span<const double> weights(int layer) const;
  std::span<const double> biases(int layer) const;
};

// Sinusoidal features of a discrete timestep, shared by every network that
// conditions on t.
Vec time_features(int t, int n_steps, int n_features);

}  // namespace sdlab
