#include "sdlab/mlp.hpp"

#include <cmath>
#include <numbers>

namespace sdlab {

Mlp::Mlp(std::vector<int> widths, Activation act) : widths_(std::move(widths)), act_(act) {
  require(widths_.size() >= 2, "Mlp: need at least input and output widths");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    layer_offsets_.push_back(total);
    total += static_cast<std::size_t>(widths_[l]) * widths_[l + 1] + widths_[l + 1];
  }
  params_.assign(total, 0.0);
}

std::span<const double> Mlp::weights(int layer) const {
  const std::size_t off = layer_offsets_[layer];
  const std::size_t n = static_cast<std::size_t>(widths_[layer]) * widths_[layer + 1];
  return {params_.data() + off, n};
}

std::span<const double> Mlp::biases(int layer) const {
  const std::size_t off = layer_offsets_[layer] + static_cast<std::size_t>(widths_[layer]) * widths_[layer + 1];
  return {params_.data() + off, static_cast<std::size_t>(widths_[layer + 1])};
}

void Mlp::init(RngStream& rng, bool zero_last_layer) {
  const int n_layers = static_cast<int>(widths_.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    const std::size_t off = layer_offsets_[l];
    const std::size_t nw = static_cast<std::size_t>(widths_[l]) * widths_[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
    const bool zero = zero_last_layer && l == n_layers - 1;
    for (std::size_t i = 0; i < nw; ++i) {
      params_[off + i] = zero ? 0.0 : scale * rng.next_gaussian();
    }
    for (int i = 0; i < widths_[l + 1]; ++i) params_[off + nw + i] = 0.0;
  }
}

Vec Mlp::forward(const Vec& in, Trace* trace) const {
  require(static_cast<int>(in.size()) == widths_.front(), "Mlp::forward: input size mismatch");
  const int n_layers = static_cast<int>(widths_.size()) - 1;
  if (trace) {
    trace->acts.assign(1, in);
    trace->pre.clear();
  }
  Vec cur = in;
  for (int l = 0; l < n_layers; ++l) {
    const int ni = widths_[l], no = widths_[l + 1];
    const auto w = weights(l);
    const auto b = biases(l);
    Vec nxt(no);
    for (int o = 0; o < no; ++o) {
      double s = b[o];
      const double* wr = w.data() + static_cast<std::size_t>(o) * ni;
      for (int i = 0; i < ni; ++i) s += wr[i] * cur[i];
      nxt[o] = s;
    }
    if (trace) trace->pre.push_back(nxt);
    if (l < n_layers - 1) {
      for (double& x : nxt) x = act_ == Activation::tanh_act ? std::tanh(x) : (x > 0.0 ? x : 0.0);
    }
    if (trace) trace->acts.push_back(nxt);
    cur = std::move(nxt);
  }
  return cur;
}

void Mlp::backward(const Trace& trace, const Vec& upstream, std::span<double> param_grad,
                   Vec* in_grad) const {
  require(param_grad.size() == params_.size(), "Mlp::backward: param_grad size mismatch");
  const int n_layers = static_cast<int>(widths_.size()) - 1;
  require(static_cast<int>(trace.acts.size()) == n_layers + 1, "Mlp::backward: bad trace");
  Vec delta = upstream;  // dL/d(pre-activation of current layer)
  for (int l = n_layers - 1; l >= 0; --l) {
    const int ni = widths_[l], no = widths_[l + 1];
    if (l < n_layers - 1) {
      // Peel the activation: delta currently holds dL/d(post-activation).
      for (int o = 0; o < no; ++o) {
        if (act_ == Activation::tanh_act) {
          const double a = trace.acts[l + 1][o];
          delta[o] *= (1.0 - a * a);
        } else {
          delta[o] *= trace.pre[l][o] > 0.0 ? 1.0 : 0.0;
        }
      }
    }
    const Vec& input = trace.acts[l];
    const std::size_t off = layer_offsets_[l];
    const std::size_t nw = static_cast<std::size_t>(ni) * no;
    for (int o = 0; o < no; ++o) {
      const double d = delta[o];
      double* gw = param_grad.data() + off + static_cast<std::size_t>(o) * ni;
      for (int i = 0; i < ni; ++i) gw[i] += d * input[i];
      param_grad[off + nw + o] += d;
    }
    if (l > 0 || in_grad) {
      Vec prev(ni, 0.0);
      const auto w = weights(l);
      for (int o = 0; o < no; ++o) {
        const double d = delta[o];
        const double* wr = w.data() + static_cast<std::size_t>(o) * ni;
        for (int i = 0; i < ni; ++i) prev[i] += d * wr[i];
      }
      if (l == 0) {
        *in_grad = std::move(prev);
        return;
      }
      delta = std::move(prev);
    }
  }
}

Vec time_features(int t, int n_steps, int n_features) {
  require(n_features % 2 == 0, "time_features: n_features must be even");
  Vec out(n_features);
  const double x = static_cast<double>(t) / static_cast<double>(n_steps);
  for (int k = 0; k < n_features / 2; ++k) {
    const double freq = std::pow(2.0, k) * std::numbers::pi;
    out[2 * k] = std::sin(freq * x);
    out[2 * k + 1] = std::cos(freq * x);
  }
  return out;
}

}  // namespace sdlab
