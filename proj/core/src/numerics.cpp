#include "sdlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sdlab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer; full-avalanche 64-bit mix.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  key_ = mix64(mix64(seed + kGolden) ^ (stream_id + kGolden));
}

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(seed_, mix64(stream_id_ + kGolden) ^ (id + 1));
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ + c * kGolden + kGolden);
}

double RngStream::next_double() {
  // 53-bit mantissa construction; result in [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian() {
  // Box-Muller, cosine branch. u1 is kept away from 0.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
  require(n > 0, "next_below: n must be positive");
  const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

std::int64_t RngStream::next_int(std::int64_t lo, std::int64_t hi) {
  require(lo <= hi, "next_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(next_below(span));
}

void RngStream::fill_gaussian(std::span<double> out) {
  for (double& x : out) x = next_gaussian();
}

// ---------------------------------------------------------------------------

NoiseSchedule::NoiseSchedule(const ScheduleConfig& cfg) : cfg_(cfg) {
  require(cfg_.n_steps >= 1, "NoiseSchedule: n_steps must be >= 1");
  require(cfg_.beta_min > 0.0 && cfg_.beta_max < 1.0 && cfg_.beta_min <= cfg_.beta_max,
          "NoiseSchedule: need 0 < beta_min <= beta_max < 1");
  require(cfg_.t_min >= 1 && cfg_.t_max <= cfg_.n_steps && cfg_.t_min <= cfg_.t_max,
          "NoiseSchedule: sampling bounds out of range");
  alpha_.resize(cfg_.n_steps);
  sigma_.resize(cfg_.n_steps);
  double log_abar = 0.0;
  for (int t = 1; t <= cfg_.n_steps; ++t) {
    const double frac = cfg_.n_steps == 1 ? 0.0 : double(t - 1) / double(cfg_.n_steps - 1);
    const double beta = cfg_.beta_min + (cfg_.beta_max - cfg_.beta_min) * frac;
    log_abar += std::log1p(-beta);
    const double abar = std::exp(log_abar);
    alpha_[t - 1] = std::sqrt(abar);
    sigma_[t - 1] = std::sqrt(1.0 - abar);
  }
}

ScheduleCoeffs NoiseSchedule::eval(int t) const {
  if (t < 1 || t > cfg_.n_steps) {
    throw std::out_of_range("NoiseSchedule::eval: t=" + std::to_string(t) + " outside [1, " +
                            std::to_string(cfg_.n_steps) + "]");
  }
  const double a = alpha_[t - 1];
  const double s = sigma_[t - 1];
  double w = 1.0;
  if (cfg_.omega == OmegaKind::sigma_sq) w = s * s;
  if (cfg_.omega == OmegaKind::zero) w = 0.0;
  return {a, s, w};
}

int NoiseSchedule::sample_t(RngStream& rng) const {
  return static_cast<int>(rng.next_int(cfg_.t_min, cfg_.t_max));
}

// ---------------------------------------------------------------------------

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
  require(params.size() == grad.size(), "adam_step: params/grad size mismatch");
  require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
          "adam_step: moment size mismatch");
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

// ---------------------------------------------------------------------------

double entropy(std::span<const double> p) {
  require(!p.empty(), "entropy: empty vector");
  double sum = 0.0;
  for (double x : p) {
    require(x >= 0.0, "entropy: negative probability");
    sum += x;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "entropy: probabilities do not sum to 1");
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  require(u.size() == v.size(), "cosine_similarity: dimension mismatch");
  const double nu = norm2(u), nv = norm2(v);
  require(nu > 0.0 && nv > 0.0, "cosine_similarity: zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  require(h > 0.0, "finite_diff_grad: h must be positive");
  Vec g(x.size());
  Vec probe = x;
  for (std::size_t j = 0; j < x.size(); ++j) {
    probe[j] = x[j] + h;
    const double fp = f(probe);
    probe[j] = x[j] - h;
    const double fm = f(probe);
    probe[j] = x[j];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("finite_diff_grad: non-finite function value at coordinate " +
                               std::to_string(j));
    }
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace sdlab
