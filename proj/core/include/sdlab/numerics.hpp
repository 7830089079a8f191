#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "sdlab/common.hpp"

namespace sdlab {

// ---------------------------------------------------------------------------
// Counter-based deterministic RNG.
//
// A draw is a pure function of (seed, stream_id, counter), so sequences are
// reproducible across runs and platforms, and splitting work across particles
// (one stream per particle) cannot perturb anyone else's draws.
// ---------------------------------------------------------------------------
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  // Derive a statistically independent stream from this one.
  RngStream substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  double next_double();                     // uniform [0, 1)
  double next_gaussian();                   // N(0,1); consumes exactly two counters
  std::uint64_t next_below(std::uint64_t n);  // uniform {0..n-1}, rejection-sampled
  std::int64_t next_int(std::int64_t lo, std::int64_t hi);  // uniform [lo, hi] inclusive

  void fill_gaussian(std::span<double> out);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Discrete variance-preserving noise schedule.
//
// alpha_t = sqrt(abar_t), sigma_t = sqrt(1 - abar_t) with
// abar_t = prod_{s<=t} (1 - beta_s) and beta linear in s.
// The step weight defaults to omega(t) = sigma_t^2; `zero` is a diagnostic
// weighting that turns every distillation update into a no-op.
// ---------------------------------------------------------------------------
enum class OmegaKind { sigma_sq, constant, zero };

struct ScheduleConfig {
  int n_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int t_min = 20;  // sampling bounds, inclusive
  int t_max = 980;
  OmegaKind omega = OmegaKind::sigma_sq;
};

struct ScheduleCoeffs {
  double alpha;
  double sigma;
  double omega;
};

class NoiseSchedule {
 public:
  explicit NoiseSchedule(const ScheduleConfig& cfg = {});

  const ScheduleConfig& config() const { return cfg_; }
  int n_steps() const { return cfg_.n_steps; }

  // t in [1, n_steps]; throws std::out_of_range otherwise.
  ScheduleCoeffs eval(int t) const;

  // Uniform integer timestep in [t_min, t_max].
  int sample_t(RngStream& rng) const;

 private:
  ScheduleConfig cfg_;
  Vec alpha_;  // alpha_[t-1] = sqrt(abar_t)
  Vec sigma_;
};

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------
struct AdamState {
  Vec first_moment;
  Vec second_moment;
  std::int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  AdamState(std::size_t n_params, double learning_rate)
      : first_moment(n_params, 0.0), second_moment(n_params, 0.0), lr(learning_rate) {}
};

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

// ---------------------------------------------------------------------------
// Small statistics helpers.
// ---------------------------------------------------------------------------

// Shannon entropy in nats; p must be a probability vector (sum within 1e-9 of 1).
double entropy(std::span<const double> p);

double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Central-difference gradient estimate; the oracle behind every gradient check.
Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h);

}  // namespace sdlab
