#pragma once

#include <optional>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/numerics.hpp"
#include "sdlab/teacher.hpp"

namespace sdlab {

// Token-embedding prompt split into a frozen base block, optional per-particle
// inverted tokens, and optional shared learnable tokens. Concatenation order
// is always base, inverted, shared.
struct PromptSpec {
  Matrix base;                    // L1 x D, never mutated by optimization
  std::optional<Matrix> hiper;    // L2 x D
  std::optional<Matrix> shared;   // L3 x D

  std::size_t embed_dim() const { return base.cols; }
};

Matrix concat_prompt(const PromptSpec& spec, bool include_hiper, bool include_shared);

struct InversionConfig {
  int l2 = 5;           // number of inverted tokens
  int iters = 400;      // desk default; the long preset uses 1400
  double lr = 5e-3;
  int mc_batch = 8;     // (t, eps) pairs per iteration
  double init_scale = 0.02;
};

struct InversionResult {
  Matrix tokens;    // L2 x D
  Vec loss_trace;   // per-iteration Monte-Carlo loss
  // Common-random-number evaluation of the objective at start / end.
  double initial_crn_loss = 0.0;
  double final_crn_loss = 0.0;
};

// Stage 1: optimize tokens h so that [base; h] explains the reference image
// under the denoising objective. Deterministic given rng; throws
// std::runtime_error with the iteration index if the loss goes non-finite.
InversionResult invert_hiper(const Denoiser& teacher, const Vec& x_ref, const Matrix& base,
                             const InversionConfig& cfg, RngStream rng,
                             const NoiseSchedule& sched);

struct ReferenceSet {
  std::vector<Vec> images;       // K points in data space
  std::vector<int> labels;       // diagnostic component labels (-1 if unavailable)
  std::uint64_t seed = 0;
  std::string teacher_hash;
};

ReferenceSet sample_references(const GmTeacher& teacher, const Matrix& base, int k,
                               RngStream rng);

}  // namespace sdlab
