#pragma once

#include <functional>

#include "sdlab/common.hpp"
#include "sdlab/numerics.hpp"
#include "sdlab/scenes.hpp"
#include "sdlab/teacher.hpp"

namespace sdlab {

// Numerical midpoint-convexity testing. The lemma-style claims are treated as
// hypotheses: the probes count violations of
//   f((a+b)/2) <= (f(a) + f(b)) / 2 + tol * scale
// over random segments, with scale = max(1, |f(a)|, |f(b)|, |f(mid)|) so the
// tolerance tracks the local magnitude of f.
struct ProbeReport {
  std::size_t n_segments = 0;
  std::size_t violations = 0;
  double violation_fraction = 0.0;
  double max_violation = 0.0;  // largest f(mid) - (f(a)+f(b))/2 observed
  std::size_t crn_batch = 0;
  double tol = 0.0;
};

// Fixed (t, eps) draws shared by every potential evaluation within one probe,
// so Monte-Carlo noise cannot masquerade as non-convexity.
struct CrnBatch {
  std::vector<int> ts;
  std::vector<Vec> eps;
};

CrnBatch make_crn_batch(int n, int dim, RngStream& rng, const NoiseSchedule& sched);

// Monte-Carlo denoising objective mean_b omega(t_b) |eps_hat - eps_b|^2 at a
// candidate image x. Invariant to batch order.
double sds_potential_eval(const GmTeacher& teacher, const Vec& x, const Matrix& base,
                          const CrnBatch& crn, const NoiseSchedule& sched);

ProbeReport midpoint_convexity_probe(const std::function<double(const Vec&)>& f,
                                     const std::function<Vec(RngStream&)>& domain_sampler,
                                     std::size_t n_segments, double tol, RngStream rng);

// Parameter-space probe of a radiance field: density and color outputs at
// probe points, as functions of the parameter vector. `final_layer_only`
// restricts segments to the heads' output layers (the regime where softplus of
// an affine map is provably convex); otherwise segments move jointly through
// grid features and both head layers.
struct FieldProbeResult {
  ProbeReport density;
  ProbeReport color;
};

FieldProbeResult field_convexity_probe(const GridMlpField& field, std::size_t n_segments,
                                       std::size_t n_points, double tol, RngStream rng,
                                       bool final_layer_only);

}  // namespace sdlab
