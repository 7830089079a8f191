#include "sdlab/probes.hpp"

#include <algorithm>
#include <cmath>

namespace sdlab {

CrnBatch make_crn_batch(int n, int dim, RngStream& rng, const NoiseSchedule& sched) {
  require(n >= 1, "make_crn_batch: need at least one pair");
  CrnBatch b;
  b.ts.resize(n);
  b.eps.resize(n);
  for (int i = 0; i < n; ++i) {
    b.ts[i] = sched.sample_t(rng);
    b.eps[i].resize(dim);
    rng.fill_gaussian(b.eps[i]);
  }
  return b;
}

double sds_potential_eval(const GmTeacher& teacher, const Vec& x, const Matrix& base,
                          const CrnBatch& crn, const NoiseSchedule& sched) {
  require(!crn.ts.empty(), "sds_potential_eval: empty crn batch");
  require(x.size() == static_cast<std::size_t>(teacher.dim()),
          "sds_potential_eval: dim mismatch");
  const int d = teacher.dim();
  double total = 0.0;
  Vec x_t(d);
  for (std::size_t b = 0; b < crn.ts.size(); ++b) {
    const int t = crn.ts[b];
    const auto [a, s, w] = sched.eval(t);
    for (int i = 0; i < d; ++i) x_t[i] = a * x[i] + s * crn.eps[b][i];
    const Vec eps_hat = teacher.predict_eps(x_t, t, base, sched);
    total += w * sq_dist(eps_hat, crn.eps[b]);
  }
  return total / static_cast<double>(crn.ts.size());
}

ProbeReport midpoint_convexity_probe(const std::function<double(const Vec&)>& f,
                                     const std::function<Vec(RngStream&)>& domain_sampler,
                                     std::size_t n_segments, double tol, RngStream rng) {
  require(n_segments >= 1, "midpoint_convexity_probe: need at least one segment");
  require(tol >= 0.0, "midpoint_convexity_probe: tol must be >= 0");
  ProbeReport rep;
  rep.n_segments = n_segments;
  rep.tol = tol;
  for (std::size_t s = 0; s < n_segments; ++s) {
    const Vec a = domain_sampler(rng);
    const Vec b = domain_sampler(rng);
    Vec mid(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) mid[i] = 0.5 * (a[i] + b[i]);
    const double fa = f(a), fb = f(b), fm = f(mid);
    if (!std::isfinite(fa) || !std::isfinite(fb) || !std::isfinite(fm)) {
      throw std::runtime_error("midpoint_convexity_probe: non-finite value at segment " +
                               std::to_string(s));
    }
    const double gap = fm - 0.5 * (fa + fb);
    const double scale = std::max({1.0, std::abs(fa), std::abs(fb), std::abs(fm)});
    if (gap > tol * scale) {
      rep.violations += 1;
      rep.max_violation = std::max(rep.max_violation, gap);
    }
  }
  rep.violation_fraction =
      static_cast<double>(rep.violations) / static_cast<double>(rep.n_segments);
  return rep;
}

FieldProbeResult field_convexity_probe(const GridMlpField& field, std::size_t n_segments,
                                       std::size_t n_points, double tol, RngStream rng,
                                       bool final_layer_only) {
  require(n_segments >= 1 && n_points >= 1, "field_convexity_probe: bad config");
  const auto lay = field.layout();

  std::vector<Vec> points(n_points, Vec(3));
  RngStream point_rng = rng.substream(0);
  for (auto& p : points) {
    for (double& v : p) v = point_rng.next_double() - 0.5;
  }

  // Segment endpoints perturb the base parameters; the perturbed block is the
  // whole vector or just a head's final layer.
  auto perturbed = [&](RngStream& r, bool color_head) {
    GridMlpField probe = field;
    auto params = probe.params();
    if (final_layer_only) {
      const std::size_t off = color_head ? lay.color_last_offset : lay.density_last_offset;
      const std::size_t n = color_head ? lay.color_last_size : lay.density_last_size;
      for (std::size_t i = 0; i < n; ++i) params[off + i] += 2.0 * r.next_gaussian();
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] += 0.5 * r.next_gaussian();
    }
    Vec out(params.begin(), params.end());
    return out;
  };

  auto run = [&](bool color_head, RngStream seg_rng) {
    ProbeReport rep;
    rep.n_segments = n_segments;
    rep.tol = tol;
    GridMlpField work = field;
    auto eval_at = [&](const Vec& theta, const Vec& point, int channel) {
      std::copy(theta.begin(), theta.end(), work.params().begin());
      return color_head ? work.color_at(point)[channel] : work.density_at(point);
    };
    for (std::size_t s = 0; s < n_segments; ++s) {
      const Vec& point = points[seg_rng.next_below(points.size())];
      const int channel =
          color_head ? static_cast<int>(seg_rng.next_below(field.channels())) : 0;
      const Vec a = perturbed(seg_rng, color_head);
      const Vec b = perturbed(seg_rng, color_head);
      Vec mid(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) mid[i] = 0.5 * (a[i] + b[i]);
      const double fa = eval_at(a, point, channel);
      const double fb = eval_at(b, point, channel);
      const double fm = eval_at(mid, point, channel);
      if (!std::isfinite(fa) || !std::isfinite(fb) || !std::isfinite(fm)) {
        throw std::runtime_error("field_convexity_probe: non-finite value at segment " +
                                 std::to_string(s));
      }
      const double gap = fm - 0.5 * (fa + fb);
      const double scale = std::max({1.0, std::abs(fa), std::abs(fb), std::abs(fm)});
      if (gap > tol * scale) {
        rep.violations += 1;
        rep.max_violation = std::max(rep.max_violation, gap);
      }
    }
    rep.violation_fraction =
        static_cast<double>(rep.violations) / static_cast<double>(rep.n_segments);
    return rep;
  };

  FieldProbeResult out;
  out.density = run(false, rng.substream(1));
  out.color = run(true, rng.substream(2));
  return out;
}

}  // namespace sdlab
