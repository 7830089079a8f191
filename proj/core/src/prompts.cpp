#include "sdlab/prompts.hpp"

#include <cmath>

namespace sdlab {

Matrix concat_prompt(const PromptSpec& spec, bool include_hiper, bool include_shared) {
  require(!spec.base.empty(), "concat_prompt: base prompt is empty");
  if (include_hiper) require(spec.hiper.has_value(), "concat_prompt: hiper segment absent");
  if (include_shared) require(spec.shared.has_value(), "concat_prompt: shared segment absent");
  std::vector<const Matrix*> parts{&spec.base};
  if (include_hiper) parts.push_back(&*spec.hiper);
  if (include_shared) parts.push_back(&*spec.shared);
  return vstack(parts);
}

namespace {

struct CrnPair {
  int t;
  Vec eps;
};

std::vector<CrnPair> draw_pairs(int n, int dim, RngStream& rng, const NoiseSchedule& sched) {
  std::vector<CrnPair> out(n);
  for (auto& p : out) {
    p.t = sched.sample_t(rng);
    p.eps.resize(dim);
    rng.fill_gaussian(p.eps);
  }
  return out;
}

// omega(t) * |eps_hat - eps|^2 averaged over the batch, at prompt = [base; h].
double crn_loss(const Denoiser& teacher, const Vec& x_ref, const Matrix& prompt,
                const std::vector<CrnPair>& batch, const NoiseSchedule& sched) {
  const int d = teacher.dim();
  double total = 0.0;
  Vec x_t(d);
  for (const auto& p : batch) {
    const auto [a, s, w] = sched.eval(p.t);
    for (int i = 0; i < d; ++i) x_t[i] = a * x_ref[i] + s * p.eps[i];
    const Vec eps_hat = teacher.predict_eps(x_t, p.t, prompt, sched);
    total += w * sq_dist(eps_hat, p.eps);
  }
  return total / batch.size();
}

}  // namespace

InversionResult invert_hiper(const Denoiser& teacher, const Vec& x_ref, const Matrix& base,
                             const InversionConfig& cfg, RngStream rng,
                             const NoiseSchedule& sched) {
  require(cfg.iters >= 0 && cfg.l2 >= 1 && cfg.mc_batch >= 1, "invert_hiper: bad config");
  require(all_finite(x_ref), "invert_hiper: reference image must be finite");
  require(x_ref.size() == static_cast<std::size_t>(teacher.dim()),
          "invert_hiper: reference dim mismatch");
  const int d = teacher.dim();
  const std::size_t dd = base.cols;

  InversionResult out;
  out.tokens = Matrix(cfg.l2, dd);
  RngStream init_rng = rng.substream(0);
  RngStream loop_rng = rng.substream(1);
  RngStream crn_rng = rng.substream(2);
  for (double& v : out.tokens.data) v = cfg.init_scale * init_rng.next_gaussian();

  PromptSpec spec;
  spec.base = base;
  spec.hiper = out.tokens;

  // Fixed evaluation batch so start/end losses are comparable.
  const auto crn = draw_pairs(cfg.mc_batch * 4, d, crn_rng, sched);
  {
    const Matrix prompt = concat_prompt(spec, true, false);
    out.initial_crn_loss = crn_loss(teacher, x_ref, prompt, crn, sched);
  }

  const std::size_t total_rows = base.rows + out.tokens.rows;
  AdamState opt(out.tokens.data.size(), cfg.lr);
  Vec x_t(d), token_grad(out.tokens.data.size());
  out.loss_trace.reserve(cfg.iters);

  for (int it = 0; it < cfg.iters; ++it) {
    spec.hiper = out.tokens;
    const Matrix prompt = concat_prompt(spec, true, false);
    const auto batch = draw_pairs(cfg.mc_batch, d, loop_rng, sched);
    Vec g_pool(dd, 0.0);
    double loss = 0.0;
    for (const auto& p : batch) {
      const auto [a, s, w] = sched.eval(p.t);
      for (int i = 0; i < d; ++i) x_t[i] = a * x_ref[i] + s * p.eps[i];
      const Vec eps_hat = teacher.predict_eps(x_t, p.t, prompt, sched);
      loss += w * sq_dist(eps_hat, p.eps);
      Vec up(d);
      for (int i = 0; i < d; ++i) up[i] = 2.0 * w * (eps_hat[i] - p.eps[i]) / cfg.mc_batch;
      axpy(1.0, teacher.predict_eps_vjp_pool(x_t, p.t, prompt, sched, up), g_pool);
    }
    loss /= batch.size();
    if (!std::isfinite(loss)) {
      throw std::runtime_error("invert_hiper: non-finite loss at iteration " + std::to_string(it));
    }
    out.loss_trace.push_back(loss);

    // pool(prompt) = mean over all rows, so every token row sees dL/dpool / L.
    std::fill(token_grad.begin(), token_grad.end(), 0.0);
    for (int r = 0; r < cfg.l2; ++r) {
      for (std::size_t cidx = 0; cidx < dd; ++cidx) {
        token_grad[r * dd + cidx] = g_pool[cidx] / static_cast<double>(total_rows);
      }
    }
    adam_step(opt, out.tokens.data, token_grad);
  }

  spec.hiper = out.tokens;
  const Matrix prompt = concat_prompt(spec, true, false);
  out.final_crn_loss = crn_loss(teacher, x_ref, prompt, crn, sched);
  return out;
}

ReferenceSet sample_references(const GmTeacher& teacher, const Matrix& base, int k,
                               RngStream rng) {
  require(k >= 1, "sample_references: K must be >= 1");
  ReferenceSet out;
  out.seed = rng.seed();
  out.images = teacher.sample_n(base, k, rng);
  out.labels.reserve(k);
  bool classifiable = true;
  for (const auto& c : teacher.components()) classifiable = classifiable && c.s > 0.0;
  for (const auto& img : out.images) {
    if (!classifiable) {
      out.labels.push_back(-1);
      continue;
    }
    const Vec post = teacher.classify(img, base);
    out.labels.push_back(static_cast<int>(
        std::max_element(post.begin(), post.end()) - post.begin()));
  }
  return out;
}

}  // namespace sdlab
