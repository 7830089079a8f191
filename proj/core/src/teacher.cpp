#include "sdlab/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace sdlab {

namespace {

// log N(x; mu, v I) for isotropic variance v, given squared distance.
double log_gaussian(double sq, double v, int dim) {
  return -0.5 * (sq / v + dim * std::log(2.0 * std::numbers::pi * v));
}

void softmax_inplace(Vec& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& x : logits) {
    x = std::exp(x - m);
    z += x;
  }
  for (double& x : logits) x /= z;
}

}  // namespace

GmTeacher::GmTeacher(int dim, std::vector<GmComponent> components, double cond_temperature)
    : dim_(dim), comps_(std::move(components)), tau_(cond_temperature) {
  require(dim_ >= 1, "GmTeacher: dim must be >= 1");
  require(!comps_.empty(), "GmTeacher: need at least one component");
  require(tau_ > 0.0, "GmTeacher: temperature must be positive");
  const std::size_t embed = comps_.front().anchor.size();
  for (const auto& c : comps_) {
    require(c.mean.size() == static_cast<std::size_t>(dim_), "GmTeacher: mean dim mismatch");
    require(c.anchor.size() == embed, "GmTeacher: anchor dim mismatch");
    require(c.s >= 0.0, "GmTeacher: component s must be >= 0");
  }
}

Vec GmTeacher::cond_weights_pooled(const Vec& pooled) const {
  require(pooled.size() == static_cast<std::size_t>(embed_dim()),
          "GmTeacher: pooled embedding dim mismatch");
  Vec logits(comps_.size());
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    logits[k] = dot(comps_[k].anchor, pooled) / tau_;
  }
  softmax_inplace(logits);
  return logits;
}

GmTeacher::EpsEval GmTeacher::eval_eps(const Vec& x_t, int t, const Vec& pooled,
                                       const NoiseSchedule& sched) const {
  require(x_t.size() == static_cast<std::size_t>(dim_), "GmTeacher: x_t dim mismatch");
  require(all_finite(x_t), "GmTeacher: x_t must be finite");
  const auto [alpha, sigma, omega] = sched.eval(t);
  const int C = n_components();

  // r = softmax(cond_logit_k + log N_k); everything stays in log space until
  // the final normalization, so no responsibility can underflow to all-zeros.
  Vec log_r(C);
  EpsEval ev;
  ev.pull.assign(static_cast<std::size_t>(C) * dim_, 0.0);
  for (int k = 0; k < C; ++k) {
    const auto& c = comps_[k];
    const double v = alpha * alpha * c.s * c.s + sigma * sigma;
    double sq = 0.0;
    double* pk = ev.pull.data() + static_cast<std::size_t>(k) * dim_;
    for (int i = 0; i < dim_; ++i) {
      const double d = x_t[i] - alpha * c.mean[i];
      sq += d * d;
      pk[i] = d / v;
    }
    log_r[k] = dot(c.anchor, pooled) / tau_ + log_gaussian(sq, v, dim_);
  }
  softmax_inplace(log_r);
  ev.resp = std::move(log_r);
  ev.sigma = sigma;
  ev.eps.assign(dim_, 0.0);
  for (int k = 0; k < C; ++k) {
    axpy(sigma * ev.resp[k], {ev.pull.data() + static_cast<std::size_t>(k) * dim_,
                              static_cast<std::size_t>(dim_)},
         ev.eps);
  }
  return ev;
}

Vec GmTeacher::predict_eps(const Vec& x_t, int t, const Matrix& cond,
                           const NoiseSchedule& sched) const {
  return eval_eps(x_t, t, pool_rows(cond), sched).eps;
}

Vec GmTeacher::predict_eps_vjp_pool(const Vec& x_t, int t, const Matrix& cond,
                                    const NoiseSchedule& sched, const Vec& upstream) const {
  require(upstream.size() == static_cast<std::size_t>(dim_),
          "GmTeacher: upstream dim mismatch");
  const Vec pooled = pool_rows(cond);
  const EpsEval ev = eval_eps(x_t, t, pooled, sched);
  const int C = n_components();

  // d eps / d u_j = sigma * r_j (pull_j - mean_pull), u_j the conditioning
  // logit; then u_j = <anchor_j, pooled> / tau.
  const double up_dot_eps = dot(upstream, ev.eps);  // = sigma * <up, mean_pull>
  Vec g_u(C);
  for (int j = 0; j < C; ++j) {
    const std::span<const double> pj{ev.pull.data() + static_cast<std::size_t>(j) * dim_,
                                     static_cast<std::size_t>(dim_)};
    g_u[j] = ev.resp[j] * (ev.sigma * dot(upstream, pj) - up_dot_eps);
  }
  Vec g_pool(embed_dim(), 0.0);
  for (int j = 0; j < C; ++j) {
    axpy(g_u[j] / tau_, comps_[j].anchor, g_pool);
  }
  return g_pool;
}

Vec GmTeacher::classify(const Vec& x, const Matrix& cond) const {
  require(x.size() == static_cast<std::size_t>(dim_), "GmTeacher::classify: dim mismatch");
  for (const auto& c : comps_) {
    require(c.s > 0.0, "GmTeacher::classify: every component needs s > 0");
  }
  const Vec pooled = pool_rows(cond);
  Vec log_r(comps_.size());
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    const auto& c = comps_[k];
    log_r[k] = dot(c.anchor, pooled) / tau_ + log_gaussian(sq_dist(x, c.mean), c.s * c.s, dim_);
  }
  softmax_inplace(log_r);
  return log_r;
}

Vec GmTeacher::sample(const Matrix& cond, RngStream& rng) const {
  const Vec w = cond_weights(cond);
  const double u = rng.next_double();
  std::size_t k = 0;
  double acc = 0.0;
  for (; k < w.size(); ++k) {
    acc += w[k];
    if (u < acc) break;
  }
  if (k == w.size()) k = w.size() - 1;
  const auto& c = comps_[k];
  Vec x(dim_);
  for (int i = 0; i < dim_; ++i) x[i] = c.mean[i] + c.s * rng.next_gaussian();
  return x;
}

std::vector<Vec> GmTeacher::sample_n(const Matrix& cond, int n, RngStream& rng) const {
  require(n >= 1, "GmTeacher::sample_n: n must be >= 1");
  std::vector<Vec> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(sample(cond, rng));
  return out;
}

Vec gm_eps(const GmTeacher& t, const Vec& x_t, int ts, const Matrix& cond,
           const NoiseSchedule& sched) {
  return t.predict_eps(x_t, ts, cond, sched);
}
Vec gm_classify(const GmTeacher& t, const Vec& x, const Matrix& cond) {
  return t.classify(x, cond);
}
std::vector<Vec> gm_sample(const GmTeacher& t, const Matrix& cond, int n, RngStream& rng) {
  return t.sample_n(cond, n, rng);
}

// ---------------------------------------------------------------------------

ResidualAdapter::ResidualAdapter(int data_dim, int embed_dim, int hidden, RngStream& rng,
                                 int time_feats, int camera_dim)
    : data_dim_(data_dim),
      embed_dim_(embed_dim),
      time_feats_(time_feats),
      camera_dim_(camera_dim),
      net_({data_dim + time_feats + camera_dim + embed_dim, hidden, data_dim},
           Activation::tanh_act) {
  net_.init(rng, /*zero_last_layer=*/true);
}

Vec ResidualAdapter::pack_input(const Vec& x_t, int t, const Vec& camera, const Vec& pooled,
                                const NoiseSchedule& sched) const {
  require(static_cast<int>(x_t.size()) == data_dim_, "ResidualAdapter: x_t dim mismatch");
  require(static_cast<int>(camera.size()) == camera_dim_,
          "ResidualAdapter: camera embedding dim mismatch");
  require(static_cast<int>(pooled.size()) == embed_dim_, "ResidualAdapter: pooled dim mismatch");
  Vec in;
  in.reserve(x_t.size() + time_feats_ + camera.size() + pooled.size());
  in.insert(in.end(), x_t.begin(), x_t.end());
  const Vec tf = time_features(t, sched.n_steps(), time_feats_);
  in.insert(in.end(), tf.begin(), tf.end());
  in.insert(in.end(), camera.begin(), camera.end());
  in.insert(in.end(), pooled.begin(), pooled.end());
  return in;
}

Vec ResidualAdapter::residual(const Vec& x_t, int t, const Vec& camera, const Vec& pooled,
                              const NoiseSchedule& sched) const {
  return net_.forward(pack_input(x_t, t, camera, pooled, sched));
}

void ResidualAdapter::residual_backward(const Vec& x_t, int t, const Vec& camera,
                                        const Vec& pooled, const NoiseSchedule& sched,
                                        const Vec& upstream, std::span<double> param_grad) const {
  Mlp::Trace trace;
  net_.forward(pack_input(x_t, t, camera, pooled, sched), &trace);
  net_.backward(trace, upstream, param_grad);
}

Vec adapter_eps(const Denoiser& base, const ResidualAdapter& adapter, const Vec& x_t, int t,
                const Vec& camera, const Matrix& cond, const NoiseSchedule& sched) {
  require(adapter.data_dim() == base.dim(), "adapter_eps: adapter/teacher dim mismatch");
  Vec eps = base.predict_eps(x_t, t, cond, sched);
  const Vec res = adapter.residual(x_t, t, camera, pool_rows(cond), sched);
  axpy(1.0, res, eps);
  return eps;
}

// ---------------------------------------------------------------------------

MlpTeacher::MlpTeacher(int data_dim, int embed_dim, std::vector<int> hidden, RngStream& rng,
                       int time_feats)
    : data_dim_(data_dim), embed_dim_(embed_dim), time_feats_(time_feats) {
  std::vector<int> widths;
  widths.push_back(data_dim + time_feats + embed_dim);
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(data_dim);
  net_ = Mlp(widths, Activation::tanh_act);
  net_.init(rng, /*zero_last_layer=*/false);
}

Vec MlpTeacher::pack_input(const Vec& x_t, int t, const Vec& pooled,
                           const NoiseSchedule& sched) const {
  require(static_cast<int>(x_t.size()) == data_dim_, "MlpTeacher: x_t dim mismatch");
  require(static_cast<int>(pooled.size()) == embed_dim_, "MlpTeacher: pooled dim mismatch");
  Vec in;
  in.reserve(x_t.size() + time_feats_ + pooled.size());
  in.insert(in.end(), x_t.begin(), x_t.end());
  const Vec tf = time_features(t, sched.n_steps(), time_feats_);
  in.insert(in.end(), tf.begin(), tf.end());
  in.insert(in.end(), pooled.begin(), pooled.end());
  return in;
}

Vec MlpTeacher::predict_eps(const Vec& x_t, int t, const Matrix& cond,
                            const NoiseSchedule& sched) const {
  return net_.forward(pack_input(x_t, t, pool_rows(cond), sched));
}

Vec MlpTeacher::predict_eps_vjp_pool(const Vec& x_t, int t, const Matrix& cond,
                                     const NoiseSchedule& sched, const Vec& upstream) const {
  Mlp::Trace trace;
  net_.forward(pack_input(x_t, t, pool_rows(cond), sched), &trace);
  Vec param_grad(net_.param_count(), 0.0);
  Vec in_grad;
  net_.backward(trace, upstream, param_grad, &in_grad);
  return Vec(in_grad.end() - embed_dim_, in_grad.end());
}

void MlpTeacher::backward_params(const Vec& x_t, int t, const Vec& pooled,
                                 const NoiseSchedule& sched, const Vec& upstream,
                                 std::span<double> param_grad) const {
  Mlp::Trace trace;
  net_.forward(pack_input(x_t, t, pooled, sched), &trace);
  net_.backward(trace, upstream, param_grad);
}

MlpTrainResult mlp_teacher_train(const GmTeacher& source, const Matrix& cond,
                                 const NoiseSchedule& sched, const MlpTrainConfig& cfg) {
  require(cfg.batch >= 1 && cfg.iters >= 0, "mlp_teacher_train: bad config");
  RngStream root(cfg.seed, 0x7e11);
  RngStream init_rng = root.substream(0);
  RngStream data_rng = root.substream(1);
  RngStream holdout_rng = root.substream(2);

  MlpTrainResult out;
  out.teacher = std::make_unique<MlpTeacher>(source.dim(), source.embed_dim(), cfg.hidden,
                                             init_rng);
  MlpTeacher& net = *out.teacher;
  const int d = source.dim();
  const Vec pooled = pool_rows(cond);

  struct Pair {
    Vec x_t;
    Vec eps;
    int t;
  };
  auto draw_pair = [&](RngStream& rng) {
    Pair p;
    p.x_t = source.sample(cond, rng);
    p.t = sched.sample_t(rng);
    p.eps.resize(d);
    rng.fill_gaussian(p.eps);
    const auto [a, s, w] = sched.eval(p.t);
    for (int i = 0; i < d; ++i) p.x_t[i] = a * p.x_t[i] + s * p.eps[i];
    return p;
  };

  std::vector<Pair> holdout;
  holdout.reserve(cfg.holdout);
  for (int i = 0; i < cfg.holdout; ++i) holdout.push_back(draw_pair(holdout_rng));
  auto holdout_loss = [&]() {
    double total = 0.0;
    for (const auto& p : holdout) {
      const Vec eps_hat = net.predict_eps(p.x_t, p.t, cond, sched);
      total += sq_dist(eps_hat, p.eps);
    }
    return total / (static_cast<double>(holdout.size()) * d);
  };

  out.initial_holdout_loss = holdout_loss();
  AdamState opt(net.param_count(), cfg.lr);
  Vec grad(net.param_count());
  out.loss_trace.reserve(cfg.iters);
  for (int it = 0; it < cfg.iters; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const Pair p = draw_pair(data_rng);
      const Vec eps_hat = net.predict_eps(p.x_t, p.t, cond, sched);
      Vec up(d);
      for (int i = 0; i < d; ++i) {
        const double r = eps_hat[i] - p.eps[i];
        loss += r * r;
        up[i] = 2.0 * r / (cfg.batch * d);
      }
      net.backward_params(p.x_t, p.t, pooled, sched, up, grad);
    }
    loss /= static_cast<double>(cfg.batch) * d;
    if (!std::isfinite(loss)) {
      throw std::runtime_error("mlp_teacher_train: non-finite loss at iteration " +
                               std::to_string(it));
    }
    out.loss_trace.push_back(loss);
    adam_step(opt, net.params(), grad);
  }
  out.final_holdout_loss = holdout_loss();
  return out;
}

// ---------------------------------------------------------------------------

Vec ddim_sample(const Denoiser& d, const Matrix& cond, int steps, RngStream& rng,
                const NoiseSchedule& sched) {
  require(steps >= 1, "ddim_sample: steps must be >= 1");
  const int n = sched.n_steps();
  Vec x(d.dim());
  rng.fill_gaussian(x);

  // Descending timestep grid from n to 1, then a final jump to t=0
  // (alpha=1, sigma=0), i.e. the last x0_hat is the sample.
  std::vector<int> grid(steps);
  for (int i = 0; i < steps; ++i) {
    grid[i] = std::max(1, n - static_cast<int>(std::llround(static_cast<double>(i) * n / steps)));
  }
  for (int i = 0; i < steps; ++i) {
    const int t = grid[i];
    const auto [a, s, w] = sched.eval(t);
    const Vec eps_hat = d.predict_eps(x, t, cond, sched);
    Vec x0(d.dim());
    for (int j = 0; j < d.dim(); ++j) x0[j] = (x[j] - s * eps_hat[j]) / a;
    const bool last = i + 1 == steps;
    const double an = last ? 1.0 : sched.eval(grid[i + 1]).alpha;
    const double sn = last ? 0.0 : sched.eval(grid[i + 1]).sigma;
    for (int j = 0; j < d.dim(); ++j) x[j] = an * x0[j] + sn * eps_hat[j];
    if (!all_finite(x)) {
      throw std::runtime_error("ddim_sample: non-finite state after timestep " +
                               std::to_string(t));
    }
  }
  return x;
}

}  // namespace sdlab
