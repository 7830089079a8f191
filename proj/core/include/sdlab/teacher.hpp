#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/mlp.hpp"
#include "sdlab/numerics.hpp"

namespace sdlab {

// Anything that predicts the noise added to an image, conditioned on a
// token-embedding prompt. Conditioning always enters through pool_rows().
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int dim() const = 0;

  virtual Vec predict_eps(const Vec& x_t, int t, const Matrix& cond,
                          const NoiseSchedule& sched) const = 0;

  // Reverse-mode product: given dL/deps_hat, return dL/dpool(cond).
  // Needed by token inversion and shared-token updates.
  virtual Vec predict_eps_vjp_pool(const Vec& x_t, int t, const Matrix& cond,
                                   const NoiseSchedule& sched, const Vec& upstream) const = 0;
};

// ---------------------------------------------------------------------------
// Embedding-conditioned Gaussian-mixture prior with closed-form denoiser,
// exact component posterior, and exact sampling.
//
// Conditional mixture weights: w_k(e) = softmax_k(<anchor_k, pool(e)> / tau).
// At timestep t the marginal of component k is N(alpha_t mu_k, v_k I) with
// v_k = alpha_t^2 s_k^2 + sigma_t^2, and the optimal denoiser is
//   eps_hat = sigma_t * sum_k r_k (x_t - alpha_t mu_k) / v_k,
// r_k the (log-space) posterior responsibilities. This equals
// -sigma_t * grad_x log p_t(x_t | e) exactly.
// ---------------------------------------------------------------------------
struct GmComponent {
  Vec mean;      // in R^dim
  double s = 0;  // per-component standard deviation (isotropic)
  Vec anchor;    // in embedding space R^D
};

class GmTeacher final : public Denoiser {
 public:
  GmTeacher(int dim, std::vector<GmComponent> components, double cond_temperature);

  int dim() const override { return dim_; }
  int n_components() const { return static_cast<int>(comps_.size()); }
  int embed_dim() const { return static_cast<int>(comps_.front().anchor.size()); }
  double temperature() const { return tau_; }
  const std::vector<GmComponent>& components() const { return comps_; }

  // softmax(<anchor_k, pooled> / tau)
  Vec cond_weights_pooled(const Vec& pooled) const;
  Vec cond_weights(const Matrix& cond) const { return cond_weights_pooled(pool_rows(cond)); }

  Vec predict_eps(const Vec& x_t, int t, const Matrix& cond,
                  const NoiseSchedule& sched) const override;
  Vec predict_eps_vjp_pool(const Vec& x_t, int t, const Matrix& cond, const NoiseSchedule& sched,
                           const Vec& upstream) const override;

  // Exact Bayes posterior over components at t=0. Requires all s_k > 0.
  Vec classify(const Vec& x, const Matrix& cond) const;

  Vec sample(const Matrix& cond, RngStream& rng) const;
  std::vector<Vec> sample_n(const Matrix& cond, int n, RngStream& rng) const;

 private:
  struct EpsEval {
    Vec resp;        // responsibilities r_k
    Vec pull;        // flattened per-component (x_t - alpha mu_k) / v_k
    Vec eps;         // sigma_t * sum_k r_k pull_k
    double sigma;
  };
  EpsEval eval_eps(const Vec& x_t, int t, const Vec& pooled, const NoiseSchedule& sched) const;

  int dim_;
  std::vector<GmComponent> comps_;
  double tau_;
};

Vec gm_eps(const GmTeacher& t, const Vec& x_t, int ts, const Matrix& cond,
           const NoiseSchedule& sched);
Vec gm_classify(const GmTeacher& t, const Vec& x, const Matrix& cond);
std::vector<Vec> gm_sample(const GmTeacher& t, const Matrix& cond, int n, RngStream& rng);

// ---------------------------------------------------------------------------
// Residual adapter: the domain-adapted denoiser eps_phi. A small network maps
// (x_t, time features, camera embedding, pooled prompt) to a residual that is
// added to the base teacher's prediction. The final layer starts at zero so
// the adapter is initially exactly the base teacher.
// ---------------------------------------------------------------------------
class ResidualAdapter {
 public:
  ResidualAdapter(int data_dim, int embed_dim, int hidden, RngStream& rng, int time_feats = 8,
                  int camera_dim = 4);

  std::size_t param_count() const { return net_.param_count(); }
  std::span<double> params() { return net_.params(); }
  std::span<const double> params() const { return net_.params(); }

  Vec residual(const Vec& x_t, int t, const Vec& camera, const Vec& pooled,
               const NoiseSchedule& sched) const;

  // Accumulate dL/dparams for upstream = dL/dresidual.
  void residual_backward(const Vec& x_t, int t, const Vec& camera, const Vec& pooled,
                         const NoiseSchedule& sched, const Vec& upstream,
                         std::span<double> param_grad) const;

  int data_dim() const { return data_dim_; }

 private:
  Vec pack_input(const Vec& x_t, int t, const Vec& camera, const Vec& pooled,
                 const NoiseSchedule& sched) const;

  int data_dim_, embed_dim_, time_feats_, camera_dim_;
  Mlp net_;
};

// eps_phi(x_t, t, c, y) = base prediction + adapter residual.
Vec adapter_eps(const Denoiser& base, const ResidualAdapter& adapter, const Vec& x_t, int t,
                const Vec& camera, const Matrix& cond, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Trained stand-in denoiser, so nothing downstream depends on closed forms.
// ---------------------------------------------------------------------------
class MlpTeacher final : public Denoiser {
 public:
  MlpTeacher(int data_dim, int embed_dim, std::vector<int> hidden, RngStream& rng,
             int time_feats = 8);

  int dim() const override { return data_dim_; }
  std::size_t param_count() const { return net_.param_count(); }
  std::span<double> params() { return net_.params(); }

  Vec predict_eps(const Vec& x_t, int t, const Matrix& cond,
                  const NoiseSchedule& sched) const override;
  Vec predict_eps_vjp_pool(const Vec& x_t, int t, const Matrix& cond, const NoiseSchedule& sched,
                           const Vec& upstream) const override;

  void backward_params(const Vec& x_t, int t, const Vec& pooled, const NoiseSchedule& sched,
                       const Vec& upstream, std::span<double> param_grad) const;

 private:
  Vec pack_input(const Vec& x_t, int t, const Vec& pooled, const NoiseSchedule& sched) const;

  int data_dim_, embed_dim_, time_feats_;
  Mlp net_;
};

struct MlpTrainConfig {
  int iters = 4000;
  int batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 1;
  std::vector<int> hidden = {64, 64};
  int holdout = 256;  // held-out pairs for the loss-decrease contract
};

struct MlpTrainResult {
  std::unique_ptr<MlpTeacher> teacher;
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
  Vec loss_trace;
};

// Trains a denoiser on samples from `source` conditioned on `cond`.
// Deterministic given the config seed; throws std::runtime_error (with the
// iteration index) if the loss goes non-finite.
MlpTrainResult mlp_teacher_train(const GmTeacher& source, const Matrix& cond,
                                 const NoiseSchedule& sched, const MlpTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Deterministic DDIM sampling from any denoiser:
//   x0_hat = (x_t - sigma_t eps_hat) / alpha_t;  x_t' = alpha_t' x0_hat + sigma_t' eps_hat.
// Throws std::runtime_error naming the offending timestep on non-finite state.
// ---------------------------------------------------------------------------
Vec ddim_sample(const Denoiser& d, const Matrix& cond, int steps, RngStream& rng,
                const NoiseSchedule& sched);

}  // namespace sdlab
