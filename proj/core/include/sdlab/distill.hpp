#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/io.hpp"
#include "sdlab/metrics.hpp"
#include "sdlab/numerics.hpp"
#include "sdlab/prompts.hpp"
#include "sdlab/scenes.hpp"
#include "sdlab/teacher.hpp"

namespace sdlab {

enum class Method { sds, vsd, tsd };
enum class Augmentation { none, hiper, random_tokens };
enum class AdapterKind { residual, shared_tokens };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(Augmentation a);
Augmentation augmentation_from_string(const std::string& s);
std::string to_string(AdapterKind a);
AdapterKind adapter_from_string(const std::string& s);

struct SceneSpec {
  std::string kind = "image";  // image | voxel | grid_mlp
  int height = 16, width = 16, channels = 3;
  int voxels = 16;             // voxel / grid_mlp resolution
  int features = 4, hidden = 8;  // grid_mlp
  int ray_samples = 32;
  double init_scale = 0.1;
  int jitter_max = 1;  // 2-D camera jitter bound
};

struct DistillConfig {
  Method method = Method::sds;
  int k = 6;
  int iters = 5000;
  double particle_lr = 1e-2;
  double adapter_lr = 1e-3;  // residual adapter or shared tokens
  Augmentation augmentation = Augmentation::none;
  AdapterKind adapter = AdapterKind::residual;
  std::uint64_t seed = 1;
  int log_every = 500;
  int eval_views = 24;
  FeatureExtractor extractor = FeatureExtractor::gm_log_posterior;
  int threads = 1;
  SceneSpec scene;
  ScheduleConfig schedule;
  int adapter_hidden = 32;
  int aug_tokens = 5;  // rows per random-token block
  int l3 = 8;          // shared learnable tokens
  bool adapter_fresh_draw = false;  // adapter update redraws (t, eps, c)
  // Diagnostic: run the vsd path with the adapter term pinned to the drawn
  // noise, which reduces the update to sds exactly.
  bool adapter_disabled = false;
  // Paths echoed into config.json / manifest; loaded by the caller.
  std::string teacher_path, prompt_path, tokens_dir;
};

// Throws std::invalid_argument naming the offending field.
void validate_config(const DistillConfig& cfg);
DistillConfig distill_config_from_json(const io::json& j);
io::json distill_config_to_json(const DistillConfig& cfg);

CameraConfig camera_config_for(const DistillConfig& cfg);
RenderConfig render_config_for(const DistillConfig& cfg);
std::unique_ptr<Scene> build_scene(const SceneSpec& spec, RngStream rng);

// ---------------------------------------------------------------------------
// Single-iteration steps. Draw order per iteration: camera, t, eps. The
// teacher's input-Jacobian is never differentiated through; gradients reach
// the particle only via the renderer pullback.
// ---------------------------------------------------------------------------
struct StepStats {
  int t = 0;
  double eps_hat_norm = 0.0;
  double grad_norm = 0.0;
};

StepStats sds_step(Scene& scene, AdamState& opt, const Denoiser& teacher, const Matrix& prompt,
                   RngStream& rng, const NoiseSchedule& sched, const CameraConfig& ccfg,
                   const RenderConfig& rcfg);

// Particle update with eps_SD - eps_phi, then an adapter update minimizing
// the weighted denoising loss on the same render (common random numbers by
// default). adapter == nullptr pins eps_phi to the drawn noise: the exact
// sds special case, sharing this code path.
StepStats vsd_step(Scene& scene, AdamState& opt, ResidualAdapter* adapter, AdamState* adapter_opt,
                   const Denoiser& teacher, const Matrix& prompt, RngStream& rng,
                   const NoiseSchedule& sched, const CameraConfig& ccfg, const RenderConfig& rcfg,
                   bool fresh_draw = false);

// Particle update with eps_SD(.., [y;h]) - eps_SD(.., [y;h;phi]), then a
// shared-token update. h is never touched; phi is shared across particles.
StepStats tsd_step(Scene& scene, AdamState& opt, const Matrix& base, const Matrix& hiper,
                   Matrix& phi, AdamState& phi_opt, const Denoiser& teacher, RngStream& rng,
                   const NoiseSchedule& sched, const CameraConfig& ccfg, const RenderConfig& rcfg);

// One Adam step on the adapter for omega(t) |eps_phi - eps|^2 at fixed x_t;
// returns the pre-update loss. Used inside vsd_step; public so the adapter
// can be trained or probed on a frozen batch.
double adapter_denoise_update(ResidualAdapter& adapter, AdamState& opt, const Denoiser& teacher,
                              const Matrix& prompt, const Vec& x_t, int t, const Vec& cam4,
                              const Vec& eps, const NoiseSchedule& sched);

// One Adam step on the shared tokens for omega(t) |eps_hat([y;h;phi]) - eps|^2
// at fixed x_t; returns the pre-update loss.
double shared_token_update(Matrix& phi, AdamState& opt, const Denoiser& teacher,
                           const Matrix& base, const Matrix& hiper, const Vec& x_t, int t,
                           const Vec& eps, const NoiseSchedule& sched);

// K frozen random-token blocks [y; z_i].
std::vector<Matrix> random_token_augmentation(const Matrix& base, int k, int rows,
                                              RngStream rng);

// ---------------------------------------------------------------------------
// Full run driver.
// ---------------------------------------------------------------------------
struct RunInputs {
  GmTeacher teacher;
  Matrix base_prompt;
  std::vector<Matrix> hiper_tokens;  // K entries when method == tsd
};

struct RunArtifacts {
  std::filesystem::path dir;
  double mean_iter_ms = 0.0;
  std::size_t particle_param_count = 0;
  std::size_t adapter_param_count = 0;  // residual adapter or phi
  MetricReport final_report;
};

// Executes the configured loop; writes config.json, checkpoints/iter_<n>/,
// metrics.csv, renders/iter_<n>/particle_<i>_view_<v>.ppm and manifest.json
// under out_dir. Checkpoints carry full optimizer and RNG state, so an
// interrupted run restarts from the last one.
RunArtifacts run_distillation(const DistillConfig& cfg, const RunInputs& in,
                              const std::filesystem::path& out_dir);

// Continue an interrupted run from its newest checkpoint; the completed run
// is bit-identical to one that was never interrupted.
RunArtifacts resume_run(const std::filesystem::path& run_dir);

// Re-derive RunInputs from a run directory's config.json (paths resolved
// relative to the directory the config was loaded from).
RunInputs load_run_inputs(const DistillConfig& cfg, const std::filesystem::path& base_dir);

}  // namespace sdlab
