#include "sdlab/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "sdlab/threading.hpp"
#include "sdlab/version.hpp"

namespace sdlab {

namespace fs = std::filesystem;
using io::json;

// ----------------------------- enum strings -------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::sds: return "sds";
    case Method::vsd: return "vsd";
    case Method::tsd: return "tsd";
  }
  return "?";
}
Method method_from_string(const std::string& s) {
  if (s == "sds") return Method::sds;
  if (s == "vsd") return Method::vsd;
  if (s == "tsd") return Method::tsd;
  throw std::invalid_argument("method must be one of sds|vsd|tsd, got '" + s + "'");
}
std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::hiper: return "hiper";
    case Augmentation::random_tokens: return "random-tokens";
  }
  return "?";
}
Augmentation augmentation_from_string(const std::string& s) {
  if (s == "none") return Augmentation::none;
  if (s == "hiper") return Augmentation::hiper;
  if (s == "random-tokens") return Augmentation::random_tokens;
  throw std::invalid_argument("augmentation must be none|hiper|random-tokens, got '" + s + "'");
}
std::string to_string(AdapterKind a) {
  switch (a) {
    case AdapterKind::residual: return "residual";
    case AdapterKind::shared_tokens: return "shared-tokens";
  }
  return "?";
}
AdapterKind adapter_from_string(const std::string& s) {
  if (s == "residual") return AdapterKind::residual;
  if (s == "shared-tokens") return AdapterKind::shared_tokens;
  throw std::invalid_argument("adapter must be residual|shared-tokens, got '" + s + "'");
}

namespace {

std::string omega_to_string(OmegaKind k) {
  switch (k) {
    case OmegaKind::sigma_sq: return "sigma2";
    case OmegaKind::constant: return "constant";
    case OmegaKind::zero: return "zero";
  }
  return "?";
}
OmegaKind omega_from_string(const std::string& s) {
  if (s == "sigma2") return OmegaKind::sigma_sq;
  if (s == "constant") return OmegaKind::constant;
  if (s == "zero") return OmegaKind::zero;
  throw std::invalid_argument("schedule.omega must be sigma2|constant|zero, got '" + s + "'");
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) {
      throw std::invalid_argument("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

// ----------------------------- config -------------------------------------

void validate_config(const DistillConfig& cfg) {
  require(cfg.k >= 1, "config: k must be >= 1");
  require(cfg.iters >= 0, "config: iters must be >= 0");
  require(cfg.log_every >= 1, "config: log_every must be >= 1");
  require(cfg.eval_views >= 1, "config: eval_views must be >= 1");
  require(cfg.particle_lr > 0.0, "config: particle_lr must be positive");
  require(cfg.adapter_lr >= 0.0, "config: adapter_lr must be >= 0");
  require(cfg.l3 >= 1, "config: l3 must be >= 1");
  require(cfg.aug_tokens >= 1, "config: aug_tokens must be >= 1");
  require(cfg.adapter_hidden >= 1, "config: adapter_hidden must be >= 1");
  if (cfg.method == Method::tsd) {
    require(cfg.augmentation == Augmentation::hiper,
            "config: tsd requires augmentation = hiper");
    require(cfg.adapter == AdapterKind::shared_tokens,
            "config: tsd requires adapter = shared-tokens");
  }
  if (cfg.method == Method::vsd) {
    require(cfg.adapter == AdapterKind::residual, "config: vsd requires adapter = residual");
  }
  if (cfg.adapter_disabled) {
    require(cfg.method == Method::vsd, "config: adapter_disabled applies to vsd only");
  }
  require(cfg.scene.kind == "image" || cfg.scene.kind == "voxel" || cfg.scene.kind == "grid_mlp",
          "config: scene.kind must be image|voxel|grid_mlp");
  require(cfg.scene.channels == 1 || cfg.scene.channels == 3,
          "config: scene.channels must be 1 or 3");
  require(cfg.scene.height >= 1 && cfg.scene.width >= 1, "config: scene size must be positive");
  require(cfg.scene.jitter_max >= 0, "config: scene.jitter_max must be >= 0");
}

DistillConfig distill_config_from_json(const json& j) {
  reject_unknown_keys(j, {"method", "k", "iters", "particle_lr", "adapter_lr", "augmentation",
                          "adapter", "seed", "log_every", "eval_views", "extractor", "threads",
                          "scene", "schedule", "adapter_hidden", "aug_tokens", "l3",
                          "adapter_fresh_draw", "adapter_disabled", "teacher", "prompt",
                          "tokens_dir"},
                      "run config");
  DistillConfig cfg;
  try {
    cfg.method = method_from_string(j.at("method").get<std::string>());
    cfg.k = j.value("k", cfg.k);
    cfg.iters = j.value("iters", cfg.iters);
    cfg.particle_lr = j.value("particle_lr", cfg.particle_lr);
    cfg.adapter_lr = j.value("adapter_lr", cfg.adapter_lr);
    if (j.contains("augmentation")) {
      cfg.augmentation = augmentation_from_string(j.at("augmentation").get<std::string>());
    } else if (cfg.method == Method::tsd) {
      cfg.augmentation = Augmentation::hiper;
    }
    if (j.contains("adapter")) {
      cfg.adapter = adapter_from_string(j.at("adapter").get<std::string>());
    } else if (cfg.method == Method::tsd) {
      cfg.adapter = AdapterKind::shared_tokens;
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.log_every = j.value("log_every", cfg.log_every);
    cfg.eval_views = j.value("eval_views", cfg.eval_views);
    if (j.contains("extractor")) {
      cfg.extractor = extractor_from_id(j.at("extractor").get<std::string>());
    }
    cfg.threads = j.value("threads", cfg.threads);
    cfg.adapter_hidden = j.value("adapter_hidden", cfg.adapter_hidden);
    cfg.aug_tokens = j.value("aug_tokens", cfg.aug_tokens);
    cfg.l3 = j.value("l3", cfg.l3);
    cfg.adapter_fresh_draw = j.value("adapter_fresh_draw", cfg.adapter_fresh_draw);
    cfg.adapter_disabled = j.value("adapter_disabled", cfg.adapter_disabled);
    cfg.teacher_path = j.value("teacher", std::string());
    cfg.prompt_path = j.value("prompt", std::string());
    cfg.tokens_dir = j.value("tokens_dir", std::string());
    if (j.contains("scene")) {
      const json& js = j.at("scene");
      reject_unknown_keys(js, {"kind", "height", "width", "channels", "voxels", "features",
                               "hidden", "ray_samples", "init_scale", "jitter_max"},
                          "scene config");
      cfg.scene.kind = js.value("kind", cfg.scene.kind);
      cfg.scene.height = js.value("height", cfg.scene.height);
      cfg.scene.width = js.value("width", cfg.scene.width);
      cfg.scene.channels = js.value("channels", cfg.scene.channels);
      cfg.scene.voxels = js.value("voxels", cfg.scene.voxels);
      cfg.scene.features = js.value("features", cfg.scene.features);
      cfg.scene.hidden = js.value("hidden", cfg.scene.hidden);
      cfg.scene.ray_samples = js.value("ray_samples", cfg.scene.ray_samples);
      cfg.scene.init_scale = js.value("init_scale", cfg.scene.init_scale);
      cfg.scene.jitter_max = js.value("jitter_max", cfg.scene.jitter_max);
    }
    if (j.contains("schedule")) {
      const json& js = j.at("schedule");
      reject_unknown_keys(js, {"n_steps", "beta_min", "beta_max", "t_min", "t_max", "omega"},
                          "schedule config");
      cfg.schedule.n_steps = js.value("n_steps", cfg.schedule.n_steps);
      cfg.schedule.beta_min = js.value("beta_min", cfg.schedule.beta_min);
      cfg.schedule.beta_max = js.value("beta_max", cfg.schedule.beta_max);
      cfg.schedule.t_min = js.value("t_min", cfg.schedule.t_min);
      cfg.schedule.t_max = js.value("t_max", cfg.schedule.t_max);
      if (js.contains("omega")) cfg.schedule.omega = omega_from_string(js.at("omega"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("run config: ") + e.what());
  }
  validate_config(cfg);
  return cfg;
}

json distill_config_to_json(const DistillConfig& cfg) {
  json j;
  j["method"] = to_string(cfg.method);
  j["k"] = cfg.k;
  j["iters"] = cfg.iters;
  j["particle_lr"] = cfg.particle_lr;
  j["adapter_lr"] = cfg.adapter_lr;
  j["augmentation"] = to_string(cfg.augmentation);
  j["adapter"] = to_string(cfg.adapter);
  j["seed"] = cfg.seed;
  j["log_every"] = cfg.log_every;
  j["eval_views"] = cfg.eval_views;
  j["extractor"] = extractor_id(cfg.extractor);
  j["threads"] = cfg.threads;
  j["scene"] = {{"kind", cfg.scene.kind},       {"height", cfg.scene.height},
                {"width", cfg.scene.width},     {"channels", cfg.scene.channels},
                {"voxels", cfg.scene.voxels},   {"features", cfg.scene.features},
                {"hidden", cfg.scene.hidden},   {"ray_samples", cfg.scene.ray_samples},
                {"init_scale", cfg.scene.init_scale}, {"jitter_max", cfg.scene.jitter_max}};
  j["schedule"] = {{"n_steps", cfg.schedule.n_steps}, {"beta_min", cfg.schedule.beta_min},
                   {"beta_max", cfg.schedule.beta_max}, {"t_min", cfg.schedule.t_min},
                   {"t_max", cfg.schedule.t_max}, {"omega", omega_to_string(cfg.schedule.omega)}};
  j["adapter_hidden"] = cfg.adapter_hidden;
  j["aug_tokens"] = cfg.aug_tokens;
  j["l3"] = cfg.l3;
  j["adapter_fresh_draw"] = cfg.adapter_fresh_draw;
  j["adapter_disabled"] = cfg.adapter_disabled;
  j["teacher"] = cfg.teacher_path;
  j["prompt"] = cfg.prompt_path;
  j["tokens_dir"] = cfg.tokens_dir;
  return j;
}

CameraConfig camera_config_for(const DistillConfig& cfg) {
  CameraConfig c;
  c.planar = cfg.scene.kind == "image";
  c.jitter_max = cfg.scene.jitter_max;
  return c;
}

RenderConfig render_config_for(const DistillConfig& cfg) {
  RenderConfig r;
  r.width = cfg.scene.width;
  r.height = cfg.scene.height;
  r.ray_samples = cfg.scene.ray_samples;
  return r;
}

std::unique_ptr<Scene> build_scene(const SceneSpec& spec, RngStream rng) {
  if (spec.kind == "image") {
    auto sc = std::make_unique<ImageScene>(spec.height, spec.width, spec.channels);
    for (double& v : sc->params()) v = spec.init_scale * rng.next_gaussian();
    return sc;
  }
  if (spec.kind == "voxel") {
    auto sc = std::make_unique<VoxelScene>(spec.voxels, spec.channels);
    for (double& v : sc->params()) v = spec.init_scale * rng.next_gaussian();
    return sc;
  }
  if (spec.kind == "grid_mlp") {
    auto sc = std::make_unique<GridMlpField>(spec.voxels, spec.features, spec.hidden,
                                             spec.channels);
    sc->init(rng, spec.init_scale);
    return sc;
  }
  throw std::invalid_argument("build_scene: unknown kind '" + spec.kind + "'");
}

// ----------------------------- steps --------------------------------------

namespace {

struct IterDraw {
  Camera cam;
  Vec image;
  Vec x_t;
  Vec eps;
  int t = 0;
  ScheduleCoeffs co{};
};

IterDraw draw_and_render(const Scene& scene, RngStream& rng, const NoiseSchedule& sched,
                         const CameraConfig& ccfg, const RenderConfig& rcfg) {
  IterDraw d;
  d.cam = sample_camera(rng, ccfg);
  d.image = scene.render(d.cam, rcfg);
  d.t = sched.sample_t(rng);
  d.eps.resize(d.image.size());
  rng.fill_gaussian(d.eps);
  d.co = sched.eval(d.t);
  d.x_t.resize(d.image.size());
  for (std::size_t i = 0; i < d.image.size(); ++i) {
    d.x_t[i] = d.co.alpha * d.image[i] + d.co.sigma * d.eps[i];
  }
  return d;
}

StepStats apply_particle_grad(Scene& scene, AdamState& opt, const IterDraw& d, const Vec& g_img,
                              const RenderConfig& rcfg, double eps_hat_norm) {
  if (!all_finite(g_img)) {
    throw std::runtime_error("distill step: non-finite gradient at t=" + std::to_string(d.t) +
                             ", |eps_hat|=" + std::to_string(eps_hat_norm));
  }
  const Vec g_theta = scene.render_vjp(d.cam, rcfg, g_img);
  adam_step(opt, scene.params(), g_theta);
  StepStats st;
  st.t = d.t;
  st.eps_hat_norm = eps_hat_norm;
  st.grad_norm = norm2(g_theta);
  return st;
}

}  // namespace

double adapter_denoise_update(ResidualAdapter& adapter, AdamState& opt, const Denoiser& teacher,
                              const Matrix& prompt, const Vec& x_t, int t, const Vec& cam4,
                              const Vec& eps, const NoiseSchedule& sched) {
  const auto [a, s, w] = sched.eval(t);
  const Vec pooled = pool_rows(prompt);
  Vec eps_phi = teacher.predict_eps(x_t, t, prompt, sched);
  axpy(1.0, adapter.residual(x_t, t, cam4, pooled, sched), eps_phi);
  const int d = teacher.dim();
  double loss = 0.0;
  Vec up(d);
  for (int i = 0; i < d; ++i) {
    const double r = eps_phi[i] - eps[i];
    loss += r * r;
    up[i] = 2.0 * w * r;
  }
  loss *= w;
  Vec grad(adapter.param_count(), 0.0);
  adapter.residual_backward(x_t, t, cam4, pooled, sched, up, grad);
  adam_step(opt, adapter.params(), grad);
  return loss;
}

double shared_token_update(Matrix& phi, AdamState& opt, const Denoiser& teacher,
                           const Matrix& base, const Matrix& hiper, const Vec& x_t, int t,
                           const Vec& eps, const NoiseSchedule& sched) {
  const auto [a, s, w] = sched.eval(t);
  const Matrix prompt = vstack({&base, &hiper, &phi});
  const Vec eps_hat = teacher.predict_eps(x_t, t, prompt, sched);
  const int d = teacher.dim();
  double loss = 0.0;
  Vec up(d);
  for (int i = 0; i < d; ++i) {
    const double r = eps_hat[i] - eps[i];
    loss += r * r;
    up[i] = 2.0 * w * r;
  }
  loss *= w;
  const Vec g_pool = teacher.predict_eps_vjp_pool(x_t, t, prompt, sched, up);
  const double inv_rows = 1.0 / static_cast<double>(prompt.rows);
  Vec grad(phi.data.size());
  for (std::size_t r = 0; r < phi.rows; ++r) {
    for (std::size_t c = 0; c < phi.cols; ++c) grad[r * phi.cols + c] = g_pool[c] * inv_rows;
  }
  adam_step(opt, phi.data, grad);
  return loss;
}

StepStats sds_step(Scene& scene, AdamState& opt, const Denoiser& teacher, const Matrix& prompt,
                   RngStream& rng, const NoiseSchedule& sched, const CameraConfig& ccfg,
                   const RenderConfig& rcfg) {
  return vsd_step(scene, opt, nullptr, nullptr, teacher, prompt, rng, sched, ccfg, rcfg);
}

StepStats vsd_step(Scene& scene, AdamState& opt, ResidualAdapter* adapter, AdamState* adapter_opt,
                   const Denoiser& teacher, const Matrix& prompt, RngStream& rng,
                   const NoiseSchedule& sched, const CameraConfig& ccfg, const RenderConfig& rcfg,
                   bool fresh_draw) {
  const IterDraw d = draw_and_render(scene, rng, sched, ccfg, rcfg);
  const Vec eps_hat = teacher.predict_eps(d.x_t, d.t, prompt, sched);
  const Vec cam4 = camera_embedding(d.cam, ccfg.planar);

  // eps_phi: domain-adapted prediction, or the drawn noise itself when no
  // adapter is present (which makes this exactly the sds update).
  Vec eps_ref;
  if (adapter) {
    eps_ref = eps_hat;
    axpy(1.0, adapter->residual(d.x_t, d.t, cam4, pool_rows(prompt), sched), eps_ref);
  } else {
    eps_ref = d.eps;
  }
  Vec g_img(eps_hat.size());
  for (std::size_t i = 0; i < g_img.size(); ++i) {
    g_img[i] = d.co.omega * (eps_hat[i] - eps_ref[i]);
  }
  const StepStats st = apply_particle_grad(scene, opt, d, g_img, rcfg, norm2(eps_hat));

  if (adapter && adapter_opt) {
    int t2 = d.t;
    Vec eps2 = d.eps;
    if (fresh_draw) {
      t2 = sched.sample_t(rng);
      rng.fill_gaussian(eps2);
    }
    Vec x_t2(d.image.size());
    const auto co2 = sched.eval(t2);
    for (std::size_t i = 0; i < d.image.size(); ++i) {
      x_t2[i] = co2.alpha * d.image[i] + co2.sigma * eps2[i];
    }
    adapter_denoise_update(*adapter, *adapter_opt, teacher, prompt, x_t2, t2, cam4, eps2, sched);
  }
  return st;
}

StepStats tsd_step(Scene& scene, AdamState& opt, const Matrix& base, const Matrix& hiper,
                   Matrix& phi, AdamState& phi_opt, const Denoiser& teacher, RngStream& rng,
                   const NoiseSchedule& sched, const CameraConfig& ccfg, const RenderConfig& rcfg) {
  const IterDraw d = draw_and_render(scene, rng, sched, ccfg, rcfg);
  const Matrix prompt_inv = vstack({&base, &hiper});
  const Matrix prompt_full = vstack({&base, &hiper, &phi});
  const Vec eps_inv = teacher.predict_eps(d.x_t, d.t, prompt_inv, sched);
  const Vec eps_full = teacher.predict_eps(d.x_t, d.t, prompt_full, sched);
  Vec g_img(eps_inv.size());
  for (std::size_t i = 0; i < g_img.size(); ++i) {
    g_img[i] = d.co.omega * (eps_inv[i] - eps_full[i]);
  }
  const StepStats st = apply_particle_grad(scene, opt, d, g_img, rcfg, norm2(eps_inv));
  shared_token_update(phi, phi_opt, teacher, base, hiper, d.x_t, d.t, d.eps, sched);
  return st;
}

std::vector<Matrix> random_token_augmentation(const Matrix& base, int k, int rows,
                                              RngStream rng) {
  require(k >= 1, "random_token_augmentation: K must be >= 1");
  require(rows >= 1, "random_token_augmentation: rows must be >= 1");
  std::vector<Matrix> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) {
    Matrix z(rows, base.cols);
    for (double& v : z.data) v = 0.5 * rng.next_gaussian();
    out.push_back(vstack({&base, &z}));
  }
  return out;
}

// ----------------------------- run driver ---------------------------------

namespace {

struct RunState {
  NoiseSchedule sched;
  CameraConfig ccfg;
  RenderConfig rcfg;
  std::vector<std::unique_ptr<Scene>> scenes;
  std::vector<AdamState> opts;
  std::vector<RngStream> prng;
  RngStream loop_rng;
  std::vector<Matrix> prompts;  // per-particle conditioning (without phi)
  std::unique_ptr<ResidualAdapter> adapter;
  AdamState adapter_opt;
  Matrix phi;
  AdamState phi_opt;
  int start_iter = 0;

  explicit RunState(const NoiseSchedule& s) : sched(s) {}
};

fs::path checkpoint_dir(const fs::path& run_dir, int iter) {
  return run_dir / "checkpoints" / ("iter_" + std::to_string(iter));
}

void write_checkpoint(const fs::path& run_dir, const DistillConfig& cfg, const RunState& rs,
                      int iter) {
  const fs::path dir = checkpoint_dir(run_dir, iter);
  fs::create_directories(dir);
  for (int i = 0; i < cfg.k; ++i) {
    io::save_scene(dir / ("scene_" + std::to_string(i)), *rs.scenes[i]);
    io::save_adam(dir / ("adam_" + std::to_string(i)), rs.opts[i]);
  }
  json st;
  st["iter"] = iter;
  st["loop_counter"] = rs.loop_rng.counter();
  json counters = json::array();
  for (const auto& r : rs.prng) counters.push_back(r.counter());
  st["particle_counters"] = std::move(counters);
  if (rs.adapter) {
    io::write_f64_le(dir / "adapter.bin", rs.adapter->params());
    io::save_adam(dir / "adapter_adam", rs.adapter_opt);
  }
  if (!rs.phi.empty()) {
    io::write_f64_le(dir / "phi.bin", rs.phi.data);
    st["phi_rows"] = rs.phi.rows;
    st["phi_cols"] = rs.phi.cols;
    io::save_adam(dir / "phi_adam", rs.phi_opt);
  }
  io::write_json(dir / "state.json", st);
}

RunState build_initial_state(const DistillConfig& cfg, const RunInputs& in) {
  RunState rs{NoiseSchedule(cfg.schedule)};
  rs.ccfg = camera_config_for(cfg);
  rs.rcfg = render_config_for(cfg);

  RngStream root(cfg.seed, 0);
  rs.loop_rng = root.substream(1);
  for (int i = 0; i < cfg.k; ++i) {
    rs.scenes.push_back(build_scene(cfg.scene, root.substream(100 + i)));
    rs.opts.emplace_back(rs.scenes.back()->params().size(), cfg.particle_lr);
    rs.prng.push_back(root.substream(200 + i));
  }
  require(rs.scenes.front()->render_dim(rs.rcfg) == in.teacher.dim(),
          "run: scene render dim does not match teacher dim");

  switch (cfg.augmentation) {
    case Augmentation::none:
      rs.prompts.assign(cfg.k, in.base_prompt);
      break;
    case Augmentation::random_tokens:
      rs.prompts = random_token_augmentation(in.base_prompt, cfg.k, cfg.aug_tokens,
                                             root.substream(300));
      break;
    case Augmentation::hiper: {
      require(static_cast<int>(in.hiper_tokens.size()) == cfg.k,
              "run: hiper augmentation needs K token matrices");
      rs.prompts.clear();
      for (int i = 0; i < cfg.k; ++i) {
        rs.prompts.push_back(vstack({&in.base_prompt, &in.hiper_tokens[i]}));
      }
      break;
    }
  }

  if (cfg.method == Method::vsd && !cfg.adapter_disabled) {
    RngStream arng = root.substream(2);
    rs.adapter = std::make_unique<ResidualAdapter>(in.teacher.dim(), in.teacher.embed_dim(),
                                                   cfg.adapter_hidden, arng);
    rs.adapter_opt = AdamState(rs.adapter->param_count(), cfg.adapter_lr);
  }
  if (cfg.method == Method::tsd) {
    rs.phi = Matrix(cfg.l3, in.base_prompt.cols);
    RngStream prng_phi = root.substream(3);
    for (double& v : rs.phi.data) v = 0.02 * prng_phi.next_gaussian();
    rs.phi_opt = AdamState(rs.phi.data.size(), cfg.adapter_lr);
  }
  return rs;
}

RunState load_state_from_checkpoint(const DistillConfig& cfg, const RunInputs& in,
                                    const fs::path& run_dir, int iter) {
  RunState rs = build_initial_state(cfg, in);
  const fs::path dir = checkpoint_dir(run_dir, iter);
  const json st = io::read_json(dir / "state.json");
  rs.start_iter = st.at("iter").get<int>();
  rs.loop_rng.set_counter(st.at("loop_counter").get<std::uint64_t>());
  const auto counters = st.at("particle_counters").get<std::vector<std::uint64_t>>();
  require(counters.size() == rs.prng.size(), "resume: particle counter count mismatch");
  for (std::size_t i = 0; i < counters.size(); ++i) rs.prng[i].set_counter(counters[i]);
  for (int i = 0; i < cfg.k; ++i) {
    auto scene = io::load_scene(dir / ("scene_" + std::to_string(i)));
    require(scene->params().size() == rs.scenes[i]->params().size(),
            "resume: scene parameter count mismatch");
    rs.scenes[i] = std::move(scene);
    rs.opts[i] = io::load_adam(dir / ("adam_" + std::to_string(i)));
  }
  if (rs.adapter) {
    const Vec p = io::read_f64_le(dir / "adapter.bin");
    require(p.size() == rs.adapter->param_count(), "resume: adapter parameter count mismatch");
    std::copy(p.begin(), p.end(), rs.adapter->params().begin());
    rs.adapter_opt = io::load_adam(dir / "adapter_adam");
  }
  if (!rs.phi.empty()) {
    const Vec p = io::read_f64_le(dir / "phi.bin");
    require(p.size() == rs.phi.data.size(), "resume: phi size mismatch");
    rs.phi.data = p;
    rs.phi_opt = io::load_adam(dir / "phi_adam");
  }
  return rs;
}

void write_manifest(const fs::path& run_dir, const DistillConfig& cfg, const RunInputs& in,
                    const std::string& started, double mean_iter_ms,
                    std::size_t particle_params, std::size_t adapter_params) {
  json m;
  m["tool_version"] = kVersion;
  m["command"] = "distill";
  m["config"] = distill_config_to_json(cfg);
  m["teacher_hash"] = io::teacher_hash(in.teacher);
  m["seeds"] = {{"master", cfg.seed},
                {"loop_stream", 1},
                {"scene_streams", "100 + particle"},
                {"particle_streams", "200 + particle"},
                {"adapter_stream", 2},
                {"phi_stream", 3},
                {"augmentation_stream", 300}};
  m["started_utc"] = started;
  m["finished_utc"] = io::utc_timestamp();
  m["mean_iter_ms"] = mean_iter_ms;
  m["param_counts"] = {{"per_particle", particle_params}, {"adapter_or_phi", adapter_params}};
  json outputs = json::array();
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), run_dir);
    if (rel == "manifest.json" || rel == ".lock") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  for (const auto& rel : files) {
    outputs.push_back({{"path", rel.string()}, {"fnv1a64", io::file_hash_hex(run_dir / rel)}});
  }
  m["outputs"] = std::move(outputs);
  m["status"] = "ok";
  io::write_text_atomic(run_dir / "manifest.json", m.dump(2) + "\n");
}

RunArtifacts run_loop(const DistillConfig& cfg, const RunInputs& in, RunState& rs,
                      const fs::path& run_dir) {
  const std::string started = io::utc_timestamp();
  const std::vector<Camera> views = eval_cameras(cfg.eval_views, rs.ccfg);
  const int render_views = std::min(4, cfg.eval_views);

  auto snapshot = [&](int iter) {
    std::vector<const Scene*> particles;
    for (const auto& s : rs.scenes) particles.push_back(s.get());
    const MetricReport rep = evaluate_particles(particles, in.teacher, in.base_prompt, views,
                                                rs.rcfg, cfg.extractor, cfg.threads);
    io::MetricsRow row;
    row.iter = iter;
    row.method = to_string(cfg.method);
    row.iq = rep.iq;
    row.iv = rep.iv;
    row.cosine_sim = rep.cosine_sim;
    row.views = rep.views;
    row.extractor_id = rep.extractor_id;
    row.seed = cfg.seed;
    io::append_metrics_csv(run_dir / "metrics.csv", row);
    write_checkpoint(run_dir, cfg, rs, iter);
    for (int i = 0; i < cfg.k; ++i) {
      for (int v = 0; v < render_views; ++v) {
        const Vec img = rs.scenes[i]->render(views[v], rs.rcfg);
        io::write_ppm(run_dir / "renders" / ("iter_" + std::to_string(iter)) /
                          ("particle_" + std::to_string(i) + "_view_" + std::to_string(v) +
                           ".ppm"),
                      img, rs.rcfg.width, rs.rcfg.height, cfg.scene.channels);
      }
    }
    return rep;
  };

  double step_ms_total = 0.0;
  long timed_iters = 0;
  MetricReport final_report;
  bool have_final = false;

  for (int iter = rs.start_iter + 1; iter <= cfg.iters; ++iter) {
    const int i = static_cast<int>(rs.loop_rng.next_below(cfg.k));
    const auto t0 = std::chrono::steady_clock::now();
    switch (cfg.method) {
      case Method::sds:
        sds_step(*rs.scenes[i], rs.opts[i], in.teacher, rs.prompts[i], rs.prng[i], rs.sched,
                 rs.ccfg, rs.rcfg);
        break;
      case Method::vsd:
        vsd_step(*rs.scenes[i], rs.opts[i], rs.adapter.get(),
                 rs.adapter ? &rs.adapter_opt : nullptr, in.teacher, rs.prompts[i], rs.prng[i],
                 rs.sched, rs.ccfg, rs.rcfg, cfg.adapter_fresh_draw);
        break;
      case Method::tsd:
        tsd_step(*rs.scenes[i], rs.opts[i], in.base_prompt, in.hiper_tokens[i], rs.phi,
                 rs.phi_opt, in.teacher, rs.prng[i], rs.sched, rs.ccfg, rs.rcfg);
        break;
    }
    const auto t1 = std::chrono::steady_clock::now();
    step_ms_total += std::chrono::duration<double, std::milli>(t1 - t0).count();
    ++timed_iters;
    if (iter % cfg.log_every == 0 || iter == cfg.iters) {
      final_report = snapshot(iter);
      have_final = true;
    }
  }
  if (!have_final) final_report = snapshot(cfg.iters);

  RunArtifacts art;
  art.dir = run_dir;
  art.mean_iter_ms = timed_iters > 0 ? step_ms_total / timed_iters : 0.0;
  art.particle_param_count = rs.scenes.front()->params().size();
  if (rs.adapter) art.adapter_param_count = rs.adapter->param_count();
  if (!rs.phi.empty()) art.adapter_param_count = rs.phi.data.size();
  art.final_report = final_report;
  write_manifest(run_dir, cfg, in, started, art.mean_iter_ms, art.particle_param_count,
                 art.adapter_param_count);
  return art;
}

}  // namespace

RunArtifacts run_distillation(const DistillConfig& cfg, const RunInputs& in,
                              const fs::path& out_dir) {
  validate_config(cfg);
  if (cfg.method == Method::tsd || cfg.augmentation == Augmentation::hiper) {
    require(static_cast<int>(in.hiper_tokens.size()) == cfg.k,
            "run: need K inverted-token matrices");
  }
  fs::create_directories(out_dir);
  io::DirLock lock(out_dir);
  io::write_json(out_dir / "config.json", distill_config_to_json(cfg));
  try {
    RunState rs = build_initial_state(cfg, in);
    return run_loop(cfg, in, rs, out_dir);
  } catch (const std::exception& e) {
    io::write_text(out_dir / ".failed", std::string(e.what()) + "\n");
    throw;
  }
}

RunArtifacts resume_run(const fs::path& run_dir) {
  const DistillConfig cfg = distill_config_from_json(io::read_json(run_dir / "config.json"));
  const RunInputs in = load_run_inputs(cfg, run_dir);
  int latest = -1;
  const fs::path cp_root = run_dir / "checkpoints";
  require(fs::exists(cp_root), "resume: no checkpoints under " + run_dir.string());
  for (const auto& entry : fs::directory_iterator(cp_root)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("iter_", 0) == 0) {
      latest = std::max(latest, std::stoi(name.substr(5)));
    }
  }
  require(latest >= 0, "resume: no checkpoints under " + run_dir.string());
  io::DirLock lock(run_dir);
  try {
    RunState rs = load_state_from_checkpoint(cfg, in, run_dir, latest);
    return run_loop(cfg, in, rs, run_dir);
  } catch (const std::exception& e) {
    io::write_text(run_dir / ".failed", std::string(e.what()) + "\n");
    throw;
  }
}

RunInputs load_run_inputs(const DistillConfig& cfg, const fs::path& base_dir) {
  require(!cfg.teacher_path.empty(), "config: teacher path is required");
  require(!cfg.prompt_path.empty(), "config: prompt path is required");
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  RunInputs in{io::load_teacher(resolve(cfg.teacher_path)),
               io::load_prompt(resolve(cfg.prompt_path)),
               {}};
  if (cfg.method == Method::tsd || cfg.augmentation == Augmentation::hiper) {
    require(!cfg.tokens_dir.empty(), "config: tokens_dir is required for hiper augmentation");
    const fs::path tdir = resolve(cfg.tokens_dir);
    std::string missing;
    for (int i = 0; i < cfg.k; ++i) {
      const fs::path f = tdir / io::token_filename(i);
      if (!fs::exists(f)) missing += (missing.empty() ? "" : ", ") + f.string();
    }
    require(missing.empty(), "config: missing token files: " + missing);
    for (int i = 0; i < cfg.k; ++i) {
      in.hiper_tokens.push_back(io::load_tokens(tdir / io::token_filename(i)).tokens);
    }
  }
  return in;
}

}  // namespace sdlab
