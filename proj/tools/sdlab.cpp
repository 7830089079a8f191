// sdlab - sampling-by-optimization laboratory against an analytic
// Gaussian-mixture prior. Subcommands: make-teacher, invert, distill,
// evaluate, probe, bench.
//
// Exit codes: 0 success, 2 validation failure, 3 runtime failure.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "sdlab/bench.hpp"
#include "sdlab/distill.hpp"
#include "sdlab/io.hpp"
#include "sdlab/metrics.hpp"
#include "sdlab/probes.hpp"
#include "sdlab/version.hpp"

namespace fs = std::filesystem;
using sdlab::io::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

int resolve_threads(int cli_threads) {
  if (const char* env = std::getenv("SDL_LAB_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (...) {
      throw std::invalid_argument("SDL_LAB_THREADS is not an integer");
    }
  }
  return std::max(1, cli_threads);
}

struct MakeTeacherArgs {
  int modes = 4;
  int height = 16, width = 16, channels = 3;
  double s = 0.20;
  double tau = 0.25;
  double anchor_scale = 1.0;
  double tilt = 0.10;
  int embed_dim = 8;
  int base_rows = 4;
  bool for_metrics = false;
  std::string out = "teacher.json";
  std::string prompt_out;
};

int cmd_make_teacher(const MakeTeacherArgs& a) {
  sdlab::BenchPresetSpec spec;
  spec.modes = a.modes;
  spec.height = a.height;
  spec.width = a.width;
  spec.channels = a.channels;
  spec.s = a.s;
  spec.tau = a.tau;
  spec.anchor_scale = a.anchor_scale;
  spec.tilt = a.tilt;
  spec.embed_dim = a.embed_dim;
  spec.base_rows = a.base_rows;
  if (a.for_metrics && a.s <= 0.0) {
    throw std::invalid_argument("make-teacher: s = 0 cannot back the metric classifier");
  }
  const sdlab::GmTeacher teacher = sdlab::make_bench_teacher(spec);
  sdlab::io::save_teacher(a.out, teacher);
  if (!a.prompt_out.empty()) {
    sdlab::io::save_prompt(a.prompt_out, sdlab::make_bench_prompt(spec));
  }
  std::cout << "teacher: " << a.out << "  dim=" << teacher.dim()
            << "  hash=" << sdlab::io::teacher_hash(teacher) << "\n";
  std::cout << "component  s        anchor_axis\n";
  for (int k = 0; k < teacher.n_components(); ++k) {
    std::cout << "  " << k << "        " << teacher.components()[k].s << "     " << k << "\n";
  }
  return 0;
}

struct InvertArgs {
  std::string teacher, prompt, out = "tokens";
  int k = 6;
  int iters = 400;
  double lr = 5e-3;
  int l2 = 5;
  int mc_batch = 8;
  std::uint64_t seed = 1;
};

int cmd_invert(const InvertArgs& a) {
  const sdlab::GmTeacher teacher = sdlab::io::load_teacher(a.teacher);
  const sdlab::Matrix base = sdlab::io::load_prompt(a.prompt);
  sdlab::InversionConfig icfg;
  icfg.iters = a.iters;
  icfg.lr = a.lr;
  icfg.l2 = a.l2;
  icfg.mc_batch = a.mc_batch;
  const sdlab::NoiseSchedule sched;
  try {
    sdlab::bench_stage1_tokens(teacher, base, a.k, icfg, a.seed, sched, a.out);
  } catch (const std::runtime_error& e) {
    sdlab::io::write_text(fs::path(a.out) / ".failed", std::string(e.what()) + "\n");
    throw;
  }
  std::cout << "wrote " << a.k << " token files under " << a.out << "\n";
  return 0;
}

struct DistillArgs {
  std::string config;
  std::string out = "run";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

int cmd_distill(const DistillArgs& a) {
  const fs::path config_path(a.config);
  sdlab::DistillConfig cfg =
      sdlab::distill_config_from_json(sdlab::io::read_json(config_path));
  if (a.seed_set) cfg.seed = a.seed;
  cfg.threads = resolve_threads(a.threads);
  const fs::path base_dir =
      config_path.has_parent_path() ? config_path.parent_path() : fs::path(".");
  // Resolve to absolute paths so the config echo in the run dir stays usable.
  auto absolutize = [&](std::string& p) {
    if (!p.empty() && !fs::path(p).is_absolute()) p = fs::absolute(base_dir / p).string();
  };
  absolutize(cfg.teacher_path);
  absolutize(cfg.prompt_path);
  absolutize(cfg.tokens_dir);
  const sdlab::RunInputs in = sdlab::load_run_inputs(cfg, base_dir);
  const sdlab::RunArtifacts art = sdlab::run_distillation(cfg, in, a.out);
  std::cout << "run complete: " << art.dir.string() << "\n"
            << "  mean_iter_ms=" << art.mean_iter_ms
            << "  iq=" << art.final_report.iq << "  iv=" << art.final_report.iv
            << "  cosine_sim=" << art.final_report.cosine_sim << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string run;
  std::string checkpoint;  // explicit checkpoint dir; default: newest
  int views = 24;
  std::string extractor = "gm_log_posterior";
  int threads = 1;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const fs::path run_dir(a.run);
  const sdlab::DistillConfig cfg =
      sdlab::distill_config_from_json(sdlab::io::read_json(run_dir / "config.json"));
  const sdlab::RunInputs in = sdlab::load_run_inputs(cfg, run_dir);

  fs::path cp(a.checkpoint);
  long iter = cfg.iters;
  if (cp.empty()) {
    long latest = -1;
    for (const auto& entry : fs::directory_iterator(run_dir / "checkpoints")) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("iter_", 0) == 0) latest = std::max(latest, std::stol(name.substr(5)));
    }
    if (latest < 0) throw std::invalid_argument("evaluate: no checkpoints in " + a.run);
    iter = latest;
    cp = run_dir / "checkpoints" / ("iter_" + std::to_string(latest));
  }

  std::vector<std::unique_ptr<sdlab::Scene>> scenes;
  std::vector<const sdlab::Scene*> particles;
  for (int i = 0; i < cfg.k; ++i) {
    scenes.push_back(sdlab::io::load_scene(cp / ("scene_" + std::to_string(i))));
    particles.push_back(scenes.back().get());
  }
  const auto extractor = sdlab::extractor_from_id(a.extractor);
  if (cfg.k < 2) {
    throw std::invalid_argument("evaluate: cosine similarity needs at least 2 particles");
  }
  const sdlab::CameraConfig ccfg = sdlab::camera_config_for(cfg);
  const sdlab::RenderConfig rcfg = sdlab::render_config_for(cfg);
  const auto views = sdlab::eval_cameras(a.views, ccfg);
  const sdlab::MetricReport rep = sdlab::evaluate_particles(
      particles, in.teacher, in.base_prompt, views, rcfg, extractor, resolve_threads(a.threads));

  sdlab::io::MetricsRow row;
  row.iter = iter;
  row.method = to_string(cfg.method);
  row.iq = rep.iq;
  row.iv = rep.iv;
  row.cosine_sim = rep.cosine_sim;
  row.views = rep.views;
  row.extractor_id = rep.extractor_id;
  row.seed = cfg.seed;
  sdlab::io::append_metrics_csv(run_dir / "metrics.csv", row);

  json jr;
  jr["iter"] = iter;
  jr["iq"] = rep.iq;
  jr["iv"] = rep.iv;
  jr["cosine_sim"] = rep.cosine_sim;
  jr["views"] = rep.views;
  jr["extractor_id"] = rep.extractor_id;
  json post = json::array();
  for (const auto& p : rep.posteriors) post.push_back(p);
  jr["posteriors"] = std::move(post);
  sdlab::io::write_json(run_dir / ("report_iter_" + std::to_string(iter) + ".json"), jr);

  // Contact sheet: K rows x sampled views.
  const int sheet_views = std::min(8, a.views);
  std::vector<sdlab::Vec> tiles;
  for (int i = 0; i < cfg.k; ++i) {
    for (int v = 0; v < sheet_views; ++v) {
      tiles.push_back(particles[i]->render(views[v], rcfg));
    }
  }
  int sw = 0, sh = 0;
  const sdlab::Vec sheet = sdlab::io::contact_sheet(tiles, cfg.k, sheet_views, rcfg.width,
                                                    rcfg.height, cfg.scene.channels, sw, sh);
  sdlab::io::write_ppm(run_dir / ("contact_iter_" + std::to_string(iter) + ".ppm"), sheet, sw,
                       sh, cfg.scene.channels);

  std::cout << "iq=" << rep.iq << " iv=" << rep.iv << " cosine_sim=" << rep.cosine_sim
            << " views=" << rep.views << " extractor=" << rep.extractor_id << "\n";
  return 0;
}

struct ProbeArgs {
  std::string kind;
  std::string teacher;
  std::string out = "probe";
  int segments = 1000;
  int crn = 16;
  int points = 16;
  double tol = 1e-9;
  double box = 2.0;
  std::uint64_t seed = 1;
  int grid = 4, features = 4, hidden = 8, channels = 3;
};

void write_probe_report(const fs::path& dir, const std::string& name,
                        const sdlab::ProbeReport& rep) {
  json j;
  j["probe"] = name;
  j["n_segments"] = rep.n_segments;
  j["violations"] = rep.violations;
  j["violation_fraction"] = rep.violation_fraction;
  j["max_violation"] = rep.max_violation;
  j["crn_batch"] = rep.crn_batch;
  j["tol"] = rep.tol;
  sdlab::io::write_json(dir / (name + ".json"), j);
  std::ofstream csv(dir / (name + ".csv"), std::ios::trunc);
  csv << "probe,n_segments,violations,violation_fraction,max_violation,crn_batch,tol\n";
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.17g,%.17g", rep.violation_fraction, rep.max_violation);
  csv << name << "," << rep.n_segments << "," << rep.violations << "," << buf << ","
      << rep.crn_batch << "," << rep.tol << "\n";
  std::cout << name << ": violation_fraction=" << rep.violation_fraction
            << " max_violation=" << rep.max_violation << "\n";
}

int cmd_probe(const ProbeArgs& a) {
  fs::create_directories(a.out);
  if (a.kind == "lemma1") {
    if (a.teacher.empty()) {
      throw std::invalid_argument("probe lemma1: --teacher is required");
    }
    const sdlab::GmTeacher teacher = sdlab::io::load_teacher(a.teacher);
    // Unconditioned probe: a zero embedding matching the teacher's embed dim.
    sdlab::Matrix prompt(1, teacher.embed_dim(), 0.0);
    const sdlab::NoiseSchedule sched;
    sdlab::RngStream rng(a.seed, 0xbeef);
    const sdlab::CrnBatch crn = sdlab::make_crn_batch(a.crn, teacher.dim(), rng, sched);
    auto f = [&](const sdlab::Vec& x) {
      return sdlab::sds_potential_eval(teacher, x, prompt, crn, sched);
    };
    // Segments sampled inside a box around the component means.
    sdlab::Vec center(teacher.dim(), 0.0);
    for (const auto& c : teacher.components()) {
      sdlab::axpy(1.0 / teacher.n_components(), c.mean, center);
    }
    const double box = a.box;
    auto sampler = [&, center](sdlab::RngStream& r) {
      sdlab::Vec x(center.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = center[i] + box * (2.0 * r.next_double() - 1.0);
      }
      return x;
    };
    sdlab::ProbeReport rep = sdlab::midpoint_convexity_probe(f, sampler, a.segments, a.tol,
                                                             rng.substream(7));
    rep.crn_batch = crn.ts.size();
    write_probe_report(a.out, "lemma1", rep);
    return 0;
  }
  if (a.kind == "lemma2") {
    sdlab::GridMlpField field(a.grid, a.features, a.hidden, a.channels);
    sdlab::RngStream rng(a.seed, 0xfee1);
    field.init(rng);
    const auto restricted = sdlab::field_convexity_probe(field, a.segments, a.points, a.tol,
                                                         rng.substream(1), true);
    const auto general = sdlab::field_convexity_probe(field, a.segments, a.points, a.tol,
                                                      rng.substream(2), false);
    write_probe_report(a.out, "lemma2_density_final_layer", restricted.density);
    write_probe_report(a.out, "lemma2_color_final_layer", restricted.color);
    write_probe_report(a.out, "lemma2_density_general", general.density);
    write_probe_report(a.out, "lemma2_color_general", general.color);
    return 0;
  }
  throw std::invalid_argument("probe: kind must be lemma1 or lemma2, got '" + a.kind + "'");
}

struct BenchArgs {
  std::string out = "bench";
  int seeds = 5;
  int iters = 5000;
  int k = 6;
  int views = 24;
  int inversion_iters = 400;
  std::uint64_t first_seed = 1;
  int threads = 1;
  bool quick = false;
};

int cmd_bench(const BenchArgs& a) {
  sdlab::BenchConfig cfg;
  cfg.seeds = a.quick ? 2 : a.seeds;
  cfg.iters = a.quick ? 1500 : a.iters;
  cfg.k = a.k;
  cfg.eval_views = a.views;
  cfg.inversion.iters = a.inversion_iters;
  cfg.first_seed = a.first_seed;
  cfg.threads = resolve_threads(a.threads);
  const sdlab::BenchResults res = sdlab::run_bench(cfg, a.out);
  std::cout << "bench summary: " << res.summary_csv.string() << "\n";
  for (sdlab::Method m : {sdlab::Method::sds, sdlab::Method::vsd, sdlab::Method::tsd}) {
    std::cout << "  " << to_string(m) << ": iq=" << res.mean(m, &sdlab::BenchRow::iq)
              << " iv=" << res.mean(m, &sdlab::BenchRow::iv)
              << " cosine_sim=" << res.mean(m, &sdlab::BenchRow::cosine_sim)
              << " mean_iter_ms=" << res.mean(m, &sdlab::BenchRow::mean_iter_ms) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sampling-by-optimization laboratory over an analytic mixture prior"};
  app.set_version_flag("--version", sdlab::kVersion);
  app.require_subcommand(1);

  MakeTeacherArgs mt;
  auto* c_mt = app.add_subcommand("make-teacher", "write a teacher spec (and optional prompt)");
  c_mt->add_option("--modes", mt.modes, "number of mixture components");
  c_mt->add_option("--height", mt.height);
  c_mt->add_option("--width", mt.width);
  c_mt->add_option("--channels", mt.channels);
  c_mt->add_option("--s", mt.s, "per-component standard deviation");
  c_mt->add_option("--tau", mt.tau, "conditioning temperature");
  c_mt->add_option("--anchor-scale", mt.anchor_scale);
  c_mt->add_option("--tilt", mt.tilt, "base-prompt tilt toward mode 0");
  c_mt->add_option("--embed-dim", mt.embed_dim);
  c_mt->add_option("--base-rows", mt.base_rows);
  c_mt->add_flag("--for-metrics", mt.for_metrics, "reject specs unusable as a classifier");
  c_mt->add_option("--out", mt.out);
  c_mt->add_option("--prompt-out", mt.prompt_out, "also write the base prompt here");

  InvertArgs iv;
  auto* c_iv = app.add_subcommand("invert", "stage 1: per-particle token inversion");
  c_iv->add_option("--teacher", iv.teacher)->required();
  c_iv->add_option("--prompt", iv.prompt)->required();
  c_iv->add_option("-k,--particles", iv.k);
  c_iv->add_option("--iters", iv.iters);
  c_iv->add_option("--lr", iv.lr);
  c_iv->add_option("--l2", iv.l2, "tokens per particle");
  c_iv->add_option("--mc-batch", iv.mc_batch);
  c_iv->add_option("--seed", iv.seed);
  c_iv->add_option("--out", iv.out);

  DistillArgs di;
  auto* c_di = app.add_subcommand("distill", "stage 2: run a distillation config");
  c_di->add_option("--config", di.config)->required();
  c_di->add_option("--out", di.out);
  auto* seed_opt = c_di->add_option("--seed", di.seed, "override the config seed");
  c_di->add_option("--threads", di.threads);

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "compute metrics on a run checkpoint");
  c_ev->add_option("--run", ev.run)->required();
  c_ev->add_option("--checkpoint", ev.checkpoint, "explicit checkpoint dir (default: newest)");
  c_ev->add_option("--views", ev.views, "number of evaluation views (120 = long preset)");
  c_ev->add_option("--extractor", ev.extractor);
  c_ev->add_option("--threads", ev.threads);

  ProbeArgs pr;
  auto* c_pr = app.add_subcommand("probe", "numerical convexity probes");
  c_pr->add_option("kind", pr.kind, "lemma1 | lemma2")->required();
  c_pr->add_option("--teacher", pr.teacher);
  c_pr->add_option("--out", pr.out);
  c_pr->add_option("--segments", pr.segments);
  c_pr->add_option("--crn", pr.crn, "common-random-number batch size");
  c_pr->add_option("--points", pr.points);
  c_pr->add_option("--tol", pr.tol);
  c_pr->add_option("--box", pr.box, "segment sampling box half-width");
  c_pr->add_option("--seed", pr.seed);
  c_pr->add_option("--grid", pr.grid);
  c_pr->add_option("--features", pr.features);
  c_pr->add_option("--hidden", pr.hidden);
  c_pr->add_option("--channels", pr.channels);

  BenchArgs be;
  auto* c_be = app.add_subcommand("bench", "sds/vsd/tsd over the standard 4-mode teacher");
  c_be->add_option("--out", be.out);
  c_be->add_option("--seeds", be.seeds);
  c_be->add_option("--iters", be.iters);
  c_be->add_option("-k,--particles", be.k);
  c_be->add_option("--views", be.views);
  c_be->add_option("--inversion-iters", be.inversion_iters);
  c_be->add_option("--first-seed", be.first_seed);
  c_be->add_option("--threads", be.threads);
  c_be->add_flag("--quick", be.quick, "2 seeds, 1500 iterations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help / --version
    std::cerr << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (c_mt->parsed()) return cmd_make_teacher(mt);
    if (c_iv->parsed()) return cmd_invert(iv);
    if (c_di->parsed()) {
      di.seed_set = seed_opt->count() > 0;
      return cmd_distill(di);
    }
    if (c_ev->parsed()) return cmd_evaluate(ev);
    if (c_pr->parsed()) return cmd_probe(pr);
    if (c_be->parsed()) return cmd_bench(be);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
