#include "sdlab/bench.hpp"

#include <cstdio>
#include <fstream>

namespace sdlab {

namespace fs = std::filesystem;

GmTeacher make_bench_teacher(const BenchPresetSpec& spec) {
  require(spec.modes >= 1, "bench: modes must be >= 1");
  require(spec.embed_dim >= spec.modes, "bench: embed_dim must be >= modes");
  const int h = spec.height, w = spec.width, c = spec.channels;
  const int d = h * w * c;

  // Mode colors and patch placements: distinct colored rectangles on white.
  const double colors[8][3] = {{0.9, 0.15, 0.15}, {0.15, 0.7, 0.2},  {0.15, 0.25, 0.9},
                               {0.85, 0.75, 0.1}, {0.7, 0.2, 0.8},   {0.1, 0.75, 0.75},
                               {0.95, 0.5, 0.1},  {0.35, 0.35, 0.35}};
  std::vector<GmComponent> comps;
  for (int k = 0; k < spec.modes; ++k) {
    GmComponent comp;
    comp.mean.assign(d, 1.0);  // white background
    const int qx = (k % 2) ? w / 2 : 0;
    const int qy = ((k / 2) % 2) ? h / 2 : 0;
    const int px0 = qx + w / 8, px1 = qx + w / 2 - w / 8;
    const int py0 = qy + h / 8, py1 = qy + h / 2 - h / 8;
    for (int y = py0; y < py1; ++y) {
      for (int x = px0; x < px1; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          comp.mean[(static_cast<std::size_t>(y) * w + x) * c + ch] = colors[k % 8][ch % 3];
        }
      }
    }
    comp.s = spec.s;
    comp.anchor.assign(spec.embed_dim, 0.0);
    comp.anchor[k] = spec.anchor_scale;
    comps.push_back(std::move(comp));
  }
  return GmTeacher(d, std::move(comps), spec.tau);
}

Matrix make_bench_prompt(const BenchPresetSpec& spec) {
  // Every row equals the pooled target, so pool(y) = gamma * (1+tilt, 1, .., 1, 0..)
  // and the conditional prior is near-uniform over the designated modes.
  Matrix base(spec.base_rows, spec.embed_dim, 0.0);
  const double gamma = 0.5;
  for (std::size_t r = 0; r < base.rows; ++r) {
    for (int k = 0; k < spec.modes; ++k) {
      base.at(r, k) = gamma * (k == 0 ? 1.0 + spec.tilt : 1.0);
    }
  }
  return base;
}

std::vector<Matrix> bench_stage1_tokens(const GmTeacher& teacher, const Matrix& base, int k,
                                        const InversionConfig& icfg, std::uint64_t seed,
                                        const NoiseSchedule& sched, const fs::path& tokens_dir) {
  ReferenceSet refs = sample_references(teacher, base, k, RngStream(seed, 0x4ef5));
  fs::create_directories(tokens_dir);
  std::vector<Matrix> tokens;
  for (int i = 0; i < k; ++i) {
    const InversionResult res = invert_hiper(teacher, refs.images[i], base, icfg,
                                             RngStream(seed, 0x1000 + i), sched);
    io::TokenFile tf;
    tf.particle = i;
    tf.tokens = res.tokens;
    tf.initial_crn_loss = res.initial_crn_loss;
    tf.final_crn_loss = res.final_crn_loss;
    tf.reference_label = refs.labels[i];
    tf.seed = seed;
    io::save_tokens(tokens_dir / io::token_filename(i), tf);
    io::write_ppm(tokens_dir / ("reference_" + std::to_string(i) + ".ppm"), refs.images[i], 16,
                  16, static_cast<int>(refs.images[i].size() / 256));
    tokens.push_back(res.tokens);
  }
  return tokens;
}

std::vector<BenchRow> BenchResults::method_rows(Method m) const {
  std::vector<BenchRow> out;
  for (const auto& r : rows) {
    if (r.method == m) out.push_back(r);
  }
  return out;
}

double BenchResults::mean(Method m, double BenchRow::* field) const {
  double total = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.method == m) {
      total += r.*field;
      ++n;
    }
  }
  return n > 0 ? total / n : 0.0;
}

BenchResults run_bench(const BenchConfig& cfg, const fs::path& out_dir) {
  require(cfg.seeds >= 1, "bench: seeds must be >= 1");
  fs::create_directories(out_dir);

  const GmTeacher teacher = make_bench_teacher(cfg.preset);
  const Matrix base = make_bench_prompt(cfg.preset);
  const fs::path teacher_path = out_dir / "teacher.json";
  const fs::path prompt_path = out_dir / "prompt.json";
  io::save_teacher(teacher_path, teacher);
  io::save_prompt(prompt_path, base);

  DistillConfig proto;
  proto.k = cfg.k;
  proto.iters = cfg.iters;
  proto.log_every = cfg.log_every;
  proto.eval_views = cfg.eval_views;
  proto.threads = cfg.threads;
  proto.scene.kind = "image";
  proto.scene.height = cfg.preset.height;
  proto.scene.width = cfg.preset.width;
  proto.scene.channels = cfg.preset.channels;
  proto.teacher_path = teacher_path.string();
  proto.prompt_path = prompt_path.string();

  const NoiseSchedule sched(proto.schedule);
  BenchResults results;

  for (int si = 0; si < cfg.seeds; ++si) {
    const std::uint64_t seed = cfg.first_seed + si;
    std::vector<Matrix> tokens;
    const fs::path tokens_dir = out_dir / ("tokens_seed" + std::to_string(seed));
    for (Method m : {Method::sds, Method::vsd, Method::tsd}) {
      DistillConfig rc = proto;
      rc.method = m;
      rc.seed = seed;
      RunInputs in{teacher, base, {}};
      if (m == Method::tsd) {
        rc.augmentation = Augmentation::hiper;
        rc.adapter = AdapterKind::shared_tokens;
        rc.tokens_dir = tokens_dir.string();
        if (tokens.empty()) {
          tokens = bench_stage1_tokens(teacher, base, cfg.k, cfg.inversion, seed, sched,
                                       tokens_dir);
        }
        in.hiper_tokens = tokens;
      }
      const fs::path run_dir =
          out_dir / (to_string(m) + "_seed" + std::to_string(seed));
      const RunArtifacts art = run_distillation(rc, in, run_dir);
      BenchRow row;
      row.method = m;
      row.seed = seed;
      row.iq = art.final_report.iq;
      row.iv = art.final_report.iv;
      row.cosine_sim = art.final_report.cosine_sim;
      row.mean_iter_ms = art.mean_iter_ms;
      row.adapter_param_count = art.adapter_param_count;
      results.rows.push_back(row);
    }
  }

  results.summary_csv = out_dir / "bench_summary.csv";
  {
    std::ofstream out(results.summary_csv, std::ios::trunc);
    out << "method,seed,iq,iv,cosine_sim,mean_iter_ms,adapter_params\n";
    char buf[128];
    for (const auto& r : results.rows) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.6g", r.iq, r.iv, r.cosine_sim,
                    r.mean_iter_ms);
      out << to_string(r.method) << "," << r.seed << "," << buf << "," << r.adapter_param_count
          << "\n";
    }
    for (Method m : {Method::sds, Method::vsd, Method::tsd}) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.6g",
                    results.mean(m, &BenchRow::iq), results.mean(m, &BenchRow::iv),
                    results.mean(m, &BenchRow::cosine_sim),
                    results.mean(m, &BenchRow::mean_iter_ms));
      out << to_string(m) << ",mean," << buf << ",\n";
    }
  }
  return results;
}

}  // namespace sdlab
