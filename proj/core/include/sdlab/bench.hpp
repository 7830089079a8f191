#pragma once

#include <filesystem>
#include <vector>

#include "sdlab/distill.hpp"

namespace sdlab {

// Standard 4-mode bench teacher: 16x16x3 images with a colored patch per mode
// on a white background, one-hot-ish anchors in R^8, and a base prompt whose
// pooled embedding is near-equidistant from all four anchors (a small tilt
// toward mode 0 makes the prior mildly asymmetric, the regime where
// single-prompt optimization collapses).
struct BenchPresetSpec {
  int modes = 4;
  int height = 16, width = 16, channels = 3;
  double s = 0.20;            // per-component standard deviation
  double tau = 0.25;          // conditioning temperature
  double anchor_scale = 1.0;
  double tilt = 0.10;         // relative tilt of the base prompt toward mode 0
  int embed_dim = 8;
  int base_rows = 4;          // L1
};

GmTeacher make_bench_teacher(const BenchPresetSpec& spec = {});
Matrix make_bench_prompt(const BenchPresetSpec& spec = {});

struct BenchConfig {
  int seeds = 5;
  std::uint64_t first_seed = 1;
  int iters = 5000;
  int k = 6;
  int log_every = 1000;
  int eval_views = 24;
  InversionConfig inversion;  // stage 1 for tsd
  BenchPresetSpec preset;
  int threads = 1;
  bool keep_run_dirs = true;
};

struct BenchRow {
  Method method;
  std::uint64_t seed = 0;
  double iq = 0.0, iv = 0.0, cosine_sim = 0.0;
  double mean_iter_ms = 0.0;
  std::size_t adapter_param_count = 0;
};

struct BenchResults {
  std::vector<BenchRow> rows;
  std::filesystem::path summary_csv;

  std::vector<BenchRow> method_rows(Method m) const;
  double mean(Method m, double BenchRow::* field) const;
};

// Runs sds, vsd and tsd over the bench preset for each seed; writes per-run
// directories plus bench_summary.csv under out_dir.
BenchResults run_bench(const BenchConfig& cfg, const std::filesystem::path& out_dir);

// Stage 1 for one seed of the bench: references + per-particle inversion;
// writes tokens_particle_<i>.json under tokens_dir and returns the matrices.
std::vector<Matrix> bench_stage1_tokens(const GmTeacher& teacher, const Matrix& base, int k,
                                        const InversionConfig& icfg, std::uint64_t seed,
                                        const NoiseSchedule& sched,
                                        const std::filesystem::path& tokens_dir);

}  // namespace sdlab
