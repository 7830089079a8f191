#pragma once

#include <string>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/scenes.hpp"
#include "sdlab/teacher.hpp"

namespace sdlab {

// Quality/diversity metrics over a particle set, scored by the exact mixture
// posterior in place of a pretrained classifier:
//   IQ = mean over (particle, view) of entropy(posterior)        (lower better)
//   IV = entropy of the mean posterior over (particle, view)     (higher better)
//   CosineSim = mean pairwise cosine of per-view features        (lower better)
struct MetricReport {
  double iq = 0.0;
  double iv = 0.0;
  double cosine_sim = 0.0;
  int views = 0;
  std::string extractor_id;
  // posteriors[p * views + v] = classifier output for particle p at view v
  std::vector<Vec> posteriors;
};

enum class FeatureExtractor { gm_log_posterior, pixels_centered };

std::string extractor_id(FeatureExtractor e);
FeatureExtractor extractor_from_id(const std::string& id);

// Pure reductions over precomputed tables; the brute-force oracles in the
// test suite check these to 1e-12.
double compute_iq(const std::vector<Vec>& posteriors);
double compute_iv(const std::vector<Vec>& posteriors);
// features[v][p] = feature vector of particle p at view v.
double compute_cosine_sim(const std::vector<std::vector<Vec>>& features_per_view);

// Renders every (particle, view) pair, classifies with the base prompt, and
// assembles the full report. Reduction order is fixed (particle-major) so
// results are bit-stable regardless of threads.
MetricReport evaluate_particles(const std::vector<const Scene*>& particles,
                                const GmTeacher& classifier, const Matrix& base_prompt,
                                const std::vector<Camera>& views, const RenderConfig& cfg,
                                FeatureExtractor extractor, int threads = 1);

}  // namespace sdlab
