#include "sdlab/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "sdlab/threading.hpp"

namespace sdlab {

std::string extractor_id(FeatureExtractor e) {
  switch (e) {
    case FeatureExtractor::gm_log_posterior: return "gm_log_posterior";
    case FeatureExtractor::pixels_centered: return "pixels_centered";
  }
  return "unknown";
}

FeatureExtractor extractor_from_id(const std::string& id) {
  if (id == "gm_log_posterior") return FeatureExtractor::gm_log_posterior;
  if (id == "pixels_centered") return FeatureExtractor::pixels_centered;
  throw std::invalid_argument("unknown feature extractor '" + id + "'");
}

double compute_iq(const std::vector<Vec>& posteriors) {
  require(!posteriors.empty(), "compute_iq: empty posterior table");
  double total = 0.0;
  for (const Vec& p : posteriors) total += entropy(p);
  return total / static_cast<double>(posteriors.size());
}

double compute_iv(const std::vector<Vec>& posteriors) {
  require(!posteriors.empty(), "compute_iv: empty posterior table");
  const std::size_t c = posteriors.front().size();
  Vec mean(c, 0.0);
  for (const Vec& p : posteriors) {
    require(p.size() == c, "compute_iv: ragged posterior table");
    axpy(1.0, p, mean);
  }
  for (double& x : mean) x /= static_cast<double>(posteriors.size());
  return entropy(mean);
}

double compute_cosine_sim(const std::vector<std::vector<Vec>>& features_per_view) {
  require(!features_per_view.empty(), "compute_cosine_sim: no views");
  const std::size_t k = features_per_view.front().size();
  require(k >= 2, "compute_cosine_sim: need at least two particles");
  double view_total = 0.0;
  for (const auto& view : features_per_view) {
    require(view.size() == k, "compute_cosine_sim: ragged feature table");
    double pair_total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        pair_total += cosine_similarity(view[i], view[j]);
      }
    }
    view_total += pair_total / (0.5 * static_cast<double>(k) * (k - 1));
  }
  return view_total / static_cast<double>(features_per_view.size());
}

MetricReport evaluate_particles(const std::vector<const Scene*>& particles,
                                const GmTeacher& classifier, const Matrix& base_prompt,
                                const std::vector<Camera>& views, const RenderConfig& cfg,
                                FeatureExtractor extractor, int threads) {
  require(!particles.empty(), "evaluate_particles: no particles");
  require(!views.empty(), "evaluate_particles: no views");
  const std::size_t k = particles.size();
  const std::size_t v = views.size();
  require(particles.front()->render_dim(cfg) == classifier.dim(),
          "evaluate_particles: render dim does not match classifier dim");

  std::vector<Vec> renders(k * v);
  parallel_for(k * v, threads, [&](std::size_t i) {
    const std::size_t p = i / v, vi = i % v;
    renders[i] = particles[p]->render(views[vi], cfg);
  });

  MetricReport rep;
  rep.views = static_cast<int>(v);
  rep.extractor_id = extractor_id(extractor);
  rep.posteriors.resize(k * v);
  parallel_for(k * v, threads, [&](std::size_t i) {
    rep.posteriors[i] = classifier.classify(renders[i], base_prompt);
  });

  rep.iq = compute_iq(rep.posteriors);
  rep.iv = compute_iv(rep.posteriors);

  if (k >= 2) {
    std::vector<std::vector<Vec>> feats(v, std::vector<Vec>(k));
    for (std::size_t vi = 0; vi < v; ++vi) {
      for (std::size_t p = 0; p < k; ++p) {
        const std::size_t i = p * v + vi;
        if (extractor == FeatureExtractor::gm_log_posterior) {
          Vec f = rep.posteriors[i];
          for (double& x : f) x = std::log(std::max(x, 1e-300));
          feats[vi][p] = std::move(f);
        } else {
          Vec f = renders[i];
          double mean = 0.0;
          for (double x : f) mean += x;
          mean /= static_cast<double>(f.size());
          for (double& x : f) x -= mean;
          feats[vi][p] = std::move(f);
        }
      }
    }
    rep.cosine_sim = compute_cosine_sim(feats);
  } else {
    rep.cosine_sim = 1.0;
  }
  return rep;
}

}  // namespace sdlab
