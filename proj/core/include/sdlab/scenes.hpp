#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/numerics.hpp"

namespace sdlab {

struct Camera {
  double azimuth = 0.0;    // radians
  double elevation = 0.0;  // radians
  double radius = 1.0;
  int dx = 0;  // translation jitter in pixels, 2-D scenes only
  int dy = 0;
};

struct CameraConfig {
  bool planar = false;  // 2-D scenes: only jitter applies
  double radius = 1.0;
  double elevation_min = -0.5235987755982988;  // -30 deg
  double elevation_max = 0.7853981633974483;   // +45 deg
  int jitter_max = 2;                          // jitter ~ U{-jitter_max..jitter_max}
};

// Draw order: planar -> (dx, dy); otherwise -> (azimuth, elevation).
Camera sample_camera(RngStream& rng, const CameraConfig& cfg);

// (cos az, sin az, cos el, sin el); zeros for planar scenes.
Vec camera_embedding(const Camera& cam, bool planar);

// V fixed evaluation views: evenly spaced azimuths at zero elevation, or a
// fixed jitter pattern for planar scenes. Deterministic, no RNG involved.
std::vector<Camera> eval_cameras(int v, const CameraConfig& cfg);

struct RenderConfig {
  int width = 16;
  int height = 16;
  int ray_samples = 32;
  double span = 1.0;        // image-plane extent covered by the rays
  double start_dist = 1.0;  // ray start distance from the volume center
};

// ---------------------------------------------------------------------------
// Differentiable particle parameterizations theta with renderer g(theta, c).
// Rendering is pure; parameters live in one flat buffer per scene so the
// optimizer and the checkpoint format see every kind the same way.
// ---------------------------------------------------------------------------
class Scene {
 public:
  virtual ~Scene() = default;
  virtual std::string_view kind() const = 0;
  virtual std::vector<std::size_t> shape() const = 0;
  virtual std::span<double> params() = 0;
  virtual std::span<const double> params() const = 0;
  virtual int render_dim(const RenderConfig& cfg) const = 0;

  virtual Vec render(const Camera& cam, const RenderConfig& cfg) const = 0;

  // dL/dtheta for upstream = dL/dimage; exact reverse accumulation.
  virtual Vec render_vjp(const Camera& cam, const RenderConfig& cfg,
                         const Vec& upstream) const = 0;

  virtual std::unique_ptr<Scene> clone() const = 0;
};

// Pixel = sigmoid(logit), sampled with the camera's translation jitter
// (clamped at the borders).
class ImageScene final : public Scene {
 public:
  ImageScene(int height, int width, int channels);

  std::string_view kind() const override { return "image"; }
  std::vector<std::size_t> shape() const override;
  std::span<double> params() override { return logits_; }
  std::span<const double> params() const override { return logits_; }
  int render_dim(const RenderConfig&) const override { return h_ * w_ * c_; }

  Vec render(const Camera& cam, const RenderConfig& cfg) const override;
  Vec render_vjp(const Camera& cam, const RenderConfig& cfg, const Vec& upstream) const override;
  std::unique_ptr<Scene> clone() const override { return std::make_unique<ImageScene>(*this); }

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }

 private:
  int h_, w_, c_;
  Vec logits_;
};

// Voxel radiance field on the unit cube: density = softplus(trilinear grid),
// color = sigmoid(trilinear grid), composited front to back with
// alpha_i = 1 - exp(-sigma_i delta_i) and a background behind the volume.
class VoxelScene final : public Scene {
 public:
  VoxelScene(int n, int channels, Vec background = {});

  std::string_view kind() const override { return "voxel"; }
  std::vector<std::size_t> shape() const override;
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }
  int render_dim(const RenderConfig& cfg) const override {
    return cfg.width * cfg.height * c_;
  }

  Vec render(const Camera& cam, const RenderConfig& cfg) const override;
  Vec render_vjp(const Camera& cam, const RenderConfig& cfg, const Vec& upstream) const override;
  std::unique_ptr<Scene> clone() const override { return std::make_unique<VoxelScene>(*this); }

  int n() const { return n_; }
  int channels() const { return c_; }
  const Vec& background() const { return bg_; }

  std::span<double> density_logits() { return {params_.data(), static_cast<std::size_t>(n_) * n_ * n_}; }
  std::span<double> color_logits() {
    return {params_.data() + static_cast<std::size_t>(n_) * n_ * n_,
            static_cast<std::size_t>(n_) * n_ * n_ * c_};
  }

 private:
  int n_, c_;
  Vec bg_;
  Vec params_;  // [density logits | color logits]
};

// Feature grid + two-layer rectified-linear heads: density through softplus,
// color through sigmoid. The structural sibling of hash-grid NeRFs, kept
// small so parameter-space probes can walk it.
class GridMlpField final : public Scene {
 public:
  GridMlpField(int n, int features, int hidden, int channels, Vec background = {});

  std::string_view kind() const override { return "grid_mlp"; }
  std::vector<std::size_t> shape() const override;
  std::span<double> params() override { return params_; }
  std::span<const double> params() const override { return params_; }
  int render_dim(const RenderConfig& cfg) const override {
    return cfg.width * cfg.height * c_;
  }

  Vec render(const Camera& cam, const RenderConfig& cfg) const override;
  Vec render_vjp(const Camera& cam, const RenderConfig& cfg, const Vec& upstream) const override;
  std::unique_ptr<Scene> clone() const override { return std::make_unique<GridMlpField>(*this); }

  void init(RngStream& rng, double grid_scale = 0.1);

  // Point-wise field evaluation, used by the parameter-space probes.
  double density_at(const Vec& point) const;
  Vec color_at(const Vec& point) const;

  // Flat-parameter layout, so probes can restrict segments to one block.
  struct Layout {
    std::size_t grid_offset, grid_size;
    std::size_t density_offset, density_size;       // whole density head
    std::size_t density_last_offset, density_last_size;  // final layer only
    std::size_t color_offset, color_size;
    std::size_t color_last_offset, color_last_size;
  };
  Layout layout() const;

  int n() const { return n_; }
  int features() const { return f_; }
  int hidden() const { return hidden_; }
  int channels() const { return c_; }

 private:
  Vec grid_features_at(const Vec& point) const;
  friend struct FieldRayWorkspace;

  int n_, f_, hidden_, c_;
  Vec bg_;
  Vec params_;  // [grid | density head W1,b1,W2,b2 | color head W1,b1,W2,b2]
};

std::unique_ptr<Scene> make_scene(std::string_view kind, const std::vector<std::size_t>& shape);

}  // namespace sdlab
