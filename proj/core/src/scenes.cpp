#include "sdlab/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sdlab {

namespace {

constexpr double kAlphaMax = 1.0 - 1e-10;
constexpr double kHalfDiag = 0.8660254037844387;  // half diagonal of the unit cube

int clamp_idx(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

struct Basis {
  double view[3];   // unit vector from volume center toward the camera
  double right[3];
  double up[3];
};

Basis camera_basis(const Camera& cam) {
  const double ca = std::cos(cam.azimuth), sa = std::sin(cam.azimuth);
  const double ce = std::cos(cam.elevation), se = std::sin(cam.elevation);
  if (std::abs(ce) < 1e-9) {
    throw std::runtime_error("render: degenerate camera elevation");
  }
  Basis b;
  b.view[0] = ce * ca;
  b.view[1] = ce * sa;
  b.view[2] = se;
  // right = normalize(world_up x view), world_up = (0,0,1)
  const double rn = std::hypot(b.view[1], b.view[0]);
  b.right[0] = -b.view[1] / rn;
  b.right[1] = b.view[0] / rn;
  b.right[2] = 0.0;
  // up = view x right
  b.up[0] = b.view[1] * b.right[2] - b.view[2] * b.right[1];
  b.up[1] = b.view[2] * b.right[0] - b.view[0] * b.right[2];
  b.up[2] = b.view[0] * b.right[1] - b.view[1] * b.right[0];
  return b;
}

void validate_volume_render(const Camera& cam, const RenderConfig& cfg) {
  if (cam.radius <= 0.0) throw std::runtime_error("render: camera radius must be positive");
  if (cfg.width < 1 || cfg.height < 1 || cfg.ray_samples < 1) {
    throw std::runtime_error("render: degenerate image or ray sampling config");
  }
  if (cfg.start_dist < kHalfDiag) {
    throw std::runtime_error("render: ray start inside the volume (camera behind volume)");
  }
}

struct Stencil {
  std::size_t idx[8];
  double w[8];
};

// Trilinear stencil on an n^3 grid of cell centers spanning the unit cube,
// clamped at the borders. q must already be inside the cube.
Stencil trilinear(int n, const double q[3]) {
  int base[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (q[a] + 0.5) * n - 0.5;
    int i0 = static_cast<int>(std::floor(u));
    i0 = clamp_idx(i0, 0, n - 2);
    base[a] = i0;
    frac[a] = std::clamp(u - i0, 0.0, 1.0);
  }
  Stencil st;
  int c = 0;
  for (int ix = 0; ix < 2; ++ix) {
    for (int iy = 0; iy < 2; ++iy) {
      for (int iz = 0; iz < 2; ++iz, ++c) {
        st.idx[c] = (static_cast<std::size_t>(base[0] + ix) * n + (base[1] + iy)) * n +
                    (base[2] + iz);
        st.w[c] = (ix ? frac[0] : 1.0 - frac[0]) * (iy ? frac[1] : 1.0 - frac[1]) *
                  (iz ? frac[2] : 1.0 - frac[2]);
      }
    }
  }
  return st;
}

bool inside_cube(const double q[3]) {
  return std::abs(q[0]) <= 0.5 && std::abs(q[1]) <= 0.5 && std::abs(q[2]) <= 0.5;
}

}  // namespace

Camera sample_camera(RngStream& rng, const CameraConfig& cfg) {
  require(cfg.radius > 0.0, "sample_camera: radius must be positive");
  require(cfg.elevation_min <= cfg.elevation_max, "sample_camera: bad elevation bounds");
  require(cfg.jitter_max >= 0, "sample_camera: jitter_max must be >= 0");
  Camera cam;
  cam.radius = cfg.radius;
  if (cfg.planar) {
    const int j = 2 * cfg.jitter_max + 1;
    cam.dx = static_cast<int>(rng.next_below(j)) - cfg.jitter_max;
    cam.dy = static_cast<int>(rng.next_below(j)) - cfg.jitter_max;
  } else {
    cam.azimuth = rng.next_double() * 2.0 * std::numbers::pi;
    cam.elevation = cfg.elevation_min + rng.next_double() * (cfg.elevation_max - cfg.elevation_min);
  }
  return cam;
}

Vec camera_embedding(const Camera& cam, bool planar) {
  if (planar) return Vec(4, 0.0);
  return {std::cos(cam.azimuth), std::sin(cam.azimuth), std::cos(cam.elevation),
          std::sin(cam.elevation)};
}

std::vector<Camera> eval_cameras(int v, const CameraConfig& cfg) {
  require(v >= 1, "eval_cameras: need at least one view");
  std::vector<Camera> cams(v);
  for (int i = 0; i < v; ++i) {
    cams[i].radius = cfg.radius;
    if (cfg.planar) {
      const int j = std::max(1, 2 * cfg.jitter_max + 1);
      cams[i].dx = (i % j) - cfg.jitter_max;
      cams[i].dy = ((i / j) % j) - cfg.jitter_max;
    } else {
      cams[i].azimuth = 2.0 * std::numbers::pi * i / v;
    }
  }
  return cams;
}

// ---------------------------------------------------------------------------
// ImageScene
// ---------------------------------------------------------------------------

ImageScene::ImageScene(int height, int width, int channels)
    : h_(height), w_(width), c_(channels) {
  require(h_ >= 1 && w_ >= 1 && c_ >= 1, "ImageScene: bad dimensions");
  logits_.assign(static_cast<std::size_t>(h_) * w_ * c_, 0.0);
}

std::vector<std::size_t> ImageScene::shape() const {
  return {static_cast<std::size_t>(h_), static_cast<std::size_t>(w_),
          static_cast<std::size_t>(c_)};
}

Vec ImageScene::render(const Camera& cam, const RenderConfig& cfg) const {
  if (cfg.width != w_ || cfg.height != h_) {
    throw std::runtime_error("ImageScene::render: config size does not match scene");
  }
  Vec img(logits_.size());
  for (int y = 0; y < h_; ++y) {
    const int sy = clamp_idx(y + cam.dy, 0, h_ - 1);
    for (int x = 0; x < w_; ++x) {
      const int sx = clamp_idx(x + cam.dx, 0, w_ - 1);
      for (int ch = 0; ch < c_; ++ch) {
        img[(static_cast<std::size_t>(y) * w_ + x) * c_ + ch] =
            sigmoid(logits_[(static_cast<std::size_t>(sy) * w_ + sx) * c_ + ch]);
      }
    }
  }
  return img;
}

Vec ImageScene::render_vjp(const Camera& cam, const RenderConfig& cfg, const Vec& upstream) const {
  require(upstream.size() == logits_.size(), "ImageScene::render_vjp: upstream size mismatch");
  Vec grad(logits_.size(), 0.0);
  for (int y = 0; y < h_; ++y) {
    const int sy = clamp_idx(y + cam.dy, 0, h_ - 1);
    for (int x = 0; x < w_; ++x) {
      const int sx = clamp_idx(x + cam.dx, 0, w_ - 1);
      for (int ch = 0; ch < c_; ++ch) {
        const std::size_t src = (static_cast<std::size_t>(sy) * w_ + sx) * c_ + ch;
        const double p = sigmoid(logits_[src]);
        grad[src] += upstream[(static_cast<std::size_t>(y) * w_ + x) * c_ + ch] * p * (1.0 - p);
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// VoxelScene
// ---------------------------------------------------------------------------

VoxelScene::VoxelScene(int n, int channels, Vec background) : n_(n), c_(channels) {
  require(n_ >= 2 && c_ >= 1, "VoxelScene: need n >= 2 and channels >= 1");
  bg_ = background.empty() ? Vec(c_, 1.0) : std::move(background);
  require(bg_.size() == static_cast<std::size_t>(c_), "VoxelScene: background channel mismatch");
  params_.assign(static_cast<std::size_t>(n_) * n_ * n_ * (1 + c_), 0.0);
}

std::vector<std::size_t> VoxelScene::shape() const {
  return {static_cast<std::size_t>(n_), static_cast<std::size_t>(c_)};
}

namespace {

struct VoxelSample {
  Stencil st;
  double sigma_logit;
  double alpha;
  double t_before;
  double delta;
  Vec color;        // post-sigmoid
  Vec color_logit;
};

}  // namespace

Vec VoxelScene::render(const Camera& cam, const RenderConfig& cfg) const {
  validate_volume_render(cam, cfg);
  const Basis bs = camera_basis(cam);
  const std::size_t nd = static_cast<std::size_t>(n_) * n_ * n_;
  const double* dens = params_.data();
  const double* cols = params_.data() + nd;
  const double delta = 2.0 * cfg.start_dist / cfg.ray_samples;

  Vec img(static_cast<std::size_t>(cfg.width) * cfg.height * c_);
  for (int py = 0; py < cfg.height; ++py) {
    for (int px = 0; px < cfg.width; ++px) {
      const double sx = ((px + 0.5) / cfg.width - 0.5) * cfg.span;
      const double sy = (0.5 - (py + 0.5) / cfg.height) * cfg.span;
      double o[3];
      for (int a = 0; a < 3; ++a) {
        o[a] = bs.view[a] * cfg.start_dist + bs.right[a] * sx + bs.up[a] * sy;
      }
      double t_acc = 1.0;
      Vec pix(c_, 0.0);
      for (int i = 0; i < cfg.ray_samples; ++i) {
        const double tau = (i + 0.5) * delta;
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = o[a] - bs.view[a] * tau;
        if (!inside_cube(q)) continue;
        const Stencil st = trilinear(n_, q);
        double dl = 0.0;
        for (int k = 0; k < 8; ++k) dl += st.w[k] * dens[st.idx[k]];
        const double sigma = softplus(dl);
        const double alpha = std::min(1.0 - std::exp(-sigma * delta), kAlphaMax);
        const double wgt = t_acc * alpha;
        for (int ch = 0; ch < c_; ++ch) {
          double cl = 0.0;
          for (int k = 0; k < 8; ++k) cl += st.w[k] * cols[st.idx[k] * c_ + ch];
          pix[ch] += wgt * sigmoid(cl);
        }
        t_acc *= 1.0 - alpha;
      }
      for (int ch = 0; ch < c_; ++ch) {
        img[(static_cast<std::size_t>(py) * cfg.width + px) * c_ + ch] = pix[ch] + t_acc * bg_[ch];
      }
    }
  }
  return img;
}

Vec VoxelScene::render_vjp(const Camera& cam, const RenderConfig& cfg, const Vec& upstream) const {
  validate_volume_render(cam, cfg);
  require(upstream.size() == static_cast<std::size_t>(cfg.width) * cfg.height * c_,
          "VoxelScene::render_vjp: upstream size mismatch");
  const Basis bs = camera_basis(cam);
  const std::size_t nd = static_cast<std::size_t>(n_) * n_ * n_;
  const double* dens = params_.data();
  const double* cols = params_.data() + nd;
  const double delta = 2.0 * cfg.start_dist / cfg.ray_samples;

  Vec grad(params_.size(), 0.0);
  double* gdens = grad.data();
  double* gcols = grad.data() + nd;
  std::vector<VoxelSample> recs;
  recs.reserve(cfg.ray_samples);

  for (int py = 0; py < cfg.height; ++py) {
    for (int px = 0; px < cfg.width; ++px) {
      const double sx = ((px + 0.5) / cfg.width - 0.5) * cfg.span;
      const double sy = (0.5 - (py + 0.5) / cfg.height) * cfg.span;
      double o[3];
      for (int a = 0; a < 3; ++a) {
        o[a] = bs.view[a] * cfg.start_dist + bs.right[a] * sx + bs.up[a] * sy;
      }
      recs.clear();
      double t_acc = 1.0;
      for (int i = 0; i < cfg.ray_samples; ++i) {
        const double tau = (i + 0.5) * delta;
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = o[a] - bs.view[a] * tau;
        if (!inside_cube(q)) continue;
        VoxelSample rec;
        rec.st = trilinear(n_, q);
        double dl = 0.0;
        for (int k = 0; k < 8; ++k) dl += rec.st.w[k] * dens[rec.st.idx[k]];
        rec.sigma_logit = dl;
        rec.alpha = std::min(1.0 - std::exp(-softplus(dl) * delta), kAlphaMax);
        rec.t_before = t_acc;
        rec.delta = delta;
        rec.color.resize(c_);
        rec.color_logit.resize(c_);
        for (int ch = 0; ch < c_; ++ch) {
          double cl = 0.0;
          for (int k = 0; k < 8; ++k) cl += rec.st.w[k] * cols[rec.st.idx[k] * c_ + ch];
          rec.color_logit[ch] = cl;
          rec.color[ch] = sigmoid(cl);
        }
        t_acc *= 1.0 - rec.alpha;
        recs.push_back(std::move(rec));
      }

      const double* up = upstream.data() + (static_cast<std::size_t>(py) * cfg.width + px) * c_;
      // suffix[ch]: contribution of everything behind the current sample
      Vec suffix(c_);
      for (int ch = 0; ch < c_; ++ch) suffix[ch] = t_acc * bg_[ch];
      for (int i = static_cast<int>(recs.size()) - 1; i >= 0; --i) {
        const VoxelSample& r = recs[i];
        const double wgt = r.t_before * r.alpha;
        double dalpha = 0.0;
        for (int ch = 0; ch < c_; ++ch) {
          // color path
          const double dcol = up[ch] * wgt;
          const double p = r.color[ch];
          const double dcl = dcol * p * (1.0 - p);
          for (int k = 0; k < 8; ++k) gcols[r.st.idx[k] * c_ + ch] += dcl * r.st.w[k];
          // alpha path: pixel = ... + T_i alpha_i c_i + (1-alpha_i) * suffix_excl
          dalpha += up[ch] * (r.t_before * r.color[ch] - suffix[ch] / (1.0 - r.alpha));
        }
        const double sigma = softplus(r.sigma_logit);
        const double dsigma = dalpha * r.delta * std::exp(-sigma * r.delta);
        const double ddl = dsigma * sigmoid(r.sigma_logit);
        for (int k = 0; k < 8; ++k) gdens[r.st.idx[k]] += ddl * r.st.w[k];
        for (int ch = 0; ch < c_; ++ch) suffix[ch] += wgt * r.color[ch];
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// GridMlpField
// ---------------------------------------------------------------------------

GridMlpField::GridMlpField(int n, int features, int hidden, int channels, Vec background)
    : n_(n), f_(features), hidden_(hidden), c_(channels) {
  require(n_ >= 2 && f_ >= 1 && hidden_ >= 1 && c_ >= 1, "GridMlpField: bad dimensions");
  bg_ = background.empty() ? Vec(c_, 1.0) : std::move(background);
  require(bg_.size() == static_cast<std::size_t>(c_), "GridMlpField: background channel mismatch");
  const Layout lay = layout();
  params_.assign(lay.color_offset + lay.color_size, 0.0);
}

GridMlpField::Layout GridMlpField::layout() const {
  Layout l{};
  l.grid_offset = 0;
  l.grid_size = static_cast<std::size_t>(n_) * n_ * n_ * f_;
  l.density_offset = l.grid_offset + l.grid_size;
  const std::size_t d_w1 = static_cast<std::size_t>(hidden_) * f_ + hidden_;
  const std::size_t d_w2 = static_cast<std::size_t>(hidden_) + 1;
  l.density_size = d_w1 + d_w2;
  l.density_last_offset = l.density_offset + d_w1;
  l.density_last_size = d_w2;
  l.color_offset = l.density_offset + l.density_size;
  const std::size_t c_w1 = static_cast<std::size_t>(hidden_) * f_ + hidden_;
  const std::size_t c_w2 = static_cast<std::size_t>(c_) * hidden_ + c_;
  l.color_size = c_w1 + c_w2;
  l.color_last_offset = l.color_offset + c_w1;
  l.color_last_size = c_w2;
  return l;
}

std::vector<std::size_t> GridMlpField::shape() const {
  return {static_cast<std::size_t>(n_), static_cast<std::size_t>(f_),
          static_cast<std::size_t>(hidden_), static_cast<std::size_t>(c_)};
}

void GridMlpField::init(RngStream& rng, double grid_scale) {
  const Layout l = layout();
  for (std::size_t i = 0; i < l.grid_size; ++i) params_[i] = grid_scale * rng.next_gaussian();
  auto init_head = [&](std::size_t off, int in, int out) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    for (int j = 0; j < hidden_ * in; ++j) params_[off + j] = s1 * rng.next_gaussian();
    // biases at zero
    const std::size_t w2 = off + static_cast<std::size_t>(hidden_) * in + hidden_;
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
    for (int j = 0; j < out * hidden_; ++j) params_[w2 + j] = s2 * rng.next_gaussian();
  };
  init_head(l.density_offset, f_, 1);
  init_head(l.color_offset, f_, c_);
}

namespace {

// Two-layer rectified-linear head over a flat parameter block:
// [W1(hidden x in) | b1 | W2(out x hidden) | b2]
void head_forward(const double* p, int in, int hidden, int out, const double* feat, double* h_pre,
                  double* h, double* y) {
  const double* w1 = p;
  const double* b1 = p + static_cast<std::size_t>(hidden) * in;
  const double* w2 = b1 + hidden;
  const double* b2 = w2 + static_cast<std::size_t>(out) * hidden;
  for (int j = 0; j < hidden; ++j) {
    double s = b1[j];
    const double* row = w1 + static_cast<std::size_t>(j) * in;
    for (int i = 0; i < in; ++i) s += row[i] * feat[i];
    h_pre[j] = s;
    h[j] = s > 0.0 ? s : 0.0;
  }
  for (int o = 0; o < out; ++o) {
    double s = b2[o];
    const double* row = w2 + static_cast<std::size_t>(o) * hidden;
    for (int j = 0; j < hidden; ++j) s += row[j] * h[j];
    y[o] = s;
  }
}

// Accumulates head parameter grads into gp and feature grads into gfeat.
void head_backward(const double* p, double* gp, int in, int hidden, int out, const double* feat,
                   const double* h_pre, const double* h, const double* dy, double* gfeat) {
  const double* w1 = p;
  const double* w2 = p + static_cast<std::size_t>(hidden) * in + hidden;
  double* gw1 = gp;
  double* gb1 = gp + static_cast<std::size_t>(hidden) * in;
  double* gw2 = gb1 + hidden;
  double* gb2 = gw2 + static_cast<std::size_t>(out) * hidden;

  std::vector<double> dh(hidden, 0.0);
  for (int o = 0; o < out; ++o) {
    const double d = dy[o];
    gb2[o] += d;
    const double* row = w2 + static_cast<std::size_t>(o) * hidden;
    double* grow = gw2 + static_cast<std::size_t>(o) * hidden;
    for (int j = 0; j < hidden; ++j) {
      grow[j] += d * h[j];
      dh[j] += d * row[j];
    }
  }
  for (int j = 0; j < hidden; ++j) {
    const double d = h_pre[j] > 0.0 ? dh[j] : 0.0;
    if (d == 0.0) continue;
    gb1[j] += d;
    const double* row = w1 + static_cast<std::size_t>(j) * in;
    double* grow = gw1 + static_cast<std::size_t>(j) * in;
    for (int i = 0; i < in; ++i) {
      grow[i] += d * feat[i];
      gfeat[i] += d * row[i];
    }
  }
}

}  // namespace

Vec GridMlpField::grid_features_at(const Vec& point) const {
  require(point.size() == 3, "GridMlpField: points are 3-D");
  double q[3] = {point[0], point[1], point[2]};
  require(inside_cube(q), "GridMlpField: probe point outside the grid");
  const Stencil st = trilinear(n_, q);
  Vec feat(f_, 0.0);
  for (int k = 0; k < 8; ++k) {
    const double* node = params_.data() + st.idx[k] * f_;
    for (int i = 0; i < f_; ++i) feat[i] += st.w[k] * node[i];
  }
  return feat;
}

double GridMlpField::density_at(const Vec& point) const {
  const Vec feat = grid_features_at(point);
  const Layout l = layout();
  Vec h_pre(hidden_), h(hidden_), y(1);
  head_forward(params_.data() + l.density_offset, f_, hidden_, 1, feat.data(), h_pre.data(),
               h.data(), y.data());
  return softplus(y[0]);
}

Vec GridMlpField::color_at(const Vec& point) const {
  const Vec feat = grid_features_at(point);
  const Layout l = layout();
  Vec h_pre(hidden_), h(hidden_), y(c_);
  head_forward(params_.data() + l.color_offset, f_, hidden_, c_, feat.data(), h_pre.data(),
               h.data(), y.data());
  for (double& v : y) v = sigmoid(v);
  return y;
}

namespace {

struct FieldSample {
  Stencil st;
  Vec feat;
  Vec d_hpre, d_h;
  double d_out;
  Vec c_hpre, c_h, c_out;
  double alpha;
  double t_before;
  Vec color;
};

}  // namespace

Vec GridMlpField::render(const Camera& cam, const RenderConfig& cfg) const {
  validate_volume_render(cam, cfg);
  const Basis bs = camera_basis(cam);
  const Layout l = layout();
  const double delta = 2.0 * cfg.start_dist / cfg.ray_samples;
  Vec img(static_cast<std::size_t>(cfg.width) * cfg.height * c_);
  Vec feat(f_), h_pre(hidden_), h(hidden_), yd(1), yc(c_);
  for (int py = 0; py < cfg.height; ++py) {
    for (int px = 0; px < cfg.width; ++px) {
      const double sx = ((px + 0.5) / cfg.width - 0.5) * cfg.span;
      const double sy = (0.5 - (py + 0.5) / cfg.height) * cfg.span;
      double o[3];
      for (int a = 0; a < 3; ++a) {
        o[a] = bs.view[a] * cfg.start_dist + bs.right[a] * sx + bs.up[a] * sy;
      }
      double t_acc = 1.0;
      Vec pix(c_, 0.0);
      for (int i = 0; i < cfg.ray_samples; ++i) {
        const double tau = (i + 0.5) * delta;
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = o[a] - bs.view[a] * tau;
        if (!inside_cube(q)) continue;
        const Stencil st = trilinear(n_, q);
        std::fill(feat.begin(), feat.end(), 0.0);
        for (int k = 0; k < 8; ++k) {
          const double* node = params_.data() + st.idx[k] * f_;
          for (int fi = 0; fi < f_; ++fi) feat[fi] += st.w[k] * node[fi];
        }
        head_forward(params_.data() + l.density_offset, f_, hidden_, 1, feat.data(), h_pre.data(),
                     h.data(), yd.data());
        const double sigma = softplus(yd[0]);
        const double alpha = std::min(1.0 - std::exp(-sigma * delta), kAlphaMax);
        head_forward(params_.data() + l.color_offset, f_, hidden_, c_, feat.data(), h_pre.data(),
                     h.data(), yc.data());
        const double wgt = t_acc * alpha;
        for (int ch = 0; ch < c_; ++ch) pix[ch] += wgt * sigmoid(yc[ch]);
        t_acc *= 1.0 - alpha;
      }
      for (int ch = 0; ch < c_; ++ch) {
        img[(static_cast<std::size_t>(py) * cfg.width + px) * c_ + ch] = pix[ch] + t_acc * bg_[ch];
      }
    }
  }
  return img;
}

Vec GridMlpField::render_vjp(const Camera& cam, const RenderConfig& cfg,
                             const Vec& upstream) const {
  validate_volume_render(cam, cfg);
  require(upstream.size() == static_cast<std::size_t>(cfg.width) * cfg.height * c_,
          "GridMlpField::render_vjp: upstream size mismatch");
  const Basis bs = camera_basis(cam);
  const Layout l = layout();
  const double delta = 2.0 * cfg.start_dist / cfg.ray_samples;
  Vec grad(params_.size(), 0.0);
  std::vector<FieldSample> recs;
  recs.reserve(cfg.ray_samples);
  Vec gfeat(f_);

  for (int py = 0; py < cfg.height; ++py) {
    for (int px = 0; px < cfg.width; ++px) {
      const double sx = ((px + 0.5) / cfg.width - 0.5) * cfg.span;
      const double sy = (0.5 - (py + 0.5) / cfg.height) * cfg.span;
      double o[3];
      for (int a = 0; a < 3; ++a) {
        o[a] = bs.view[a] * cfg.start_dist + bs.right[a] * sx + bs.up[a] * sy;
      }
      recs.clear();
      double t_acc = 1.0;
      for (int i = 0; i < cfg.ray_samples; ++i) {
        const double tau = (i + 0.5) * delta;
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = o[a] - bs.view[a] * tau;
        if (!inside_cube(q)) continue;
        FieldSample rec;
        rec.st = trilinear(n_, q);
        rec.feat.assign(f_, 0.0);
        for (int k = 0; k < 8; ++k) {
          const double* node = params_.data() + rec.st.idx[k] * f_;
          for (int fi = 0; fi < f_; ++fi) rec.feat[fi] += rec.st.w[k] * node[fi];
        }
        rec.d_hpre.resize(hidden_);
        rec.d_h.resize(hidden_);
        Vec yd(1);
        head_forward(params_.data() + l.density_offset, f_, hidden_, 1, rec.feat.data(),
                     rec.d_hpre.data(), rec.d_h.data(), yd.data());
        rec.d_out = yd[0];
        const double sigma = softplus(yd[0]);
        rec.alpha = std::min(1.0 - std::exp(-sigma * delta), kAlphaMax);
        rec.c_hpre.resize(hidden_);
        rec.c_h.resize(hidden_);
        rec.c_out.resize(c_);
        head_forward(params_.data() + l.color_offset, f_, hidden_, c_, rec.feat.data(),
                     rec.c_hpre.data(), rec.c_h.data(), rec.c_out.data());
        rec.color.resize(c_);
        for (int ch = 0; ch < c_; ++ch) rec.color[ch] = sigmoid(rec.c_out[ch]);
        rec.t_before = t_acc;
        t_acc *= 1.0 - rec.alpha;
        recs.push_back(std::move(rec));
      }

      const double* up = upstream.data() + (static_cast<std::size_t>(py) * cfg.width + px) * c_;
      Vec suffix(c_);
      for (int ch = 0; ch < c_; ++ch) suffix[ch] = t_acc * bg_[ch];
      for (int i = static_cast<int>(recs.size()) - 1; i >= 0; --i) {
        const FieldSample& r = recs[i];
        const double wgt = r.t_before * r.alpha;
        std::fill(gfeat.begin(), gfeat.end(), 0.0);
        Vec dyc(c_);
        double dalpha = 0.0;
        for (int ch = 0; ch < c_; ++ch) {
          const double p = r.color[ch];
          dyc[ch] = up[ch] * wgt * p * (1.0 - p);
          dalpha += up[ch] * (r.t_before * r.color[ch] - suffix[ch] / (1.0 - r.alpha));
        }
        head_backward(params_.data() + l.color_offset, grad.data() + l.color_offset, f_, hidden_,
                      c_, r.feat.data(), r.c_hpre.data(), r.c_h.data(), dyc.data(), gfeat.data());
        const double sigma = softplus(r.d_out);
        const double dsigma = dalpha * delta * std::exp(-sigma * delta);
        const double dyd = dsigma * sigmoid(r.d_out);
        head_backward(params_.data() + l.density_offset, grad.data() + l.density_offset, f_,
                      hidden_, 1, r.feat.data(), r.d_hpre.data(), r.d_h.data(), &dyd,
                      gfeat.data());
        for (int k = 0; k < 8; ++k) {
          double* node = grad.data() + r.st.idx[k] * f_;
          for (int fi = 0; fi < f_; ++fi) node[fi] += r.st.w[k] * gfeat[fi];
        }
        for (int ch = 0; ch < c_; ++ch) suffix[ch] += wgt * r.color[ch];
      }
    }
  }
  return grad;
}

std::unique_ptr<Scene> make_scene(std::string_view kind, const std::vector<std::size_t>& shape) {
  if (kind == "image") {
    require(shape.size() == 3, "make_scene: image shape is {h, w, c}");
    return std::make_unique<ImageScene>(static_cast<int>(shape[0]), static_cast<int>(shape[1]),
                                        static_cast<int>(shape[2]));
  }
  if (kind == "voxel") {
    require(shape.size() == 2, "make_scene: voxel shape is {n, c}");
    return std::make_unique<VoxelScene>(static_cast<int>(shape[0]), static_cast<int>(shape[1]));
  }
  if (kind == "grid_mlp") {
    require(shape.size() == 4, "make_scene: grid_mlp shape is {n, f, hidden, c}");
    return std::make_unique<GridMlpField>(static_cast<int>(shape[0]), static_cast<int>(shape[1]),
                                          static_cast<int>(shape[2]), static_cast<int>(shape[3]));
  }
  throw std::invalid_argument("make_scene: unknown scene kind '" + std::string(kind) + "'");
}

}  // namespace sdlab
