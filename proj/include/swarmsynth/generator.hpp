#pragma once

// Toy conditional denoising-diffusion generator: linear noise schedule, a small
// residual MLP noise predictor with hand-written backward pass, L_simple
// training, strided ancestral sampling, classifier-free guidance and masked
// guidance injection.
//
// Images are in [0,1] at the API boundary. Training and sampling operate on the
// centered values 2x - 1 so the terminal marginal is roughly zero-mean.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "swarmsynth/core.hpp"

namespace swarmsynth::generator {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // index t-1 holds beta_t
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // running product

  static NoiseSchedule linear(int T = 100, double beta_1 = 1e-4, double beta_T = 0.02) {
    if (T < 1) throw InvalidArgument("schedule needs T >= 1");
    if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) {
      throw InvalidArgument("schedule needs 0 < beta_1 <= beta_T < 1");
    }
    NoiseSchedule s;
    s.T = T;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double b = T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * (t - 1) / (T - 1);
      s.beta.push_back(b);
      s.alpha.push_back(1.0 - b);
      prod *= 1.0 - b;
      s.alpha_bar.push_back(prod);
    }
    return s;
  }

  /// alpha_bar for t in [0, T], with alpha_bar(0) = 1.
  double abar(int t) const {
    if (t < 0 || t > T) throw InvalidArgument("timestep out of range");
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
  }
};

inline Image forward_diffuse(const Image& x0, int t, const Image& eps, const NoiseSchedule& sched) {
  if (!x0.same_shape(eps)) throw InvalidArgument("noise must have the image's shape");
  const double ab = sched.abar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Image out = x0;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

// ---------------------------------------------------------------------------
// Conditioning

struct Conditioning {
  std::vector<double> semantic;
  std::vector<double> pose;
  bool null = false;

  std::size_t size() const { return semantic.size() + pose.size() + 1; }
  /// [semantic, pose, 1]; all zeros for the null branch.
  std::vector<double> flatten() const {
    std::vector<double> v(size(), 0.0);
    if (null) return v;
    std::copy(semantic.begin(), semantic.end(), v.begin());
    std::copy(pose.begin(), pose.end(), v.begin() + static_cast<std::ptrdiff_t>(semantic.size()));
    v.back() = 1.0;
    return v;
  }
  Conditioning as_null() const {
    Conditioning c;
    c.semantic.assign(semantic.size(), 0.0);
    c.pose.assign(pose.size(), 0.0);
    c.null = true;
    return c;
  }
};

inline constexpr int kPoseFrequencies = 2;
inline constexpr std::size_t kPoseEncodingSize = 7 * kPoseFrequencies * 2;

/// Sinusoidal features of (position / scale, quaternion).
inline std::vector<double> pose_encoding(const Pose& pose, double scale) {
  if (!(scale > 0.0)) throw InvalidArgument("pose encoding scale must be positive");
  const std::array<double, 7> raw{pose.position.x / scale, pose.position.y / scale, pose.position.z / scale,
                                  pose.orientation.w, pose.orientation.x, pose.orientation.y, pose.orientation.z};
  std::vector<double> v;
  v.reserve(kPoseEncodingSize);
  for (double r : raw) {
    for (int k = 0; k < kPoseFrequencies; ++k) {
      const double f = M_PI * static_cast<double>(1 << k);
      v.push_back(std::sin(f * r));
      v.push_back(std::cos(f * r));
    }
  }
  return v;
}

/// Fixed seeded Gaussian projection of a semantic embedding to `out_dim` features.
inline std::vector<double> project_embedding(std::span<const double> embedding, std::size_t out_dim,
                                             std::uint64_t seed) {
  std::vector<double> out(out_dim, 0.0);
  Rng rng(mix64(seed ^ 0x5e3a7c1dULL));
  const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, embedding.size())));
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    for (double e : embedding) acc += gaussian(rng) * e;
    out[o] = acc * scale;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

struct Architecture {
  int width = 16;
  int height = 16;
  int channels = 3;
  int cond = 1;
  int temb = 16;
  int hidden = 64;
  int blocks = 2;
  // Centered-pixel statistics assumed by the skip path, in thousandths.
  int data_mean_milli = 0;
  int data_std_milli = 1000;

  double data_mean() const { return data_mean_milli / 1000.0; }
  double data_std() const { return data_std_milli / 1000.0; }
  int pixels() const { return width * height * channels; }
  int context() const { return temb + cond; }

  std::string descriptor() const {
    std::ostringstream s;
    s << "resmlp:w=" << width << ",h=" << height << ",c=" << channels << ",cond=" << cond << ",temb=" << temb
      << ",hidden=" << hidden << ",blocks=" << blocks;
    if (data_mean_milli != 0 || data_std_milli != 1000) s << ",mu=" << data_mean_milli << ",sd=" << data_std_milli;
    return s.str();
  }

  static Architecture parse(const std::string& d) {
    const std::string prefix = "resmlp:";
    if (d.rfind(prefix, 0) != 0) throw InvalidArgument("unknown denoiser architecture: " + d);
    std::map<std::string, int> kv;
    std::stringstream ss(d.substr(prefix.size()));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw InvalidArgument("malformed architecture descriptor: " + d);
      kv[item.substr(0, eq)] = std::stoi(item.substr(eq + 1));
    }
    Architecture a;
    for (auto [key, field] : {std::pair{"w", &a.width}, {"h", &a.height}, {"c", &a.channels}, {"cond", &a.cond},
                              {"temb", &a.temb}, {"hidden", &a.hidden}, {"blocks", &a.blocks}}) {
      const auto it = kv.find(key);
      if (it == kv.end()) throw InvalidArgument(std::string("architecture descriptor lacks ") + key);
      *field = it->second;
    }
    if (kv.count("mu") != kv.count("sd")) throw InvalidArgument("architecture descriptor needs both mu and sd");
    if (kv.count("mu")) {
      a.data_mean_milli = kv["mu"];
      a.data_std_milli = kv["sd"];
    }
    if (a.width <= 0 || a.height <= 0 || a.channels <= 0 || a.cond < 1 || a.temb < 2 || a.temb % 2 || a.hidden <= 0 ||
        a.blocks < 0 || a.data_std_milli <= 0 || std::abs(a.data_mean_milli) > 1000) {
      throw InvalidArgument("invalid architecture descriptor: " + d);
    }
    return a;
  }

  std::size_t parameter_count() const {
    const std::size_t D = static_cast<std::size_t>(pixels()), H = static_cast<std::size_t>(hidden),
                      K = static_cast<std::size_t>(context());
    return H * (D + K) + H + static_cast<std::size_t>(blocks) * (H * (H + K) + H + H * H + H) + D * H + D;
  }
};

struct DenoiserParams {
  std::string descriptor;
  std::vector<double> values;

  Architecture arch() const { return Architecture::parse(descriptor); }
  friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

namespace detail {

inline double silu(double u) { return u * sigmoid(u); }
inline double silu_grad(double u) {
  const double s = sigmoid(u);
  return s * (1.0 + u * (1.0 - s));
}

struct Offsets {
  std::size_t w0, b0;
  std::vector<std::size_t> a, ab, b, bb;
  std::size_t wo, bo;
};

inline Offsets offsets(const Architecture& ar) {
  const std::size_t D = static_cast<std::size_t>(ar.pixels()), H = static_cast<std::size_t>(ar.hidden),
                    K = static_cast<std::size_t>(ar.context());
  Offsets o{};
  std::size_t p = 0;
  o.w0 = p;
  p += H * (D + K);
  o.b0 = p;
  p += H;
  for (int j = 0; j < ar.blocks; ++j) {
    o.a.push_back(p);
    p += H * (H + K);
    o.ab.push_back(p);
    p += H;
    o.b.push_back(p);
    p += H * H;
    o.bb.push_back(p);
    p += H;
  }
  o.wo = p;
  p += D * H;
  o.bo = p;
  return o;
}

// y[r] = b[r] + sum_c W[r, c] x[c], W row-major rows x cols
inline void affine(const double* W, const double* b, const double* x, std::size_t rows, std::size_t cols, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* w = W + r * cols;
    double acc = b[r];
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

// dW += dy x^T, db += dy, dx += W^T dy (dx may be null)
inline void affine_backward(const double* W, const double* x, const double* dy, std::size_t rows, std::size_t cols,
                            double* dW, double* db, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    double* dw = dW + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dw[c] += g * x[c];
    db[r] += g;
    if (dx) {
      const double* w = W + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] += g * w[c];
    }
  }
}

}  // namespace detail

/// Sinusoidal embedding of an integer timestep.
inline std::vector<double> timestep_embedding(int t, int dim) {
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(1000.0) * k / std::max(1, half - 1));
    e[static_cast<std::size_t>(2 * k)] = std::sin(t * freq);
    e[static_cast<std::size_t>(2 * k + 1)] = std::cos(t * freq);
  }
  return e;
}

inline DenoiserParams init_denoiser(const Architecture& ar, std::uint64_t seed) {
  DenoiserParams p{ar.descriptor(), std::vector<double>(ar.parameter_count(), 0.0)};
  const auto o = detail::offsets(ar);
  const std::size_t D = static_cast<std::size_t>(ar.pixels()), H = static_cast<std::size_t>(ar.hidden),
                    K = static_cast<std::size_t>(ar.context());
  Rng rng(mix64(seed));
  const auto fill = [&](std::size_t at, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) p.values[at + i] = stddev * gaussian(rng);
  };
  fill(o.w0, H * (D + K), 1.0 / std::sqrt(static_cast<double>(D + K)));
  for (int j = 0; j < ar.blocks; ++j) {
    fill(o.a[static_cast<std::size_t>(j)], H * (H + K), 1.0 / std::sqrt(static_cast<double>(H + K)));
    fill(o.b[static_cast<std::size_t>(j)], H * H, 0.5 / std::sqrt(static_cast<double>(H)));
  }
  fill(o.wo, D * H, 0.1 / std::sqrt(static_cast<double>(H)));
  return p;
}

/// Residual MLP noise predictor with reusable activation buffers. One instance per thread.
class Denoiser {
 public:
  explicit Denoiser(const Architecture& ar) : ar_(ar), off_(detail::offsets(ar)) {
    const std::size_t D = static_cast<std::size_t>(ar.pixels()), H = static_cast<std::size_t>(ar.hidden),
                      K = static_cast<std::size_t>(ar.context());
    in0_.resize(D + K);
    u0_.resize(H);
    h_.assign(static_cast<std::size_t>(ar.blocks) + 1, std::vector<double>(H));
    cat_.assign(static_cast<std::size_t>(ar.blocks), std::vector<double>(H + K));
    v_.assign(static_cast<std::size_t>(ar.blocks), std::vector<double>(H));
    s_.assign(static_cast<std::size_t>(ar.blocks), std::vector<double>(H));
    out_.resize(D);
  }

  const Architecture& arch() const { return ar_; }

  /// Predicted noise for centered input x (length pixels()), timestep t, flattened conditioning.
  const std::vector<double>& forward(const std::vector<double>& params, std::span<const double> x, int t,
                                     double abar, std::span<const double> cond) {
    const std::size_t D = static_cast<std::size_t>(ar_.pixels()), H = static_cast<std::size_t>(ar_.hidden),
                      K = static_cast<std::size_t>(ar_.context());
    if (x.size() != D) throw InvalidArgument("denoiser input has the wrong size");
    if (cond.size() != static_cast<std::size_t>(ar_.cond)) throw InvalidArgument("conditioning has the wrong size");
    if (params.size() != ar_.parameter_count()) throw InvalidArgument("parameter vector has the wrong size");
    const std::vector<double> temb = timestep_embedding(t, ar_.temb);
    ctx_.assign(temb.begin(), temb.end());
    ctx_.insert(ctx_.end(), cond.begin(), cond.end());

    std::copy(x.begin(), x.end(), in0_.begin());
    std::copy(ctx_.begin(), ctx_.end(), in0_.begin() + static_cast<std::ptrdiff_t>(D));
    const double* P = params.data();
    detail::affine(P + off_.w0, P + off_.b0, in0_.data(), H, D + K, u0_.data());
    for (std::size_t i = 0; i < H; ++i) h_[0][i] = detail::silu(u0_[i]);
    for (std::size_t j = 0; j < static_cast<std::size_t>(ar_.blocks); ++j) {
      std::copy(h_[j].begin(), h_[j].end(), cat_[j].begin());
      std::copy(ctx_.begin(), ctx_.end(), cat_[j].begin() + static_cast<std::ptrdiff_t>(H));
      detail::affine(P + off_.a[j], P + off_.ab[j], cat_[j].data(), H, H + K, v_[j].data());
      for (std::size_t i = 0; i < H; ++i) s_[j][i] = detail::silu(v_[j][i]);
      detail::affine(P + off_.b[j], P + off_.bb[j], s_[j].data(), H, H, h_[j + 1].data());
      for (std::size_t i = 0; i < H; ++i) h_[j + 1][i] += h_[j][i];
    }
    detail::affine(P + off_.wo, P + off_.bo, h_.back().data(), D, H, out_.data());
    // eps = c_skip (x - sqrt(abar) mu) + c_out F: the affine part is the best linear
    // noise estimate for pixels with mean mu and std sd, so F has a unit-variance target.
    const double mu = ar_.data_mean(), s2 = ar_.data_std() * ar_.data_std();
    const double denom = abar * s2 + (1.0 - abar);
    c_skip_ = std::sqrt(1.0 - abar) / denom;
    c_out_ = std::sqrt(abar * s2 / denom);
    const double shift = std::sqrt(abar) * mu;
    for (std::size_t i = 0; i < D; ++i) out_[i] = c_skip_ * (x[i] - shift) + c_out_ * out_[i];
    return out_;
  }

  /// Accumulates d(loss)/d(params) into grad given d(loss)/d(output) for the last forward call.
  void backward(const std::vector<double>& params, std::span<const double> d_out, std::vector<double>& grad) {
    const std::size_t D = static_cast<std::size_t>(ar_.pixels()), H = static_cast<std::size_t>(ar_.hidden),
                      K = static_cast<std::size_t>(ar_.context());
    grad.resize(params.size(), 0.0);
    const double* P = params.data();
    double* G = grad.data();
    dh_.assign(H, 0.0);
    dy_.resize(D);
    for (std::size_t i = 0; i < D; ++i) dy_[i] = c_out_ * d_out[i];
    detail::affine_backward(P + off_.wo, h_.back().data(), dy_.data(), D, H, G + off_.wo, G + off_.bo, dh_.data());
    for (std::size_t j = static_cast<std::size_t>(ar_.blocks); j-- > 0;) {
      ds_.assign(H, 0.0);
      detail::affine_backward(P + off_.b[j], s_[j].data(), dh_.data(), H, H, G + off_.b[j], G + off_.bb[j], ds_.data());
      for (std::size_t i = 0; i < H; ++i) ds_[i] *= detail::silu_grad(v_[j][i]);
      dcat_.assign(H + K, 0.0);
      detail::affine_backward(P + off_.a[j], cat_[j].data(), ds_.data(), H, H + K, G + off_.a[j], G + off_.ab[j],
                              dcat_.data());
      for (std::size_t i = 0; i < H; ++i) dh_[i] += dcat_[i];
    }
    for (std::size_t i = 0; i < H; ++i) dh_[i] *= detail::silu_grad(u0_[i]);
    detail::affine_backward(P + off_.w0, in0_.data(), dh_.data(), H, D + K, G + off_.w0, G + off_.b0, nullptr);
  }

 private:
  Architecture ar_;
  detail::Offsets off_;
  std::vector<double> ctx_, in0_, u0_, out_, dy_, dh_, ds_, dcat_;
  double c_skip_ = 0.0, c_out_ = 1.0;
  std::vector<std::vector<double>> h_, cat_, v_, s_;
};

inline std::vector<double> center(const Image& img) {
  std::vector<double> v(img.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0 * img.data[i] - 1.0;
  return v;
}

inline Image uncenter(std::span<const double> v, int width, int height) {
  Image img(width, height);
  for (std::size_t i = 0; i < v.size(); ++i) img.data[i] = std::clamp(0.5 * (v[i] + 1.0), 0.0, 1.0);
  return img;
}

// ---------------------------------------------------------------------------
// Training

inline constexpr double kDefaultUncondProbability = 0.1;

/// One L_simple draw: timestep, whether the conditioning is dropped, and the noise.
struct TrainingDraw {
  int t = 1;
  bool drop = false;
  std::vector<double> eps;
};

inline TrainingDraw draw_training_example(std::size_t pixels, const NoiseSchedule& sched, double p_uncond, Rng& rng) {
  TrainingDraw d;
  d.t = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(sched.T)));
  d.drop = uniform01(rng) < p_uncond;
  d.eps.resize(pixels);
  for (double& e : d.eps) e = gaussian(rng);
  return d;
}

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// L_simple for an arbitrary noise predictor `eps_fn(x_t, t, cond_flat) -> noise`.
/// Consumes the RNG exactly like training_loss.
template <class Predictor>
double simple_loss(const Predictor& eps_fn, const Image& x0, const Conditioning& c, const NoiseSchedule& sched,
                   Rng& rng, double p_uncond = kDefaultUncondProbability) {
  const std::vector<double> x = center(x0);
  const TrainingDraw d = draw_training_example(x.size(), sched, p_uncond, rng);
  const double ab = sched.abar(d.t);
  std::vector<double> xt(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xt[i] = std::sqrt(ab) * x[i] + std::sqrt(1.0 - ab) * d.eps[i];
  const std::vector<double> cf = (d.drop ? c.as_null() : c).flatten();
  const std::vector<double> pred = eps_fn(xt, d.t, cf);
  CompensatedSum acc;
  for (std::size_t i = 0; i < x.size(); ++i) acc.add((d.eps[i] - pred[i]) * (d.eps[i] - pred[i]));
  return acc.value() / static_cast<double>(x.size());
}

/// L_simple and its exact parameter gradient; accumulates into `out` when given.
inline double training_loss_into(Denoiser& net, const DenoiserParams& params, const Image& x0, const Conditioning& c,
                                 const NoiseSchedule& sched, Rng& rng, std::vector<double>& grad, double weight = 1.0,
                                 double p_uncond = kDefaultUncondProbability) {
  const Architecture& ar = net.arch();
  if (x0.width != ar.width || x0.height != ar.height) throw InvalidArgument("image does not match the denoiser");
  const std::vector<double> x = center(x0);
  const TrainingDraw d = draw_training_example(x.size(), sched, p_uncond, rng);
  const double ab = sched.abar(d.t);
  std::vector<double> xt(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xt[i] = std::sqrt(ab) * x[i] + std::sqrt(1.0 - ab) * d.eps[i];
  const std::vector<double> cf = (d.drop ? c.as_null() : c).flatten();
  const std::vector<double>& pred = net.forward(params.values, xt, d.t, ab, cf);
  CompensatedSum acc;
  std::vector<double> dy(x.size());
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = pred[i] - d.eps[i];
    acc.add(r * r);
    dy[i] = weight * 2.0 * r / n;
  }
  const double loss = acc.value() / n;
  if (!std::isfinite(loss)) throw NumericError("non-finite diffusion loss");
  net.backward(params.values, dy, grad);
  return loss;
}

inline LossAndGradient training_loss(const DenoiserParams& params, const Image& x0, const Conditioning& c,
                                     const NoiseSchedule& sched, Rng& rng,
                                     double p_uncond = kDefaultUncondProbability) {
  Denoiser net(params.arch());
  LossAndGradient r;
  r.gradient.assign(params.values.size(), 0.0);
  r.loss = training_loss_into(net, params, x0, c, sched, rng, r.gradient, 1.0, p_uncond);
  return r;
}

struct TrainingExample {
  Image image;
  Conditioning cond;
};

/// Mean L_simple over a set of examples. Example k draws from an RNG seeded by
/// (seed, id[k]) so the result does not depend on how examples are grouped.
inline LossAndGradient batch_training_loss(const DenoiserParams& params, std::span<const TrainingExample> examples,
                                           std::span<const std::uint64_t> ids, const NoiseSchedule& sched,
                                           std::uint64_t seed, double p_uncond = kDefaultUncondProbability) {
  if (examples.empty()) throw InvalidArgument("batch must be non-empty");
  if (ids.size() != examples.size()) throw InvalidArgument("one id per example required");
  Denoiser net(params.arch());
  LossAndGradient r;
  r.gradient.assign(params.values.size(), 0.0);
  CompensatedSum acc;
  const double w = 1.0 / static_cast<double>(examples.size());
  for (std::size_t k = 0; k < examples.size(); ++k) {
    Rng rng(mix64(seed ^ mix64(ids[k] + 0x1234567ULL)));
    acc.add(training_loss_into(net, params, examples[k].image, examples[k].cond, sched, rng, r.gradient, w, p_uncond));
  }
  r.loss = acc.value() * w;
  return r;
}

/// Adam optimizer state.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  long step_count = 0;

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// Sampling

struct GuidancePayload {
  std::vector<std::uint8_t> mask;  // per pixel, row-major
  std::vector<double> residual;    // 3 per pixel; zero outside the mask
  Image anchor;                    // image the residual is relative to (receiver-side, not transmitted)

  Image target() const {
    Image t = anchor;
    for (std::size_t p = 0; p < mask.size(); ++p) {
      if (!mask[p]) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        t.data[3 * p + ch] = std::clamp(anchor.data[3 * p + ch] + residual[3 * p + ch], 0.0, 1.0);
      }
    }
    return t;
  }
  void validate(int width, int height) const {
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (mask.size() != n || residual.size() != 3 * n || anchor.width != width || anchor.height != height) {
      throw InvalidArgument("guidance payload does not match the image size");
    }
    for (std::size_t p = 0; p < n; ++p) {
      if (mask[p] > 1) throw InvalidArgument("guidance mask entries must be 0 or 1");
      if (!mask[p] && (residual[3 * p] != 0.0 || residual[3 * p + 1] != 0.0 || residual[3 * p + 2] != 0.0)) {
        throw InvalidArgument("guidance residual must be zero outside the mask");
      }
    }
  }
  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

namespace detail {

struct GuidedStep {
  std::vector<double> eps;
  std::vector<double> state;  // x_t after guidance injection
};

inline GuidedStep guided_step(Denoiser& net, const DenoiserParams& params, std::span<const double> xt, int t,
                              const Conditioning& c, const GuidancePayload* g, double w, const NoiseSchedule& sched) {
  const std::vector<double> null_c = c.as_null().flatten();
  GuidedStep out;
  const double ab = sched.abar(t);
  const std::vector<double> eps_u = net.forward(params.values, xt, t, ab, null_c);
  out.state.assign(xt.begin(), xt.end());
  if (g) {
    const Image target = g->target();
    for (std::size_t p = 0; p < g->mask.size(); ++p) {
      if (!g->mask[p]) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const std::size_t i = 3 * p + ch;
        out.state[i] = std::sqrt(ab) * (2.0 * target.data[i] - 1.0) + std::sqrt(1.0 - ab) * eps_u[i];
      }
    }
  }
  const std::vector<double> eps_c = net.forward(params.values, out.state, t, ab, c.flatten());
  out.eps.resize(eps_c.size());
  for (std::size_t i = 0; i < eps_c.size(); ++i) out.eps[i] = w * eps_c[i] + (1.0 - w) * eps_u[i];
  return out;
}

}  // namespace detail

/// Centered-space noise estimate w * eps(x_t', t, c) + (1 - w) * eps(x_t, t, null), where
/// x_t' is x_t with masked pixels overwritten by the noised guidance target.
inline std::vector<double> guided_epsilon(const DenoiserParams& params, std::span<const double> xt, int t,
                                          const Conditioning& c, const GuidancePayload* g, double w,
                                          const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw InvalidArgument("timestep out of range");
  Denoiser net(params.arch());
  if (g) g->validate(net.arch().width, net.arch().height);
  return detail::guided_step(net, params, xt, t, c, g, w, sched).eps;
}

/// Retained timesteps for a strided sampler, descending from T.
inline std::vector<int> strided_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw InvalidArgument("steps must lie in [1, T]");
  std::vector<int> ts;
  for (int i = steps; i >= 1; --i) ts.push_back(static_cast<int>((static_cast<long long>(i) * T) / steps));
  return ts;
}

/// Ancestral sampling from pure noise over a strided timestep subsequence.
inline Image generate_view(const DenoiserParams& params, const Conditioning& c, const NoiseSchedule& sched, int steps,
                           double w, const GuidancePayload* g, Rng& rng) {
  Denoiser net(params.arch());
  const Architecture& ar = net.arch();
  if (g) g->validate(ar.width, ar.height);
  const std::size_t D = static_cast<std::size_t>(ar.pixels());
  std::vector<double> x(D);
  for (double& v : x) v = gaussian(rng);
  const std::vector<int> ts = strided_timesteps(sched.T, steps);
  std::vector<double> x0(D);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const auto step = detail::guided_step(net, params, x, t, c, g, w, sched);
    const double ab = sched.abar(t), ab_prev = sched.abar(t_prev);
    for (std::size_t i = 0; i < D; ++i) {
      x0[i] = std::clamp((step.state[i] - std::sqrt(1.0 - ab) * step.eps[i]) / std::sqrt(ab), -1.0, 1.0);
    }
    if (t_prev == 0) break;
    const double a_ratio = ab / ab_prev;
    const double b_ratio = 1.0 - a_ratio;
    const double c0 = std::sqrt(ab_prev) * b_ratio / (1.0 - ab);
    const double ct = std::sqrt(a_ratio) * (1.0 - ab_prev) / (1.0 - ab);
    const double stddev = std::sqrt(b_ratio * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < D; ++i) x[i] = c0 * x0[i] + ct * step.state[i] + stddev * gaussian(rng);
  }
  Image out = uncenter(x0, ar.width, ar.height);
  if (g) {
    const Image target = g->target();
    for (std::size_t p = 0; p < g->mask.size(); ++p) {
      if (!g->mask[p]) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) out.data[3 * p + ch] = target.data[3 * p + ch];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DN01", descriptor length u32, descriptor bytes, parameter count u64, f32 values.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::uint8_t> encode_params(const DenoiserParams& p) {
  ByteWriter w;
  for (char ch : std::string("DN01")) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(static_cast<std::uint32_t>(p.descriptor.size()));
  for (char ch : p.descriptor) w.u8(static_cast<std::uint8_t>(ch));
  w.u64(p.values.size());
  for (double v : p.values) w.f32(static_cast<float>(v));
  return w.take();
}

inline DenoiserParams decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader<CheckpointError> r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8()));
  if (magic != "DN01") throw CheckpointError("bad denoiser checkpoint magic");
  DenoiserParams p;
  const std::uint32_t len = r.u32();
  for (std::uint32_t i = 0; i < len; ++i) p.descriptor.push_back(static_cast<char>(r.u8()));
  const std::uint64_t n = r.u64();
  if (n != Architecture::parse(p.descriptor).parameter_count()) {
    throw CheckpointError("parameter count does not match the descriptor");
  }
  p.values.resize(n);
  for (double& v : p.values) v = r.f32();
  return p;
}

}  // namespace swarmsynth::generator
