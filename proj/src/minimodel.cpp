#include "epiguide/minimodel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/SVD>

#include "epiguide/error.hpp"
#include "epiguide/kernels.hpp"

namespace epiguide {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache,
                Matrix& out) {
  const int n = x.rows(), m = x.cols();
  cache.normalized = Matrix(n, m);
  cache.rstd.assign(n, 0.0);
  out = Matrix(n, m);
  for (int i = 0; i < n; ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= m;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= m;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    for (int j = 0; j < m; ++j) {
      const double xhat = (row[j] - mean) * rstd;
      cache.normalized(i, j) = xhat;
      out(i, j) = xhat * gain(0, j) + bias(0, j);
    }
  }
}

// dx for y = gain * xhat + bias; accumulates parameter gradients.
void layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain,
                         Matrix& dgain, Matrix& dbias, Matrix& dx) {
  const int n = dy.rows(), m = dy.cols();
  dx = Matrix(n, m);
  std::vector<double> dxhat(m);
  for (int i = 0; i < n; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (int j = 0; j < m; ++j) {
      const double g = dy(i, j);
      const double xhat = cache.normalized(i, j);
      dgain(0, j) += g * xhat;
      dbias(0, j) += g;
      dxhat[j] = g * gain(0, j);
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat;
    }
    mean_d /= m;
    mean_dx /= m;
    for (int j = 0; j < m; ++j) {
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_d - cache.normalized(i, j) * mean_dx);
    }
  }
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void add_row_bias(Matrix& x, const Matrix& bias) {
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) x(i, j) += bias(0, j);
  }
}

void accumulate_column_sums(const Matrix& x, Matrix& out) {
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  }
}

Matrix column_slice(const Matrix& x, int first, int count) {
  Matrix out(x.rows(), count);
  for (int i = 0; i < x.rows(); ++i) {
    std::copy_n(x.row(i).data() + first, count, out.row(i).data());
  }
  return out;
}

void scatter_columns(const Matrix& src, int first, Matrix& dst) {
  for (int i = 0; i < src.rows(); ++i) {
    std::copy_n(src.row(i).data(), src.cols(), dst.row(i).data() + first);
  }
}

Matrix block(const Matrix& x, int r0, int c0, int rows, int cols) {
  Matrix out(rows, cols);
  for (int i = 0; i < rows; ++i) std::copy_n(x.row(r0 + i).data() + c0, cols, out.row(i).data());
  return out;
}

void add_block(const Matrix& src, int r0, int c0, Matrix& dst) {
  for (int i = 0; i < src.rows(); ++i) {
    for (int j = 0; j < src.cols(); ++j) dst(r0 + i, c0 + j) += src(i, j);
  }
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst.data()[k] += src.data()[k];
}

bool finite(const Matrix& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](double v) { return std::isfinite(v); });
}

std::vector<Matrix> shapes_for(const ModelConfig& c) {
  std::vector<Matrix> t;
  t.reserve(c.layers * RerankerParams::kLayerSlots + RerankerParams::kGlobalSlots);
  for (int l = 0; l < c.layers; ++l) {
    t.emplace_back(1, c.m);            // Ln1Gain
    t.emplace_back(1, c.m);            // Ln1Bias
    t.emplace_back(c.m, c.m);          // Wq
    t.emplace_back(c.m, c.m);          // Wk
    t.emplace_back(c.m, c.m);          // Wv
    t.emplace_back(c.m, c.m);          // Wo
    t.emplace_back(1, c.m);            // Ln2Gain
    t.emplace_back(1, c.m);            // Ln2Bias
    t.emplace_back(c.m, c.mlp_width);  // W1
    t.emplace_back(1, c.mlp_width);    // B1
    t.emplace_back(c.mlp_width, c.m);  // W2
    t.emplace_back(1, c.m);            // B2
  }
  for (int g = 0; g < RerankerParams::kGlobalSlots; ++g) {
    t.emplace_back(1, g == RerankerParams::HeadBias ? 1 : c.m);
  }
  return t;
}

// Seed of the reference pixel for the plane-angle encoding.
Vec2 reference_pixel(const GridSpec& grid, std::uint64_t pair_seed, int attempt) {
  std::mt19937_64 rng(pair_seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(attempt));
  std::uniform_real_distribution<double> ux(0.0, grid.width), uy(0.0, grid.height);
  const double x = ux(rng);
  return {x, uy(rng)};
}

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::None: return "none";
    case LossVariant::Epi: return "epi";
    case LossVariant::MaxEpi: return "max-epi";
  }
  return "none";
}

LossVariant parse_loss_variant(const std::string& text) {
  if (text == "none") return LossVariant::None;
  if (text == "epi") return LossVariant::Epi;
  if (text == "max-epi" || text == "max_epi") return LossVariant::MaxEpi;
  throw Error(ErrorCode::InvalidArgument, "unknown loss variant '" + text + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (s < 1) fail("s must be >= 1");
  if (m < 1 || heads < 1 || m % heads != 0) fail("m must be a positive multiple of heads");
  if (layers < 1) fail("layers must be >= 1");
  if (mlp_width < 1) fail("mlp_width must be >= 1");
  if (num_freqs < 0 || 4 * num_freqs > m) fail("2D frequency encoding does not fit in m");
  if (epe_enabled && 6 * num_freqs > m) fail("epipolar encoding does not fit after the 2D encoding");
  if (!(lambda_epi >= 0.0) || !std::isfinite(lambda_epi)) fail("lambda_epi must be >= 0");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.m = 128;
  c.heads = 4;
  c.layers = 6;
  c.mlp_width = 256;
  c.num_freqs = 8;
  return c;
}

RerankerParams RerankerParams::zeros(const ModelConfig& config) {
  config.validate();
  RerankerParams p;
  p.config_ = config;
  p.tensors_ = shapes_for(config);
  return p;
}

RerankerParams RerankerParams::initialize(const ModelConfig& config) {
  RerankerParams p = zeros(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (std::size_t t = 0; t < p.tensors_.size(); ++t) {
    for (double& v : p.tensors_[t].values()) v = normal(rng);
  }
  for (int l = 0; l < config.layers; ++l) {
    for (auto slot : {Ln1Gain, Ln2Gain}) std::fill(p.layer(l, slot).values().begin(), p.layer(l, slot).values().end(), 1.0);
    for (auto slot : {Ln1Bias, Ln2Bias, B1, B2}) std::fill(p.layer(l, slot).values().begin(), p.layer(l, slot).values().end(), 0.0);
  }
  std::fill(p.global(LnfGain).values().begin(), p.global(LnfGain).values().end(), 1.0);
  std::fill(p.global(LnfBias).values().begin(), p.global(LnfBias).values().end(), 0.0);
  p.global(HeadBias)(0, 0) = 0.0;
  return p;
}

std::string RerankerParams::tensor_name(std::size_t index) const {
  static const char* kLayer[] = {"ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
                                 "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"};
  static const char* kGlobal[] = {"cls", "sep", "beta1", "beta2",
                                  "lnf_gain", "lnf_bias", "head_weight", "head_bias"};
  const std::size_t per_layer = kLayerSlots * static_cast<std::size_t>(config_.layers);
  if (index < per_layer) {
    return "layer" + std::to_string(index / kLayerSlots) + "." + kLayer[index % kLayerSlots];
  }
  return kGlobal[index - per_layer];
}

std::size_t RerankerParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

bool RerankerParams::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(), finite);
}

std::vector<double> frequency_encode(const Vec2& p, int num_freqs, int width) {
  if (4 * num_freqs > width) {
    throw Error(ErrorCode::InvalidArgument, "encoding wider than the token");
  }
  std::vector<double> out(width, 0.0);
  frequency_encode_scalar(p.x(), num_freqs, std::span<double>(out).subspan(0, 2 * num_freqs));
  frequency_encode_scalar(p.y(), num_freqs,
                          std::span<double>(out).subspan(2 * num_freqs, 2 * num_freqs));
  return out;
}

void frequency_encode_scalar(double v, int num_freqs, std::span<double> out) {
  double freq = std::numbers::pi;
  for (int k = 0; k < num_freqs; ++k, freq *= 2.0) {
    out[2 * k] = std::sin(freq * v);
    out[2 * k + 1] = std::cos(freq * v);
  }
}

std::vector<double> epipolar_angles(const EpeInput& in) {
  const int n1 = in.grid1.cells(), n2 = in.grid2.cells();
  std::vector<double> angles(n1 + n2, 0.0);
  const bool metric = in.view1.has_value() && in.view2.has_value();

  if (metric) {
    Vec2 ref = reference_pixel(in.grid1, in.pair_seed, 0);
    for (int attempt = 1; attempt < 16; ++attempt) {
      try {
        (void)epipolar_plane_angle(*in.view1, *in.view2, ref, ref);
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EpipolePixel) throw;
        ref = reference_pixel(in.grid1, in.pair_seed, attempt);
      }
    }
    for (int i = 0; i < n1; ++i) {
      angles[i] = epipolar_plane_angle(*in.view1, *in.view2, in.grid1.cell_center(i), ref);
    }
    for (int j = 0; j < n2; ++j) {
      angles[n1 + j] =
          epipolar_plane_angle_view2(*in.view1, *in.view2, in.grid2.cell_center(j), ref);
    }
    return angles;
  }

  // Pencil of lines through the epipole of image 2: every line l = F x
  // satisfies e2 . l = 0, so it has coordinates in an orthonormal basis of e2's
  // orthogonal complement.
  const Mat3& f = in.f.matrix();
  Eigen::JacobiSVD<Mat3> svd(f, Eigen::ComputeFullU);
  const Vec3 e2 = svd.matrixU().col(2);
  const Vec3 u1 = svd.matrixU().col(0), u2 = svd.matrixU().col(1);
  auto line_angle = [&](const Vec3& l) { return 2.0 * std::atan2(l.dot(u2), l.dot(u1)); };

  double ref_angle = 0.0;
  for (int attempt = 0;; ++attempt) {
    const Vec3 l = f * reference_pixel(in.grid1, in.pair_seed, attempt).homogeneous();
    if (std::hypot(l.dot(u1), l.dot(u2)) > 1e-12 * l.norm() || attempt >= 16) {
      ref_angle = line_angle(l);
      break;
    }
  }
  for (int i = 0; i < n1; ++i) {
    angles[i] = wrap_angle(line_angle(f * in.grid1.cell_center(i).homogeneous()) - ref_angle);
  }
  for (int j = 0; j < n2; ++j) {
    const Vec3 l = e2.cross(in.grid2.cell_center(j).homogeneous());
    angles[n1 + j] = wrap_angle(line_angle(l) - ref_angle);
  }
  return angles;
}

TokenSequence assemble_tokens(const Matrix& features1, const Matrix& features2,
                              const RerankerParams& params, const std::optional<EpeInput>& epe) {
  const ModelConfig& c = params.config();
  const int cells = c.s * c.s;
  if (features1.rows() != cells || features2.rows() != cells || features1.cols() != c.m ||
      features2.cols() != c.m) {
    throw Error(ErrorCode::ShapeMismatch, "feature grids must be s^2 x m");
  }
  if (c.epe_enabled && !epe) {
    throw Error(ErrorCode::MissingGeometry, "epipolar encoding enabled but no geometry supplied");
  }
  std::vector<double> angles;
  if (c.epe_enabled) angles = epipolar_angles(*epe);

  const TokenLayout layout{cells};
  TokenSequence seq{Matrix(layout.length(), c.m)};
  std::copy_n(params.global(RerankerParams::Cls).data(), c.m, seq.tokens.row(layout.cls()).data());
  std::copy_n(params.global(RerankerParams::Sep).data(), c.m, seq.tokens.row(layout.sep()).data());

  std::vector<double> angle_code(2 * c.num_freqs);
  auto fill = [&](const Matrix& features, const Matrix& beta, int first, int angle_base) {
    for (int i = 0; i < cells; ++i) {
      const int r = i / c.s, col = i % c.s;
      const Vec2 p((col + 0.5) / c.s, (r + 0.5) / c.s);
      const std::vector<double> psi = frequency_encode(p, c.num_freqs, c.m);
      auto tok = seq.tokens.row(first + i);
      for (int k = 0; k < c.m; ++k) tok[k] = features(i, k) + psi[k] + beta(0, k);
      if (c.epe_enabled) {
        frequency_encode_scalar(angles[angle_base + i] / std::numbers::pi, c.num_freqs, angle_code);
        for (int k = 0; k < 2 * c.num_freqs; ++k) tok[4 * c.num_freqs + k] += angle_code[k];
      }
    }
  };
  fill(features1, params.global(RerankerParams::Beta1), layout.first1(), 0);
  fill(features2, params.global(RerankerParams::Beta2), layout.first2(), cells);
  return seq;
}

ForwardResult forward(const RerankerParams& params, const TokenSequence& tokens) {
  const ModelConfig& c = params.config();
  const int n = tokens.tokens.rows();
  const int cells = c.s * c.s;
  if (n != c.tokens() || tokens.tokens.cols() != c.m) {
    throw Error(ErrorCode::ShapeMismatch, "token sequence does not match the model config");
  }
  const TokenLayout layout{cells};
  const int d = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  using P = RerankerParams;

  ForwardResult res;
  ForwardCache& cache = res.cache;
  cache.params = &params;
  cache.token_count = n;
  cache.layers.resize(c.layers);

  Matrix h = tokens.tokens;
  Matrix tmp;
  for (int l = 0; l < c.layers; ++l) {
    LayerCache& lc = cache.layers[l];
    const bool last = l == c.layers - 1;
    layer_norm(h, params.layer(l, P::Ln1Gain), params.layer(l, P::Ln1Bias), lc.ln1, lc.ln1_out);
    kernels::matmul(lc.ln1_out, params.layer(l, P::Wq), lc.q);
    kernels::matmul(lc.ln1_out, params.layer(l, P::Wk), lc.k);
    kernels::matmul(lc.ln1_out, params.layer(l, P::Wv), lc.v);
    lc.heads_out = Matrix(n, c.m);
    lc.probs.resize(c.heads);
    for (int hd = 0; hd < c.heads; ++hd) {
      const Matrix qh = column_slice(lc.q, hd * d, d);
      const Matrix kh = column_slice(lc.k, hd * d, d);
      const Matrix vh = column_slice(lc.v, hd * d, d);
      Matrix scores;
      kernels::matmul_nt(qh, kh, scores);
      if (last) {
        res.maps.a12.push_back(block(scores, layout.first1(), layout.first2(), cells, cells));
        res.maps.a21.push_back(block(scores, layout.first2(), layout.first1(), cells, cells));
      }
      kernels::softmax_rows(scores, scale, lc.probs[hd]);
      kernels::matmul(lc.probs[hd], vh, tmp);
      scatter_columns(tmp, hd * d, lc.heads_out);
    }
    kernels::matmul(lc.heads_out, params.layer(l, P::Wo), tmp);
    add_into(h, tmp);  // h is now the post-attention residual stream

    layer_norm(h, params.layer(l, P::Ln2Gain), params.layer(l, P::Ln2Bias), lc.ln2, lc.ln2_out);
    kernels::matmul(lc.ln2_out, params.layer(l, P::W1), lc.pre_act);
    add_row_bias(lc.pre_act, params.layer(l, P::B1));
    lc.act = Matrix(n, c.mlp_width);
    for (std::size_t k = 0; k < lc.act.size(); ++k) lc.act.data()[k] = gelu(lc.pre_act.data()[k]);
    kernels::matmul(lc.act, params.layer(l, P::W2), tmp);
    add_row_bias(tmp, params.layer(l, P::B2));
    add_into(h, tmp);
  }

  Matrix cls_row = block(h, layout.cls(), 0, 1, c.m);
  layer_norm(cls_row, params.global(P::LnfGain), params.global(P::LnfBias), cache.cls_ln,
             cache.cls_out);
  double logit = params.global(P::HeadBias)(0, 0);
  for (int k = 0; k < c.m; ++k) logit += params.global(P::HeadWeight)(0, k) * cache.cls_out(0, k);
  res.match_logit = logit;

  bool ok = std::isfinite(logit);
  for (const auto& m : res.maps.a12) ok = ok && finite(m);
  for (const auto& m : res.maps.a21) ok = ok && finite(m);
  if (!ok) throw Error(ErrorCode::NonFiniteActivation, "forward pass produced a non-finite value");
  return res;
}

double score_pair(const RerankerParams& params, const TokenSequence& tokens) {
  return forward(params, tokens).match_logit;
}

Gradients backward(const RerankerParams& params, const ForwardCache& cache,
                   const OutputGradients& grads) {
  const ModelConfig& c = params.config();
  if (cache.params != &params || cache.token_count != c.tokens() ||
      static_cast<int>(cache.layers.size()) != c.layers) {
    throw Error(ErrorCode::CacheMismatch, "cache was not produced by forward() on these parameters");
  }
  const bool attn_grads = !grads.d_a12.empty();
  if (attn_grads && (static_cast<int>(grads.d_a12.size()) != c.heads ||
                     static_cast<int>(grads.d_a21.size()) != c.heads)) {
    throw Error(ErrorCode::ShapeMismatch, "attention gradients need one map per head");
  }
  using P = RerankerParams;
  const int n = cache.token_count;
  const int cells = c.s * c.s;
  const TokenLayout layout{cells};
  const int d = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Gradients out{RerankerParams::zeros(c), Matrix()};
  RerankerParams& g = out.params;

  // Match head and final layer norm (CLS row only).
  g.global(P::HeadBias)(0, 0) = grads.d_logit;
  Matrix d_cls(1, c.m);
  for (int k = 0; k < c.m; ++k) {
    g.global(P::HeadWeight)(0, k) = grads.d_logit * cache.cls_out(0, k);
    d_cls(0, k) = grads.d_logit * params.global(P::HeadWeight)(0, k);
  }
  Matrix d_cls_in;
  layer_norm_backward(d_cls, cache.cls_ln, params.global(P::LnfGain), g.global(P::LnfGain),
                      g.global(P::LnfBias), d_cls_in);
  Matrix dh(n, c.m);
  std::copy_n(d_cls_in.data(), c.m, dh.row(layout.cls()).data());

  Matrix tmp, d_ln;
  for (int l = c.layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[l];
    const bool last = l == c.layers - 1;

    // MLP branch: h_out = h_mid + act(ln2(h_mid) W1 + b1) W2 + b2.
    kernels::matmul_tn_acc(lc.act, dh, g.layer(l, P::W2));
    accumulate_column_sums(dh, g.layer(l, P::B2));
    Matrix d_pre;
    kernels::matmul_nt(dh, params.layer(l, P::W2), d_pre);
    for (std::size_t k = 0; k < d_pre.size(); ++k) d_pre.data()[k] *= gelu_grad(lc.pre_act.data()[k]);
    kernels::matmul_tn_acc(lc.ln2_out, d_pre, g.layer(l, P::W1));
    accumulate_column_sums(d_pre, g.layer(l, P::B1));
    kernels::matmul_nt(d_pre, params.layer(l, P::W1), tmp);
    layer_norm_backward(tmp, lc.ln2, params.layer(l, P::Ln2Gain), g.layer(l, P::Ln2Gain),
                        g.layer(l, P::Ln2Bias), d_ln);
    add_into(dh, d_ln);  // dh is now d h_mid

    // Attention branch: h_mid = h_in + concat_h(softmax(Q_h K_h^T / sqrt(d)) V_h) Wo.
    kernels::matmul_tn_acc(lc.heads_out, dh, g.layer(l, P::Wo));
    Matrix d_heads;
    kernels::matmul_nt(dh, params.layer(l, P::Wo), d_heads);
    Matrix dq(n, c.m), dk(n, c.m), dv(n, c.m);
    for (int hd = 0; hd < c.heads; ++hd) {
      const Matrix& prob = lc.probs[hd];
      const Matrix qh = column_slice(lc.q, hd * d, d);
      const Matrix kh = column_slice(lc.k, hd * d, d);
      const Matrix vh = column_slice(lc.v, hd * d, d);
      const Matrix d_oh = column_slice(d_heads, hd * d, d);
      Matrix d_prob;
      kernels::matmul_nt(d_oh, vh, d_prob);
      Matrix dvh(n, d);
      kernels::matmul_tn_acc(prob, d_oh, dvh);
      Matrix d_scores(n, n);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += d_prob(i, j) * prob(i, j);
        for (int j = 0; j < n; ++j) d_scores(i, j) = scale * prob(i, j) * (d_prob(i, j) - dot);
      }
      if (last && attn_grads) {
        add_block(grads.d_a12[hd], layout.first1(), layout.first2(), d_scores);
        add_block(grads.d_a21[hd], layout.first2(), layout.first1(), d_scores);
      }
      Matrix dqh, dkh(n, d);
      kernels::matmul(d_scores, kh, dqh);
      kernels::matmul_tn_acc(d_scores, qh, dkh);
      scatter_columns(dqh, hd * d, dq);
      scatter_columns(dkh, hd * d, dk);
      scatter_columns(dvh, hd * d, dv);
    }
    kernels::matmul_tn_acc(lc.ln1_out, dq, g.layer(l, P::Wq));
    kernels::matmul_tn_acc(lc.ln1_out, dk, g.layer(l, P::Wk));
    kernels::matmul_tn_acc(lc.ln1_out, dv, g.layer(l, P::Wv));
    Matrix d_ln1;
    kernels::matmul_nt(dq, params.layer(l, P::Wq), d_ln1);
    kernels::matmul_nt(dk, params.layer(l, P::Wk), tmp);
    add_into(d_ln1, tmp);
    kernels::matmul_nt(dv, params.layer(l, P::Wv), tmp);
    add_into(d_ln1, tmp);
    layer_norm_backward(d_ln1, lc.ln1, params.layer(l, P::Ln1Gain), g.layer(l, P::Ln1Gain),
                        g.layer(l, P::Ln1Bias), d_ln);
    add_into(dh, d_ln);  // dh is now d h_in
  }

  // Token assembly: CLS/SEP are copied in, beta is added to every cell of its image.
  for (int k = 0; k < c.m; ++k) {
    g.global(P::Cls)(0, k) = dh(layout.cls(), k);
    g.global(P::Sep)(0, k) = dh(layout.sep(), k);
  }
  for (int i = 0; i < cells; ++i) {
    for (int k = 0; k < c.m; ++k) {
      g.global(P::Beta1)(0, k) += dh(layout.first1() + i, k);
      g.global(P::Beta2)(0, k) += dh(layout.first2() + i, k);
    }
  }
  out.tokens = std::move(dh);
  return out;
}

PairLoss pair_loss(const ModelConfig& config, const ForwardResult& result, int label,
                   const EpipolarGuide* guide, Reduction reduction) {
  PairLoss out;
  const BceTerm match = bce_with_logit(result.match_logit, label);
  out.match_bce = match.value;
  out.grads.d_logit = match.derivative;
  out.total = match.value;
  if (guide == nullptr || config.loss_variant == LossVariant::None) return out;

  const int heads = static_cast<int>(result.maps.a12.size());
  const double head_weight = config.lambda_epi / heads;
  out.attention_applied = true;
  for (int h = 0; h < heads; ++h) {
    LossResult lr = config.loss_variant == LossVariant::Epi
                        ? epipolar_loss(result.maps.a12[h], result.maps.a21[h], *guide, reduction)
                        : max_epipolar_loss(result.maps.a12[h], result.maps.a21[h], *guide, reduction);
    out.attention += lr.value / heads;
    if (config.lambda_epi == 0.0) continue;
    for (double& v : lr.grad12.values()) v *= head_weight;
    for (double& v : lr.grad21.values()) v *= head_weight;
    out.grads.d_a12.push_back(std::move(lr.grad12));
    out.grads.d_a21.push_back(std::move(lr.grad21));
  }
  out.total += config.lambda_epi * out.attention;
  return out;
}

void accumulate_attention_mass(const ForwardCache& cache, const EpipolarGuide& guide,
                               AttentionMass& acc) {
  if (cache.layers.empty()) return;
  const auto& probs = cache.layers.back().probs;
  const int cells = guide.grid1.cells();
  if (guide.grid2.cells() != cells || cache.token_count != 2 * cells + 2) {
    throw Error(ErrorCode::ShapeMismatch, "guide does not match the cached sequence");
  }
  const TokenLayout layout{cells};
  auto direction = [&](const Matrix& prob, int row0, int col0, const std::vector<std::uint8_t>& g) {
    for (int i = 0; i < cells; ++i) {
      double total = 0.0, inside = 0.0;
      int support = 0;
      for (int j = 0; j < cells; ++j) {
        const double p = prob(row0 + i, col0 + j);
        total += p;
        if (g[static_cast<std::size_t>(i) * cells + j]) {
          inside += p;
          ++support;
        }
      }
      if (support == 0) continue;
      acc.sum_in_guide += inside / total;
      acc.sum_fraction += static_cast<double>(support) / cells;
      ++acc.rows;
    }
  };
  for (const Matrix& prob : probs) {
    direction(prob, layout.first1(), layout.first2(), guide.g12);
    direction(prob, layout.first2(), layout.first1(), guide.g21);
  }
}

Matrix select_head(const std::vector<Matrix>& maps, int head) {
  if (maps.empty()) throw Error(ErrorCode::InvalidArgument, "no attention maps");
  if (head >= 0) {
    if (head >= static_cast<int>(maps.size())) {
      throw Error(ErrorCode::IndexOutOfRange, "head " + std::to_string(head) + " out of range");
    }
    return maps[head];
  }
  Matrix mean(maps[0].rows(), maps[0].cols());
  for (const auto& m : maps) add_into(mean, m);
  for (double& v : mean.values()) v /= static_cast<double>(maps.size());
  return mean;
}

}  // namespace epiguide
