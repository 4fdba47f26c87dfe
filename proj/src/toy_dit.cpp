#include "tokenswap/toy_dit.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "tokenswap/attention_kernels.hpp"
#include "tokenswap/errors.hpp"
#include "tokenswap/rng.hpp"

namespace tokenswap {

void DiTConfig::validate() const {
  if (layers < 1 || dim < 4 || heads < 1 || patch < 1 || vocab < 1 || channels < 1 ||
      mlp_ratio < 1 || time_freq_dim < 2 || time_freq_dim % 2 != 0) {
    throw ParameterError("DiT config has non-positive extents");
  }
  if (dim % (4 * heads) != 0) {
    throw ParameterError(
        fmt::format("dim {} must be divisible by 4 * heads (heads = {})", dim, heads));
  }
  if (image_size % patch != 0) {
    throw ParameterError(fmt::format("image size {} not divisible by patch {}", image_size, patch));
  }
}

ParamLayout::ParamLayout(const DiTConfig& c) {
  c.validate();
  auto add = [&](const std::string& name, int rows, int cols) {
    TensorInfo info{name, rows, cols, total};
    total += info.size();
    tensors.push_back(info);
    return info;
  };
  const int d = c.dim;
  in_w = add("in_proj.weight", c.token_dim(), d);
  in_b = add("in_proj.bias", 1, d);
  embed = add("text_embed", c.vocab, d);
  t1_w = add("time_mlp.0.weight", c.time_freq_dim, d);
  t1_b = add("time_mlp.0.bias", 1, d);
  t2_w = add("time_mlp.2.weight", d, d);
  t2_b = add("time_mlp.2.bias", 1, d);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = fmt::format("blocks.{}.", l);
    Block b;
    b.mod_w = add(p + "modulation.weight", d, 6 * d);
    b.mod_b = add(p + "modulation.bias", 1, 6 * d);
    b.qkv_w = add(p + "qkv.weight", d, 3 * d);
    b.qkv_b = add(p + "qkv.bias", 1, 3 * d);
    b.out_w = add(p + "attn_out.weight", d, d);
    b.out_b = add(p + "attn_out.bias", 1, d);
    b.fc1_w = add(p + "mlp.fc1.weight", d, c.mlp_ratio * d);
    b.fc1_b = add(p + "mlp.fc1.bias", 1, c.mlp_ratio * d);
    b.fc2_w = add(p + "mlp.fc2.weight", c.mlp_ratio * d, d);
    b.fc2_b = add(p + "mlp.fc2.bias", 1, d);
    blocks.push_back(b);
  }
  final_mod_w = add("final.modulation.weight", d, 2 * d);
  final_mod_b = add("final.modulation.bias", 1, 2 * d);
  out_w = add("out_proj.weight", d, c.token_dim());
  out_b = add("out_proj.bias", 1, c.token_dim());
}

const TensorInfo* ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <class T>
DiTParams<T>::DiTParams(const DiTConfig& config)
    : config_(config), layout_(std::make_shared<const ParamLayout>(config)) {
  values_.assign(layout_->total, T(0));
}

template <class T>
bool DiTParams<T>::all_finite() const {
  for (T v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class DiTParams<float>;
template class DiTParams<double>;

DiTParams<float> init_params(const DiTConfig& config, std::uint64_t seed) {
  DiTParams<float> p(config);
  const auto& lay = p.layout();
  CounterRng rng(seed, streams::kWeights);
  auto xavier = [&](const TensorInfo& t) {
    const double bound = std::sqrt(6.0 / (t.rows + t.cols));
    auto m = p.tensor(t);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
    }
  };
  auto normal = [&](const TensorInfo& t, double stddev) {
    auto m = p.tensor(t);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>(rng.normal() * stddev);
    }
  };
  xavier(lay.in_w);
  normal(lay.embed, 0.02);
  normal(lay.t1_w, 0.02);
  normal(lay.t2_w, 0.02);
  const int d = config.dim;
  for (const auto& b : lay.blocks) {
    xavier(b.qkv_w);
    xavier(b.out_w);
    xavier(b.fc1_w);
    xavier(b.fc2_w);
    // Residual gates open at 1; shifts and scales start at 0.
    auto mod_b = p.tensor(b.mod_b);
    mod_b.row(0).segment(2 * d, d).setOnes();
    mod_b.row(0).segment(5 * d, d).setOnes();
  }
  return p;
}

template <class T>
DiTParams<T> random_params(const DiTConfig& config, std::uint64_t seed, double scale) {
  DiTParams<T> p(config);
  CounterRng rng(seed, streams::kWeights + 1);
  for (auto& v : p.values()) v = static_cast<T>(rng.normal() * scale);
  return p;
}

template DiTParams<float> random_params<float>(const DiTConfig&, std::uint64_t, double);
template DiTParams<double> random_params<double>(const DiTConfig&, std::uint64_t, double);

TokenGrid patchify(const Image& image, int patch) {
  if (patch < 1 || image.height % patch != 0 || image.width % patch != 0) {
    throw ParameterError(fmt::format("image {}x{} is not divisible by patch {}", image.height,
                                     image.width, patch));
  }
  const int h = image.height / patch;
  const int w = image.width / patch;
  TokenGrid out(h, w, patch * patch * 3);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      auto tok = out.token(r, c);
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < 3; ++ch) {
            tok[(py * patch + px) * 3 + ch] = image.at(r * patch + py, c * patch + px, ch);
          }
        }
      }
    }
  }
  return out;
}

Image unpatchify(const TokenGrid& tokens, int patch) {
  if (tokens.dim() != patch * patch * 3) {
    throw DimensionError(fmt::format("token dimension {} does not match patch {} RGB",
                                     tokens.dim(), patch));
  }
  Image img(tokens.height() * patch, tokens.width() * patch);
  for (int r = 0; r < tokens.height(); ++r) {
    for (int c = 0; c < tokens.width(); ++c) {
      auto tok = tokens.token(r, c);
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < 3; ++ch) {
            img.at(r * patch + py, c * patch + px, ch) = tok[(py * patch + px) * 3 + ch];
          }
        }
      }
    }
  }
  return img;
}

TokenGrid image_to_tokens(const Image& image, int patch) {
  TokenGrid g = patchify(image, patch);
  for (auto& v : g.values()) v = 2.0 * v - 1.0;
  return g;
}

Image tokens_to_image(const TokenGrid& tokens, int patch) {
  Image img = unpatchify(tokens, patch);
  for (auto& v : img.rgb) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return img;
}

RefSegment make_ref_segment(const TokenGrid& tokens, const PositionAssignment& positions) {
  if (static_cast<int>(positions.coords.size()) != tokens.cells()) {
    throw DimensionError(fmt::format("{} positions for a {} grid", positions.coords.size(),
                                     tokens.shape_string()));
  }
  RefSegment seg;
  seg.tokens = Eigen::Map<const RowMatrix>(tokens.values().data(), tokens.cells(), tokens.dim());
  seg.coords = positions.coords;
  return seg;
}

RefSegment make_masked_ref_segment(const TokenGrid& tokens, const BinaryMask& mask,
                                   PositionStrategy strategy) {
  if (tokens.shape() != mask.shape()) {
    throw DimensionError(fmt::format("reference grid {} vs mask {}", tokens.shape_string(),
                                     mask.shape_string()));
  }
  const auto cells = mask.set_cells();
  const auto all = assign_positions(tokens.shape(), strategy, width_shift(tokens.shape()));
  RefSegment seg;
  seg.tokens.resize(static_cast<Eigen::Index>(cells.size()), tokens.dim());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    auto tok = tokens.token(cells[k]);
    for (int c = 0; c < tokens.dim(); ++c) seg.tokens(static_cast<Eigen::Index>(k), c) = tok[c];
    seg.coords.push_back(all.coords[cells[k]]);
  }
  return seg;
}

namespace {

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLayerNormEps = 1e-6;
constexpr double kTimeScale = 1000.0;

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
void layer_norm(const Mat<T>& x, Mat<T>& n, ColVec<T>& rstd) {
  const ColVec<T> mean = x.rowwise().mean();
  n = x.colwise() - mean;
  rstd = (n.array().square().rowwise().mean() + T(kLayerNormEps)).rsqrt();
  n.array().colwise() *= rstd.array();
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dn, const Mat<T>& n, const ColVec<T>& rstd) {
  const ColVec<T> mean_dn = dn.rowwise().mean();
  const ColVec<T> mean_dnn = (dn.array() * n.array()).rowwise().mean();
  Mat<T> dx = dn.colwise() - mean_dn;
  dx -= (n.array().colwise() * mean_dnn.array()).matrix();
  dx.array().colwise() *= rstd.array();
  return dx;
}

template <class T>
void modulate(const Mat<T>& n, const RowVec<T>& shift, const RowVec<T>& scale, Mat<T>& out) {
  out = (n.array().rowwise() * (scale.array() + T(1))).rowwise() + shift.array();
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <class T>
void gelu(const Mat<T>& u, Mat<T>& g) {
  const auto inner = (u.array() + T(0.044715) * u.array().cube()) * T(kGeluC);
  g = (T(0.5) * u.array() * (T(1) + inner.tanh())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& u, const Mat<T>& dg) {
  const auto th = ((u.array() + T(0.044715) * u.array().cube()) * T(kGeluC)).tanh().eval();
  const auto d_inner = (T(kGeluC) * (T(1) + T(3 * 0.044715) * u.array().square())).eval();
  const auto deriv = T(0.5) * (T(1) + th) + T(0.5) * u.array() * (T(1) - th.square()) * d_inner;
  return (dg.array() * deriv).matrix();
}

template <class T>
RowVec<T> silu(const RowVec<T>& x) {
  RowVec<T> out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
  return out;
}

template <class T>
RowVec<T> silu_backward(const RowVec<T>& x, const RowVec<T>& dy) {
  RowVec<T> out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    out[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return out;
}

template <class T>
RowVec<T> time_features(double t, int dim) {
  const int half = dim / 2;
  RowVec<T> phi(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    const double arg = kTimeScale * t * freq;
    phi[k] = static_cast<T>(std::cos(arg));
    phi[half + k] = static_cast<T>(std::sin(arg));
  }
  return phi;
}

template <class T>
struct BlockCache {
  RowVec<T> mod;
  Mat<T> h_in, n1, a, q, k, v, attn, o, h1, n2, b, u, g, m;
  ColVec<T> rstd1, rstd2;
  std::vector<Mat<T>> probs;
};

template <class T>
struct ForwardCache {
  Mat<T> raw;  // image + extra rows in token space
  std::vector<int> text_ids;
  int n_image = 0;
  int n_extra = 0;
  RowVec<T> phi, z1, s1, c, sc;
  std::vector<BlockCache<T>> blocks;
  Mat<T> h_final, nf, af;
  ColVec<T> rstd_f;
  RowVec<T> fmod;
  kernels::RopeTable<T> rope;
};

// Runs the network over [image; extras; text]. With stop_after >= 0 the
// hidden state after that many blocks is returned for the image rows;
// otherwise the output projection of the image rows.
template <class T>
Mat<T> run_forward(const DiTParams<T>& p, const Mat<T>& raw, int n_image, int n_extra,
                   std::span<const GridCoord> coords, double t, const sprites::Prompt& prompt,
                   int stop_after, const ForwardOptions& options, ForwardCache<T>* cache) {
  const DiTConfig& cfg = p.config();
  const ParamLayout& lay = p.layout();
  const int d = cfg.dim;
  for (int id : prompt) {
    if (id < 0 || id >= cfg.vocab) throw VocabularyError(fmt::format("unknown vocabulary id {}", id));
  }
  const int n_text = static_cast<int>(prompt.size());
  const int n_total = n_image + n_extra + n_text;

  std::vector<GridCoord> all_coords(coords.begin(), coords.end());
  all_coords.resize(static_cast<std::size_t>(n_total), GridCoord{});
  auto rope = kernels::build_rope_table<T>(all_coords, cfg.head_dim(), cfg.rope_base);

  Mat<T> h(n_total, d);
  h.topRows(n_image + n_extra).noalias() = raw * p.tensor(lay.in_w);
  h.topRows(n_image + n_extra).rowwise() += p.tensor(lay.in_b).row(0);
  const auto embed = p.tensor(lay.embed);
  for (int i = 0; i < n_text; ++i) h.row(n_image + n_extra + i) = embed.row(prompt[i]);

  const RowVec<T> phi = time_features<T>(t, cfg.time_freq_dim);
  RowVec<T> z1 = phi * p.tensor(lay.t1_w) + p.tensor(lay.t1_b).row(0);
  const RowVec<T> s1 = silu<T>(z1);
  const RowVec<T> c = s1 * p.tensor(lay.t2_w) + p.tensor(lay.t2_b).row(0);
  const RowVec<T> sc = silu<T>(c);

  std::vector<std::uint8_t> masked_keys;
  if (options.mask_extra_keys) {
    masked_keys.assign(static_cast<std::size_t>(n_total), 0);
    for (int i = n_image; i < n_image + n_extra; ++i) masked_keys[i] = 1;
  }
  if (options.record) {
    std::vector<Segment> segs{{SegmentKind::denoising, 0, n_image}};
    if (n_extra > 0) segs.push_back({SegmentKind::reference, n_image, n_extra});
    segs.push_back({SegmentKind::text, n_image + n_extra, n_text});
    const int recorded = stop_after >= 0 ? stop_after : cfg.layers;
    options.record->reset(recorded, cfg.heads, n_total, std::move(segs));
  }

  if (cache) {
    cache->raw = raw;
    cache->text_ids = prompt;
    cache->n_image = n_image;
    cache->n_extra = n_extra;
    cache->phi = phi;
    cache->z1 = z1;
    cache->s1 = s1;
    cache->c = c;
    cache->sc = sc;
    cache->blocks.resize(static_cast<std::size_t>(cfg.layers));
    cache->rope = rope;
  }

  const int n_blocks = stop_after >= 0 ? std::min(stop_after, cfg.layers) : cfg.layers;
  BlockCache<T> scratch;
  for (int l = 0; l < n_blocks; ++l) {
    const auto& bl = lay.blocks[l];
    BlockCache<T>& bc = cache ? cache->blocks[l] : scratch;
    bc.mod = sc * p.tensor(bl.mod_w) + p.tensor(bl.mod_b).row(0);
    const RowVec<T> shift1 = bc.mod.segment(0, d);
    const RowVec<T> scale1 = bc.mod.segment(d, d);
    const RowVec<T> gate1 = bc.mod.segment(2 * d, d);
    const RowVec<T> shift2 = bc.mod.segment(3 * d, d);
    const RowVec<T> scale2 = bc.mod.segment(4 * d, d);
    const RowVec<T> gate2 = bc.mod.segment(5 * d, d);

    if (cache) bc.h_in = h;
    layer_norm(h, bc.n1, bc.rstd1);
    modulate(bc.n1, shift1, scale1, bc.a);
    Mat<T> qkv = bc.a * p.tensor(bl.qkv_w);
    qkv.rowwise() += p.tensor(bl.qkv_b).row(0);
    bc.q = qkv.leftCols(d);
    bc.k = qkv.middleCols(d, d);
    bc.v = qkv.rightCols(d);
    kernels::rope_apply(bc.q, rope, false);
    kernels::rope_apply(bc.k, rope, false);
    kernels::attention_forward<T>(bc.q, bc.k, bc.v, cfg.heads, bc.attn,
                                  cache ? &bc.probs : nullptr,
                                  options.mask_extra_keys ? &masked_keys : nullptr,
                                  options.record, l);
    bc.o = bc.attn * p.tensor(bl.out_w);
    bc.o.rowwise() += p.tensor(bl.out_b).row(0);
    h.array() += bc.o.array().rowwise() * gate1.array();
    if (cache) bc.h1 = h;

    layer_norm(h, bc.n2, bc.rstd2);
    modulate(bc.n2, shift2, scale2, bc.b);
    bc.u = bc.b * p.tensor(bl.fc1_w);
    bc.u.rowwise() += p.tensor(bl.fc1_b).row(0);
    gelu(bc.u, bc.g);
    bc.m = bc.g * p.tensor(bl.fc2_w);
    bc.m.rowwise() += p.tensor(bl.fc2_b).row(0);
    h.array() += bc.m.array().rowwise() * gate2.array();
  }
  if (stop_after >= 0) return h.topRows(n_image);

  RowVec<T> fmod = sc * p.tensor(lay.final_mod_w) + p.tensor(lay.final_mod_b).row(0);
  Mat<T> nf;
  ColVec<T> rstd_f;
  layer_norm(h, nf, rstd_f);
  Mat<T> af;
  modulate<T>(nf, fmod.segment(0, d), fmod.segment(d, d), af);
  Mat<T> out = af.topRows(n_image) * p.tensor(lay.out_w);
  out.rowwise() += p.tensor(lay.out_b).row(0);
  if (cache) {
    cache->h_final = std::move(h);
    cache->nf = std::move(nf);
    cache->af = std::move(af);
    cache->rstd_f = std::move(rstd_f);
    cache->fmod = std::move(fmod);
  }
  return out;
}

template <class T, class Derived>
void accumulate(DiTParams<T>& g, const TensorInfo& info, const Eigen::MatrixBase<Derived>& value) {
  g.tensor(info) += value;
}

// Backpropagates d_out (image rows x token_dim) through a cached forward
// pass, adding parameter gradients into `g`.
template <class T>
void run_backward(const DiTParams<T>& p, const ForwardCache<T>& cache, const Mat<T>& d_out,
                  DiTParams<T>& g) {
  const DiTConfig& cfg = p.config();
  const ParamLayout& lay = p.layout();
  const int d = cfg.dim;
  const int n_image = cache.n_image;
  const auto n_total = cache.h_final.rows();

  // Output projection (image rows only).
  const Mat<T> af_img = cache.af.topRows(n_image);
  accumulate(g, lay.out_w, af_img.transpose() * d_out);
  accumulate(g, lay.out_b, RowVec<T>(d_out.colwise().sum()));
  Mat<T> d_af = Mat<T>::Zero(n_total, d);
  d_af.topRows(n_image).noalias() = d_out * p.tensor(lay.out_w).transpose();

  RowVec<T> d_sc = RowVec<T>::Zero(d);
  {
    const RowVec<T> scale = cache.fmod.segment(d, d);
    RowVec<T> d_fmod(2 * d);
    d_fmod.segment(0, d) = d_af.colwise().sum();
    d_fmod.segment(d, d) = (d_af.array() * cache.nf.array()).colwise().sum();
    accumulate(g, lay.final_mod_w, Mat<T>(cache.sc.transpose() * d_fmod));
    accumulate(g, lay.final_mod_b, d_fmod);
    d_sc += d_fmod * p.tensor(lay.final_mod_w).transpose();
    const Mat<T> d_nf = (d_af.array().rowwise() * (scale.array() + T(1))).matrix();
    d_af = layer_norm_backward<T>(d_nf, cache.nf, cache.rstd_f);
  }
  Mat<T> d_h = std::move(d_af);

  Mat<T> d_q, d_k, d_v;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& bl = lay.blocks[l];
    const BlockCache<T>& bc = cache.blocks[l];
    const RowVec<T> scale1 = bc.mod.segment(d, d);
    const RowVec<T> gate1 = bc.mod.segment(2 * d, d);
    const RowVec<T> scale2 = bc.mod.segment(4 * d, d);
    const RowVec<T> gate2 = bc.mod.segment(5 * d, d);
    RowVec<T> d_mod(6 * d);

    // MLP branch: h2 = h1 + gate2 * m.
    d_mod.segment(5 * d, d) = (d_h.array() * bc.m.array()).colwise().sum();
    const Mat<T> d_m = (d_h.array().rowwise() * gate2.array()).matrix();
    accumulate(g, bl.fc2_w, bc.g.transpose() * d_m);
    accumulate(g, bl.fc2_b, RowVec<T>(d_m.colwise().sum()));
    const Mat<T> d_g = d_m * p.tensor(bl.fc2_w).transpose();
    const Mat<T> d_u = gelu_backward<T>(bc.u, d_g);
    accumulate(g, bl.fc1_w, bc.b.transpose() * d_u);
    accumulate(g, bl.fc1_b, RowVec<T>(d_u.colwise().sum()));
    const Mat<T> d_b = d_u * p.tensor(bl.fc1_w).transpose();
    d_mod.segment(3 * d, d) = d_b.colwise().sum();
    d_mod.segment(4 * d, d) = (d_b.array() * bc.n2.array()).colwise().sum();
    const Mat<T> d_n2 = (d_b.array().rowwise() * (scale2.array() + T(1))).matrix();
    d_h += layer_norm_backward<T>(d_n2, bc.n2, bc.rstd2);

    // Attention branch: h1 = h + gate1 * o.
    d_mod.segment(2 * d, d) = (d_h.array() * bc.o.array()).colwise().sum();
    const Mat<T> d_o = (d_h.array().rowwise() * gate1.array()).matrix();
    accumulate(g, bl.out_w, bc.attn.transpose() * d_o);
    accumulate(g, bl.out_b, RowVec<T>(d_o.colwise().sum()));
    const Mat<T> d_attn = d_o * p.tensor(bl.out_w).transpose();
    kernels::attention_backward<T>(bc.q, bc.k, bc.v, cfg.heads, bc.probs, d_attn, d_q, d_k, d_v);
    kernels::rope_apply(d_q, cache.rope, true);
    kernels::rope_apply(d_k, cache.rope, true);
    Mat<T> d_qkv(n_total, 3 * d);
    d_qkv.leftCols(d) = d_q;
    d_qkv.middleCols(d, d) = d_k;
    d_qkv.rightCols(d) = d_v;
    accumulate(g, bl.qkv_w, bc.a.transpose() * d_qkv);
    accumulate(g, bl.qkv_b, RowVec<T>(d_qkv.colwise().sum()));
    const Mat<T> d_a = d_qkv * p.tensor(bl.qkv_w).transpose();
    d_mod.segment(0, d) = d_a.colwise().sum();
    d_mod.segment(d, d) = (d_a.array() * bc.n1.array()).colwise().sum();
    const Mat<T> d_n1 = (d_a.array().rowwise() * (scale1.array() + T(1))).matrix();
    d_h += layer_norm_backward<T>(d_n1, bc.n1, bc.rstd1);

    accumulate(g, bl.mod_w, Mat<T>(cache.sc.transpose() * d_mod));
    accumulate(g, bl.mod_b, d_mod);
    d_sc += d_mod * p.tensor(bl.mod_w).transpose();
  }

  // Embeddings.
  const int n_tokens = n_image + cache.n_extra;
  accumulate(g, lay.in_w, cache.raw.transpose() * d_h.topRows(n_tokens));
  accumulate(g, lay.in_b, RowVec<T>(d_h.topRows(n_tokens).colwise().sum()));
  auto g_embed = g.tensor(lay.embed);
  for (std::size_t i = 0; i < cache.text_ids.size(); ++i) {
    g_embed.row(cache.text_ids[i]) += d_h.row(n_tokens + static_cast<Eigen::Index>(i));
  }

  // Timestep MLP.
  const RowVec<T> d_c = silu_backward<T>(cache.c, d_sc);
  accumulate(g, lay.t2_w, Mat<T>(cache.s1.transpose() * d_c));
  accumulate(g, lay.t2_b, d_c);
  const RowVec<T> d_s1 = d_c * p.tensor(lay.t2_w).transpose();
  const RowVec<T> d_z1 = silu_backward<T>(cache.z1, d_s1);
  accumulate(g, lay.t1_w, Mat<T>(cache.phi.transpose() * d_z1));
  accumulate(g, lay.t1_b, d_z1);
}

template <class T>
Mat<T> grid_to_mat(const TokenGrid& g) {
  return Eigen::Map<const RowMatrix>(g.values().data(), g.cells(), g.dim()).cast<T>();
}

template <class T>
TokenGrid mat_to_grid(const Mat<T>& m, int height, int width) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMatrix>(data.data(), m.rows(), m.cols()) = m.template cast<double>();
  return TokenGrid(height, width, static_cast<int>(m.cols()), std::move(data));
}

template <class T>
void check_grid(const DiTParams<T>& p, const TokenGrid& x) {
  const auto& c = p.config();
  if (x.height() != c.grid() || x.width() != c.grid() || x.dim() != c.token_dim()) {
    throw DimensionError(fmt::format("model expects a {}x{}x{} grid, got {}", c.grid(), c.grid(),
                                     c.token_dim(), x.shape_string()));
  }
}

// Stacks image tokens and extra segments into one raw matrix + coordinates.
template <class T>
std::pair<Mat<T>, std::vector<GridCoord>> stack_inputs(const DiTParams<T>& p, const TokenGrid& x,
                                                       std::span<const RefSegment> extras) {
  const int td = p.config().token_dim();
  Eigen::Index n_extra = 0;
  for (std::size_t s = 0; s < extras.size(); ++s) {
    if (extras[s].tokens.rows() > 0 && extras[s].tokens.cols() != td) {
      throw DimensionError(fmt::format("extra segment {} has token dimension {}, expected {}", s,
                                       extras[s].tokens.cols(), td));
    }
    if (static_cast<Eigen::Index>(extras[s].coords.size()) != extras[s].tokens.rows()) {
      throw DimensionError(fmt::format("extra segment {} has {} tokens but {} coordinates", s,
                                       extras[s].tokens.rows(), extras[s].coords.size()));
    }
    n_extra += extras[s].tokens.rows();
  }
  Mat<T> raw(x.cells() + n_extra, td);
  raw.topRows(x.cells()) = grid_to_mat<T>(x);
  std::vector<GridCoord> coords = assign_positions(x.shape(), PositionStrategy::original).coords;
  Eigen::Index row = x.cells();
  for (const auto& seg : extras) {
    if (seg.tokens.rows() == 0) continue;
    raw.middleRows(row, seg.tokens.rows()) = seg.tokens.cast<T>();
    coords.insert(coords.end(), seg.coords.begin(), seg.coords.end());
    row += seg.tokens.rows();
  }
  return {std::move(raw), std::move(coords)};
}

}  // namespace

template <class T>
TokenGrid dit_forward(const DiTParams<T>& params, const TokenGrid& x_t, double t,
                      const sprites::Prompt& prompt, std::span<const RefSegment> extras,
                      const ForwardOptions& options) {
  check_grid(params, x_t);
  auto [raw, coords] = stack_inputs(params, x_t, extras);
  const int n_extra = static_cast<int>(raw.rows()) - x_t.cells();
  const Mat<T> out = run_forward<T>(params, raw, x_t.cells(), n_extra, coords, t, prompt, -1,
                                    options, nullptr);
  return mat_to_grid(out, x_t.height(), x_t.width());
}

template <class T>
TokenGrid dit_forward(const DiTParams<T>& params, const TokenGrid& x_t, double t,
                      const sprites::Prompt& prompt,
                      const std::optional<std::pair<TokenGrid, PositionAssignment>>& extra_ref,
                      const ForwardOptions& options) {
  if (!extra_ref) return dit_forward<T>(params, x_t, t, prompt, std::span<const RefSegment>(), options);
  const RefSegment seg = make_ref_segment(extra_ref->first, extra_ref->second);
  return dit_forward<T>(params, x_t, t, prompt, std::span<const RefSegment>(&seg, 1), options);
}

template <class T>
RowMatrix dit_features(const DiTParams<T>& params, const RowMatrix& tokens,
                       std::span<const GridCoord> coords, double t, const sprites::Prompt& prompt) {
  if (tokens.cols() != params.config().token_dim() ||
      static_cast<Eigen::Index>(coords.size()) != tokens.rows()) {
    throw DimensionError("dit_features: token/coordinate shape mismatch");
  }
  const Mat<T> raw = tokens.cast<T>();
  const int stop = std::max(params.config().layers - 1, 0);
  const Mat<T> h = run_forward<T>(params, raw, static_cast<int>(tokens.rows()), 0, coords, t,
                                  prompt, stop, {}, nullptr);
  return h.template cast<double>();
}

FlowDraw draw_flow_inputs(std::uint64_t noise_seed, std::size_t item, const TokenGrid& like) {
  CounterRng rng(noise_seed, stream_id(streams::kTraining, item));
  FlowDraw draw;
  // Logit-normal timesteps, weighting the middle of the path.
  draw.t = 1.0 / (1.0 + std::exp(-rng.normal()));
  draw.drop_prompt = rng.uniform() < kPromptDropout;
  std::vector<double> noise(like.values().size());
  for (auto& v : noise) v = rng.normal();
  draw.noise = TokenGrid(like.height(), like.width(), like.dim(), std::move(noise));
  return draw;
}

template <class T>
double flow_matching_loss(const DiTParams<T>& params, std::span<const FlowSample> batch,
                          std::uint64_t noise_seed, std::vector<T>* grad,
                          std::size_t first_item) {
  if (batch.empty()) return 0.0;
  if (grad && grad->size() != params.values().size()) {
    throw DimensionError("gradient buffer does not match parameter count");
  }
  std::optional<DiTParams<T>> g;
  if (grad) {
    g.emplace(params.config());
    g->values() = std::move(*grad);
  }
  const std::size_t count = batch.size() * batch.front().data.values().size();
  double total = 0.0;
  ForwardCache<T> cache;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& sample = batch[b];
    check_grid(params, sample.data);
    const FlowDraw draw = draw_flow_inputs(noise_seed, first_item + b, sample.data);
    const Mat<T> data = grid_to_mat<T>(sample.data);
    const Mat<T> noise = grid_to_mat<T>(draw.noise);
    const Mat<T> x_t = (T(1) - T(draw.t)) * data + T(draw.t) * noise;
    const Mat<T> target = noise - data;
    const sprites::Prompt prompt = draw.drop_prompt ? sprites::null_prompt() : sample.prompt;
    const auto coords = assign_positions(sample.data.shape(), PositionStrategy::original).coords;
    const Mat<T> pred = run_forward<T>(params, x_t, sample.data.cells(), 0, coords, draw.t, prompt,
                                       -1, {}, grad ? &cache : nullptr);
    const Mat<T> diff = pred - target;
    total += static_cast<double>(diff.array().square().sum());
    if (grad) {
      const Mat<T> d_out = diff * (T(2) / static_cast<T>(count));
      run_backward<T>(params, cache, d_out, *g);
    }
  }
  if (grad) *grad = std::move(g->values());
  return total / static_cast<double>(count);
}

std::vector<FlowSample> to_flow_samples(std::span<const sprites::SpriteSample> sprites, int patch) {
  std::vector<FlowSample> out;
  out.reserve(sprites.size());
  for (const auto& s : sprites) out.push_back({image_to_tokens(s.image, patch), s.prompt});
  return out;
}

template TokenGrid dit_forward<float>(const DiTParams<float>&, const TokenGrid&, double,
                                      const sprites::Prompt&, std::span<const RefSegment>,
                                      const ForwardOptions&);
template TokenGrid dit_forward<double>(const DiTParams<double>&, const TokenGrid&, double,
                                       const sprites::Prompt&, std::span<const RefSegment>,
                                       const ForwardOptions&);
template TokenGrid dit_forward<float>(
    const DiTParams<float>&, const TokenGrid&, double, const sprites::Prompt&,
    const std::optional<std::pair<TokenGrid, PositionAssignment>>&, const ForwardOptions&);
template TokenGrid dit_forward<double>(
    const DiTParams<double>&, const TokenGrid&, double, const sprites::Prompt&,
    const std::optional<std::pair<TokenGrid, PositionAssignment>>&, const ForwardOptions&);
template RowMatrix dit_features<float>(const DiTParams<float>&, const RowMatrix&,
                                       std::span<const GridCoord>, double,
                                       const sprites::Prompt&);
template RowMatrix dit_features<double>(const DiTParams<double>&, const RowMatrix&,
                                        std::span<const GridCoord>, double,
                                        const sprites::Prompt&);
template double flow_matching_loss<float>(const DiTParams<float>&, std::span<const FlowSample>,
                                          std::uint64_t, std::vector<float>*, std::size_t);
template double flow_matching_loss<double>(const DiTParams<double>&, std::span<const FlowSample>,
                                           std::uint64_t, std::vector<double>*, std::size_t);

}  // namespace tokenswap
