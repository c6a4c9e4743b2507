#pragma once

// Forward passes of the learned blocks used by the two matching stages:
// distance-biased geometric transformer (self + cross attention), linear
// cross-attention, the sparse-to-dense point transformer (SDPT) and the
// multi-scale set-abstraction positional encoder. Feature blocks are
// (N+1) x C matrices whose row 0 is the background token.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "posematch/geometry.hpp"
#include "posematch/tensor_io.hpp"

namespace posematch {

/// (N+1) x C features; row 0 is the background token.
using FeatureBlock = Matrix;

struct ModelConfig {
  Index descriptor_dim = 64;
  Index channels = 256;
  Index heads = 4;
  Index coarse_blocks = 3;
  Index fine_blocks = 3;
  Index distance_bins = 16;
  double distance_max = 2.0;
  std::array<double, 2> pe_radii{0.1, 0.2};
  std::array<Index, 2> pe_caps{16, 32};
  Index pe_hidden = 32;
  double residual_gain = 0.25;
  double distance_gain = 1.0;
  double pe_gain = 0.5;

  void validate() const {
    if (channels < 1 || heads < 1 || channels % heads != 0)
      fail(ErrorCode::kShapeMismatch, "channels must be a positive multiple of heads");
    if (descriptor_dim < 1 || distance_bins < 2 || distance_bins % 2 != 0 || pe_hidden < 1)
      fail(ErrorCode::kShapeMismatch, "invalid model widths");
    if (coarse_blocks < 0 || fine_blocks < 0) fail(ErrorCode::kShapeMismatch, "block counts must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"descriptor_dim", c.descriptor_dim}, {"channels", c.channels}, {"heads", c.heads},
       {"coarse_blocks", c.coarse_blocks},   {"fine_blocks", c.fine_blocks}, {"distance_bins", c.distance_bins},
       {"distance_max", c.distance_max},     {"pe_radii", c.pe_radii},       {"pe_caps", c.pe_caps},
       {"pe_hidden", c.pe_hidden},           {"residual_gain", c.residual_gain},
       {"distance_gain", c.distance_gain},   {"pe_gain", c.pe_gain}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.descriptor_dim = j.value("descriptor_dim", d.descriptor_dim);
  c.channels = j.value("channels", d.channels);
  c.heads = j.value("heads", d.heads);
  c.coarse_blocks = j.value("coarse_blocks", d.coarse_blocks);
  c.fine_blocks = j.value("fine_blocks", d.fine_blocks);
  c.distance_bins = j.value("distance_bins", d.distance_bins);
  c.distance_max = j.value("distance_max", d.distance_max);
  c.pe_radii = j.value("pe_radii", d.pe_radii);
  c.pe_caps = j.value("pe_caps", d.pe_caps);
  c.pe_hidden = j.value("pe_hidden", d.pe_hidden);
  c.residual_gain = j.value("residual_gain", d.residual_gain);
  c.distance_gain = j.value("distance_gain", d.distance_gain);
  c.pe_gain = j.value("pe_gain", d.pe_gain);
}

// ---------------------------------------------------------------------------
// Parameter layout

enum class InitKind { kWeight, kZero, kOne, kToken, kTied };

struct ParamSpec {
  std::string path;
  Index rows = 0;
  Index cols = 0;
  InitKind kind = InitKind::kWeight;
  double gain = 1.0;
  std::string tied_to;  // for kTied: path whose initial draw is reused
};

namespace detail {

inline void attention_params(std::vector<ParamSpec>& out, const std::string& p, const ModelConfig& c) {
  const Index C = c.channels;
  out.push_back({p + "/wq", C, C, InitKind::kWeight, 1.0, {}});
  // Query and key projections start from the same draw, so initial attention follows feature similarity.
  out.push_back({p + "/wk", C, C, InitKind::kTied, 1.0, p + "/wq"});
  out.push_back({p + "/wv", C, C, InitKind::kWeight, 1.0, {}});
  out.push_back({p + "/wo", C, C, InitKind::kWeight, c.residual_gain, {}});
  out.push_back({p + "/bo", 1, C, InitKind::kZero, 1.0, {}});
  out.push_back({p + "/ln_gain", 1, C, InitKind::kOne, 1.0, {}});
  out.push_back({p + "/ln_bias", 1, C, InitKind::kZero, 1.0, {}});
}

inline void geometric_params(std::vector<ParamSpec>& out, const std::string& p, const ModelConfig& c) {
  attention_params(out, p + "/self", c);
  out.push_back({p + "/self/dist", c.distance_bins, c.heads, InitKind::kWeight, c.distance_gain, {}});
  attention_params(out, p + "/cross", c);
}

inline void linear_params(std::vector<ParamSpec>& out, const std::string& p, const ModelConfig& c) {
  attention_params(out, p, c);
}

inline void io_params(std::vector<ParamSpec>& out, const std::string& stage, const ModelConfig& c) {
  out.push_back({stage + "/in/w", c.descriptor_dim, c.channels, InitKind::kWeight, 1.0, {}});
  out.push_back({stage + "/in/b", 1, c.channels, InitKind::kZero, 1.0, {}});
  out.push_back({stage + "/bg_m", 1, c.channels, InitKind::kToken, 1.0, {}});
  out.push_back({stage + "/bg_o", 1, c.channels, InitKind::kToken, 1.0, {}});
  out.push_back({stage + "/out/w", c.channels, c.channels, InitKind::kWeight, 1.0, {}});
  out.push_back({stage + "/out/b", 1, c.channels, InitKind::kZero, 1.0, {}});
}

inline std::uint64_t path_hash(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Every parameter of the model in canonical order.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  detail::io_params(out, "coarse", c);
  for (Index l = 0; l < c.coarse_blocks; ++l) detail::geometric_params(out, "coarse/block" + std::to_string(l), c);

  detail::io_params(out, "fine", c);
  for (int s = 0; s < 2; ++s) {
    const std::string p = "fine/pe/s" + std::to_string(s);
    out.push_back({p + "/w1", 6, c.pe_hidden, InitKind::kWeight, 1.0, {}});
    out.push_back({p + "/b1", 1, c.pe_hidden, InitKind::kZero, 1.0, {}});
    out.push_back({p + "/w2", c.pe_hidden, 2 * c.pe_hidden, InitKind::kWeight, 1.0, {}});
    out.push_back({p + "/b2", 1, 2 * c.pe_hidden, InitKind::kZero, 1.0, {}});
  }
  out.push_back({"fine/pe/proj/w", 4 * c.pe_hidden, c.channels, InitKind::kWeight, c.pe_gain, {}});
  out.push_back({"fine/pe/proj/b", 1, c.channels, InitKind::kZero, 1.0, {}});
  for (Index l = 0; l < c.fine_blocks; ++l) {
    const std::string p = "fine/sdpt" + std::to_string(l);
    detail::geometric_params(out, p + "/geo", c);
    detail::linear_params(out, p + "/spread", c);
    // Used only by the linear-attention-only ablation of the fine stage.
    detail::linear_params(out, "fine/linear" + std::to_string(l) + "/self", c);
    detail::linear_params(out, "fine/linear" + std::to_string(l) + "/cross", c);
  }
  return out;
}

/// Immutable parameter store keyed by block path.
class ModelWeights {
 public:
  ModelWeights() = default;

  /// Deterministic scaled-uniform initialization: each tensor draws from its own
  /// stream derived from (seed, path), with variance gain^2 / fan_in.
  static ModelWeights initialize(std::uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.config_ = cfg;
    w.seed_ = seed;
    for (const ParamSpec& spec : parameter_layout(cfg)) {
      Matrix m(spec.rows, spec.cols);
      switch (spec.kind) {
        case InitKind::kZero: m.setZero(); break;
        case InitKind::kOne: m.setOnes(); break;
        case InitKind::kToken:
        case InitKind::kWeight:
        case InitKind::kTied: {
          const std::string& stream_path = spec.kind == InitKind::kTied ? spec.tied_to : spec.path;
          Rng rng(seed, detail::path_hash(stream_path));
          const double bound = spec.kind == InitKind::kToken
                                   ? std::sqrt(3.0)
                                   : spec.gain * std::sqrt(3.0 / static_cast<double>(spec.rows));
          for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
          break;
        }
      }
      w.tensors_.emplace(spec.path, std::move(m));
    }
    return w;
  }

  static ModelWeights load(const std::string& path, const ModelConfig& expected) {
    const TensorCollection c = TensorCollection::load(path);
    ModelConfig file_cfg;
    try {
      file_cfg = c.meta.at("config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kCorruptFile, std::string("weight manifest lacks a config: ") + e.what());
    }
    if (file_cfg.channels != expected.channels || file_cfg.descriptor_dim != expected.descriptor_dim ||
        file_cfg.heads != expected.heads || file_cfg.coarse_blocks != expected.coarse_blocks ||
        file_cfg.fine_blocks != expected.fine_blocks || file_cfg.distance_bins != expected.distance_bins ||
        file_cfg.pe_hidden != expected.pe_hidden)
      fail(ErrorCode::kShapeMismatch, "weight file configuration differs from the requested configuration");
    ModelWeights w;
    w.config_ = file_cfg;
    w.seed_ = c.meta.value("seed", std::uint64_t{0});
    for (const ParamSpec& spec : parameter_layout(file_cfg)) {
      if (!c.contains(spec.path)) fail(ErrorCode::kCorruptFile, "weight file lacks '" + spec.path + "'");
      Matrix m = to_matrix(c.get(spec.path));
      if (m.rows() != spec.rows || m.cols() != spec.cols)
        fail(ErrorCode::kShapeMismatch, "tensor '" + spec.path + "' has the wrong shape");
      if (!m.allFinite()) fail(ErrorCode::kCorruptFile, "tensor '" + spec.path + "' has non-finite entries");
      w.tensors_.emplace(spec.path, std::move(m));
    }
    return w;
  }

  void save(const std::string& path) const {
    TensorCollection c;
    c.meta["config"] = config_;
    c.meta["seed"] = seed_;
    for (const ParamSpec& spec : parameter_layout(config_)) c.put(spec.path, to_tensor(get(spec.path)));
    c.save(path);
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  const Matrix& get(const std::string& path) const {
    const auto it = tensors_.find(path);
    if (it == tensors_.end()) fail(ErrorCode::kIndexOutOfRange, "unknown parameter '" + path + "'");
    return it->second;
  }

  /// Copy with one tensor replaced (shape-checked); the original stays untouched.
  ModelWeights with(const std::string& path, Matrix value) const {
    const Matrix& cur = get(path);
    if (cur.rows() != value.rows() || cur.cols() != value.cols())
      fail(ErrorCode::kShapeMismatch, "replacement for '" + path + "' has the wrong shape");
    ModelWeights copy = *this;
    copy.tensors_[path] = std::move(value);
    return copy;
  }

  bool operator==(const ModelWeights& other) const { return tensors_ == other.tensors_; }

 private:
  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::map<std::string, Matrix> tensors_;
};

inline ModelWeights init_or_load_weights(std::uint64_t seed, const ModelConfig& cfg) {
  return ModelWeights::initialize(seed, cfg);
}

inline ModelWeights init_or_load_weights(const std::string& path, const ModelConfig& cfg) {
  return ModelWeights::load(path, cfg);
}

// ---------------------------------------------------------------------------
// Primitives

inline void layer_norm_inplace(Matrix& x, const Matrix& gain, const Matrix& bias, double eps = 1e-5) {
  const double inv_c = 1.0 / static_cast<double>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double mean = row.sum() * inv_c;
    row.array() -= mean;
    const double var = row.squaredNorm() * inv_c;
    row *= 1.0 / std::sqrt(var + eps);
  }
  x.array().rowwise() *= gain.row(0).array();
  x.rowwise() += bias.row(0);
}

/// Harmonic embedding of a distance: sin(k t), cos(k t), k = 1..bins/2, t = pi d / d_max.
inline void distance_embedding(double d, double d_max, Index bins, double* out) {
  const double t = std::numbers::pi * d / d_max;
  const double s1 = std::sin(t), c1 = std::cos(t);
  double s = s1, c = c1;
  for (Index k = 0; k < bins / 2; ++k) {
    out[2 * k] = s;
    out[2 * k + 1] = c;
    const double sn = s * c1 + c * s1;
    c = c * c1 - s * s1;
    s = sn;
  }
}

/// Per-head additive logits from pairwise distances; background row/column get zero.
inline std::vector<Matrix> geometric_bias(const Points& pts, const Matrix& dist_proj, double d_max) {
  const Index n = pts.rows();
  const Index bins = dist_proj.rows();
  const Index heads = dist_proj.cols();
  std::vector<Matrix> bias(static_cast<std::size_t>(heads));
  for (auto& b : bias) {
    b.resize(n + 1, n + 1);
    b.row(0).setZero();
    b.col(0).setZero();
  }
  using Row = Eigen::Array<double, 1, Eigen::Dynamic>;
  const double freq = std::numbers::pi / d_max;
  for (Index i = 0; i < n; ++i) {
    const Index len = n - i;
    const Row t = (pts.bottomRows(len).rowwise() - pts.row(i)).rowwise().norm().transpose().array() * freq;
    const Row s1 = t.sin(), c1 = t.cos();
    Row s = s1, c = c1;
    for (Index h = 0; h < heads; ++h) bias[h].row(i + 1).tail(len).setZero();
    for (Index k = 0; k < bins / 2; ++k) {
      for (Index h = 0; h < heads; ++h)
        bias[h].row(i + 1).tail(len).array() += s * dist_proj(2 * k, h) + c * dist_proj(2 * k + 1, h);
      const Row sn = s * c1 + c * s1;
      c = c * c1 - s * s1;
      s = sn;
    }
  }
  for (auto& b : bias) b.bottomRightCorner(n, n).triangularView<Eigen::StrictlyLower>() = b.bottomRightCorner(n, n).transpose();
  return bias;
}

namespace detail {

inline Matrix apply_linear(const Matrix& x, const Matrix& w) { return x * w; }

inline void softmax_rows(Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

inline Matrix elu_plus_one(const Matrix& x) {
  return x.unaryExpr([](double v) { return v > 0.0 ? v + 1.0 : std::exp(v); });
}

}  // namespace detail

/// Multi-head softmax attention of queries over keys/values, output projected by wo/bo.
/// Optional per-head additive logits (one (Nq x Nk) matrix per head).
inline Matrix softmax_attention(const Matrix& queries, const Matrix& keys_values, const ModelWeights& w,
                                const std::string& path, const std::vector<Matrix>* bias = nullptr) {
  const Index heads = w.config().heads;
  const Index d = queries.cols() / heads;
  const Matrix q = queries * w.get(path + "/wq");
  const Matrix k = keys_values * w.get(path + "/wk");
  const Matrix v = keys_values * w.get(path + "/wv");
  Matrix out(queries.rows(), queries.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix logits(queries.rows(), keys_values.rows());
  for (Index h = 0; h < heads; ++h) {
    const Matrix qh = q.middleCols(h * d, d) * scale;
    const Matrix kh = k.middleCols(h * d, d);
    logits.noalias() = qh * kh.transpose();
    if (bias) logits += (*bias)[h];
    detail::softmax_rows(logits);
    out.middleCols(h * d, d).noalias() = logits * v.middleCols(h * d, d);
  }
  Matrix o = out * w.get(path + "/wo");
  o.rowwise() += w.get(path + "/bo").row(0);
  return o;
}

/// LN(x + sublayer) with the sublayer's own normalization parameters.
inline Matrix residual_norm(const Matrix& x, const Matrix& update, const ModelWeights& w, const std::string& path) {
  Matrix y = x + update;
  layer_norm_inplace(y, w.get(path + "/ln_gain"), w.get(path + "/ln_bias"));
  return y;
}

inline void check_block(const Points& pts, const FeatureBlock& f, Index channels) {
  if (f.cols() != channels) fail(ErrorCode::kShapeMismatch, "feature width differs from the model width");
  if (f.rows() != pts.rows() + 1) fail(ErrorCode::kShapeMismatch, "feature rows must be points + background");
}

/// Self-attention with distance bias within each set, then cross-attention between sets.
inline std::pair<FeatureBlock, FeatureBlock> geometric_transformer_block(const Points& pc_m, const Points& pc_o,
                                                                         const FeatureBlock& fm,
                                                                         const FeatureBlock& fo,
                                                                         const ModelWeights& w,
                                                                         const std::string& path) {
  const ModelConfig& cfg = w.config();
  check_block(pc_m, fm, cfg.channels);
  check_block(pc_o, fo, cfg.channels);
  const std::string self = path + "/self";
  const std::string cross = path + "/cross";
  const Matrix& dist = w.get(self + "/dist");

  const auto bias_m = geometric_bias(pc_m, dist, cfg.distance_max);
  const auto bias_o = geometric_bias(pc_o, dist, cfg.distance_max);
  const Matrix sm = residual_norm(fm, softmax_attention(fm, fm, w, self, &bias_m), w, self);
  const Matrix so = residual_norm(fo, softmax_attention(fo, fo, w, self, &bias_o), w, self);

  Matrix cm = residual_norm(sm, softmax_attention(sm, so, w, cross), w, cross);
  Matrix co = residual_norm(so, softmax_attention(so, sm, w, cross), w, cross);
  return {std::move(cm), std::move(co)};
}

/// Kernelized attention with phi(x) = elu(x) + 1, computed as phi(Q) (phi(K)^T V) / (phi(Q) sum phi(K)).
inline FeatureBlock linear_cross_attention(const FeatureBlock& queries, const FeatureBlock& keys_values,
                                           const ModelWeights& w, const std::string& path) {
  const ModelConfig& cfg = w.config();
  if (queries.cols() != cfg.channels || keys_values.cols() != cfg.channels)
    fail(ErrorCode::kShapeMismatch, "linear attention feature widths differ from the model width");
  const Index heads = cfg.heads;
  const Index d = cfg.channels / heads;
  const Matrix q = detail::elu_plus_one(queries * w.get(path + "/wq"));
  const Matrix k = detail::elu_plus_one(keys_values * w.get(path + "/wk"));
  const Matrix v = keys_values * w.get(path + "/wv");
  Matrix out(queries.rows(), cfg.channels);
  for (Index h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * d, d);
    const auto kh = k.middleCols(h * d, d);
    const Matrix kv = kh.transpose() * v.middleCols(h * d, d);  // d x d
    const Eigen::RowVectorXd ksum = kh.colwise().sum();
    const Vector denom = qh * ksum.transpose();
    out.middleCols(h * d, d) = (qh * kv).array().colwise() / denom.array();
  }
  Matrix o = out * w.get(path + "/wo");
  o.rowwise() += w.get(path + "/bo").row(0);
  return residual_norm(queries, o, w, path);
}

inline FeatureBlock gather_rows(const FeatureBlock& f, std::span<const Index> rows) {
  FeatureBlock out(static_cast<Index>(rows.size()), f.cols());
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = f.row(rows[r]);
  return out;
}

namespace detail {

/// Feature-row indices (background at 0) to point rows, validating ranges.
inline Points sparse_points(const Points& pts, std::span<const Index> rows) {
  if (rows.empty() || rows[0] != 0) fail(ErrorCode::kIndexOutOfRange, "sparse selection must start with the background row 0");
  Points out(static_cast<Index>(rows.size()) - 1, 3);
  for (std::size_t k = 1; k < rows.size(); ++k) {
    if (rows[k] < 1 || rows[k] > pts.rows()) fail(ErrorCode::kIndexOutOfRange, "sparse index out of range");
    out.row(static_cast<Index>(k) - 1) = pts.row(rows[k] - 1);
  }
  return out;
}

}  // namespace detail

/// Sparse-to-dense point transformer: geometric attention on a sparse subset,
/// then linear cross-attention from every dense row to the enhanced subset.
/// `sparse_rows_*` index feature rows and must begin with the background row 0.
inline std::pair<FeatureBlock, FeatureBlock> sdpt_block(const Points& pc_m, const FeatureBlock& fm,
                                                        const Points& pc_o, const FeatureBlock& fo,
                                                        std::span<const Index> sparse_rows_m,
                                                        std::span<const Index> sparse_rows_o, const ModelWeights& w,
                                                        const std::string& path) {
  check_block(pc_m, fm, w.config().channels);
  check_block(pc_o, fo, w.config().channels);
  const Points sp_m = detail::sparse_points(pc_m, sparse_rows_m);
  const Points sp_o = detail::sparse_points(pc_o, sparse_rows_o);
  const auto [em, eo] =
      geometric_transformer_block(sp_m, sp_o, gather_rows(fm, sparse_rows_m), gather_rows(fo, sparse_rows_o), w,
                                  path + "/geo");
  return {linear_cross_attention(fm, em, w, path + "/spread"), linear_cross_attention(fo, eo, w, path + "/spread")};
}

/// Linear-attention-only dense block: linear self-attention in each set, then linear cross-attention.
inline std::pair<FeatureBlock, FeatureBlock> linear_block(const FeatureBlock& fm, const FeatureBlock& fo,
                                                          const ModelWeights& w, const std::string& path) {
  const FeatureBlock sm = linear_cross_attention(fm, fm, w, path + "/self");
  const FeatureBlock so = linear_cross_attention(fo, fo, w, path + "/self");
  return {linear_cross_attention(sm, so, w, path + "/cross"), linear_cross_attention(so, sm, w, path + "/cross")};
}

/// Multi-scale set abstraction: for every point, neighbours within each radius
/// (first `cap` by index, always including the point itself) pass through a
/// shared two-layer MLP on [relative offset / radius, absolute position] and are
/// max-pooled; scales are concatenated and projected to C channels.
inline Matrix positional_encoding(const Points& pts, const ModelWeights& w, const std::string& path = "fine/pe") {
  const ModelConfig& cfg = w.config();
  const Index n = pts.rows();
  if (n < 1) fail(ErrorCode::kDegenerateInput, "positional encoding needs at least one point");
  const Index hidden2 = 2 * cfg.pe_hidden;
  Matrix pooled = Matrix::Constant(n, 2 * hidden2, 0.0);
  std::vector<Index> nbr;
  for (int s = 0; s < 2; ++s) {
    const std::string p = path + "/s" + std::to_string(s);
    const Matrix& w1 = w.get(p + "/w1");
    const Matrix& b1 = w.get(p + "/b1");
    const Matrix& w2 = w.get(p + "/w2");
    const Matrix& b2 = w.get(p + "/b2");
    const double r = cfg.pe_radii[s];
    const double r2 = r * r;
    const Index cap = cfg.pe_caps[s];
    for (Index i = 0; i < n; ++i) {
      nbr.clear();
      nbr.push_back(i);
      for (Index j = 0; j < n && static_cast<Index>(nbr.size()) < cap; ++j)
        if (j != i && (pts.row(j) - pts.row(i)).squaredNorm() <= r2) nbr.push_back(j);
      Matrix in(static_cast<Index>(nbr.size()), 6);
      for (Index k = 0; k < in.rows(); ++k) {
        in.block<1, 3>(k, 0) = (pts.row(nbr[k]) - pts.row(i)) / r;
        in.block<1, 3>(k, 3) = pts.row(i);
      }
      Matrix h1 = ((in * w1).rowwise() + b1.row(0)).cwiseMax(0.0);
      Matrix h2 = ((h1 * w2).rowwise() + b2.row(0)).cwiseMax(0.0);
      pooled.block(i, s * hidden2, 1, hidden2) = h2.colwise().maxCoeff();
    }
  }
  Matrix out = pooled * w.get(path + "/proj/w");
  out.rowwise() += w.get(path + "/proj/b").row(0);
  return out;
}

/// Input projection of point descriptors, prefixed with the stage's background token.
inline FeatureBlock embed_features(const Matrix& descriptors, const ModelWeights& w, const std::string& stage,
                                   const std::string& token) {
  if (descriptors.cols() != w.config().descriptor_dim)
    fail(ErrorCode::kShapeMismatch, "descriptor width differs from the model's descriptor_dim");
  FeatureBlock f(descriptors.rows() + 1, w.config().channels);
  f.row(0) = w.get(stage + "/" + token).row(0);
  f.bottomRows(descriptors.rows()) = descriptors * w.get(stage + "/in/w");
  f.bottomRows(descriptors.rows()).rowwise() += w.get(stage + "/in/b").row(0);
  return f;
}

/// Output projection followed by row-wise L2 normalization, so attention logits are cosine similarities.
inline FeatureBlock project_output(const FeatureBlock& f, const ModelWeights& w, const std::string& stage) {
  FeatureBlock out = f * w.get(stage + "/out/w");
  out.rowwise() += w.get(stage + "/out/b").row(0);
  for (Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

}  // namespace posematch
