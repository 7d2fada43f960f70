#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "barcodemamba/common.hpp"
#include "barcodemamba/ssd.hpp"
#include "barcodemamba/tensor.hpp"
#include "barcodemamba/tokenizer.hpp"

namespace bm {

enum class MixerKind { mamba1, mamba2 };
enum class Pooling { mean, last };

std::string_view to_string(MixerKind k);
MixerKind parse_mixer(std::string_view name);
std::string_view to_string(Pooling p);
Pooling parse_pooling(std::string_view name);

struct BackboneConfig {
  Index d_model = 256;
  Index n_layers = 2;
  Index head_dim = 64;
  Index vocab_size = 8;
  MixerKind mixer = MixerKind::mamba2;
  Index mlp_ratio = 4;
  Index state_dim = 64;
  Index expand = 2;
  Index conv_width = 4;
  Index chunk_len = 32;
  Index num_classes = 0;  // 0 = no classification head

  Index inner_dim() const { return expand * d_model; }
  Index heads() const { return inner_dim() / head_dim; }
  Index dt_rank() const { return (d_model + 15) / 16; }

  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  bool operator==(const BackboneConfig&) const = default;
};

// Closed-form parameter count for a configuration.
Index parameter_count(const BackboneConfig& cfg);

// Equal-length token sequences packed row-wise.
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  Index seq_len = 0;

  Index batch_size() const { return seq_len == 0 ? 0 : static_cast<Index>(ids.size()) / seq_len; }
  Index rows() const { return static_cast<Index>(ids.size()); }
};

TokenBatch make_batch(const std::vector<TokenSeq>& seqs);
TokenBatch make_batch(const TokenSeq& seq);

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  bool decay = false;  // participates in decoupled weight decay
};

template <typename S>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    build(&rng);
  }

  // Same layout with every parameter zero; values are expected to be loaded.
  static Backbone zeros(const BackboneConfig& cfg) { return Backbone(cfg); }

  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  // Deep copy with independent parameter storage.
  Backbone clone() const {
    Backbone out(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      out.params_[i].tensor.mutable_value() = params_[i].tensor.value();
    return out;
  }

  const BackboneConfig& config() const { return cfg_; }
  std::vector<NamedParam<S>>& parameters() { return params_; }
  const std::vector<NamedParam<S>>& parameters() const { return params_; }

  const Tensor<S>& param(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ConfigError("no parameter named " + std::string(name));
  }
  Tensor<S>& param(std::string_view name) {
    return const_cast<Tensor<S>&>(std::as_const(*this).param(name));
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  // Fingerprint of all parameter bytes in canonical order.
  std::uint64_t parameter_hash() const {
    std::uint64_t h = fnv1a("params", 6);
    for (const auto& p : params_) {
      h = fnv1a(p.name.data(), p.name.size(), h);
      h = fnv1a(p.tensor.value().data(),
                static_cast<std::size_t>(p.tensor.size()) * sizeof(S), h);
    }
    return h;
  }

  bool has_head() const { return head_w_ != kNone; }

  // Attaches (or replaces) a freshly initialized linear classifier.
  void attach_head(Index num_classes, Rng& rng) {
    if (num_classes < 1) throw ConfigError("classification head needs at least one class");
    if (has_head()) {
      params_.resize(head_w_);
      head_w_ = head_b_ = kNone;
    }
    cfg_.num_classes = num_classes;
    add_head(&rng);
  }

  Tensor<S> forward_hidden(const TokenBatch& batch) const {
    if (batch.seq_len < 1 || batch.rows() == 0) throw DataError("empty token batch");
    for (int id : batch.ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(cfg_.vocab_size));
    const Index L = batch.seq_len;
    Tensor<S> x = embedding(p(embed_), std::span<const int>(batch.ids));
    for (const auto& blk : blocks_) {
      Tensor<S> h = layer_norm(x, p(blk.norm1_w), p(blk.norm1_b));
      x = x + (cfg_.mixer == MixerKind::mamba2 ? mamba2(blk, h, L) : mamba1(blk, h, L));
      h = layer_norm(x, p(blk.norm2_w), p(blk.norm2_b));
      Tensor<S> m = silu(add_row(matmul(h, p(blk.fc1_w)), p(blk.fc1_b)));
      x = x + add_row(matmul(m, p(blk.fc2_w)), p(blk.fc2_b));
    }
    return layer_norm(x, p(norm_f_w_), p(norm_f_b_));
  }

  // Language-model logits; the output projection is the embedding matrix.
  Tensor<S> lm_logits(const Tensor<S>& hidden) const { return matmul_nt(hidden, p(embed_)); }

  Tensor<S> pool(const Tensor<S>& hidden, const TokenBatch& batch, Pooling pooling) const {
    if (pooling == Pooling::mean)
      return mean_pool(hidden, batch.seq_len, std::span<const std::uint8_t>(batch.mask));
    std::vector<Index> rows;
    for (Index s = 0; s < batch.batch_size(); ++s) {
      Index last = -1;
      for (Index t = 0; t < batch.seq_len; ++t)
        if (batch.mask[static_cast<std::size_t>(s * batch.seq_len + t)]) last = t;
      if (last < 0) throw DataError("cannot pool a sequence with no real tokens");
      rows.push_back(s * batch.seq_len + last);
    }
    return gather_rows(hidden, std::span<const Index>(rows));
  }

  Tensor<S> embed_sequence(const TokenBatch& batch, Pooling pooling = Pooling::mean) const {
    return pool(forward_hidden(batch), batch, pooling);
  }

  Tensor<S> classify(const TokenBatch& batch, Pooling pooling = Pooling::mean) const {
    if (!has_head()) throw ConfigError("model has no classification head");
    return add_row(matmul(embed_sequence(batch, pooling), p(head_w_)), p(head_b_));
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Block {
    std::size_t norm1_w, norm1_b, norm2_w, norm2_b;
    std::size_t in_proj, conv_w, conv_b, dt_bias, a_log, skip, out_proj;
    std::size_t x_proj = kNone, dt_proj = kNone;  // mamba1 only
    std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
  };

  explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build(nullptr);
  }

  const Tensor<S>& p(std::size_t i) const { return params_[i].tensor; }

  std::size_t add(std::string name, Matrix<S> value, bool decay) {
    params_.push_back({std::move(name), Tensor<S>::parameter(std::move(value)), decay});
    return params_.size() - 1;
  }

  static Matrix<S> uniform(Rng* rng, Index r, Index c, double bound) {
    Matrix<S> m(r, c);
    for (Index i = 0; i < m.size(); ++i)
      m.data()[i] = rng ? static_cast<S>(rng->uniform(-bound, bound)) : S(0);
    return m;
  }
  static Matrix<S> normal(Rng* rng, Index r, Index c, double stddev) {
    Matrix<S> m(r, c);
    for (Index i = 0; i < m.size(); ++i)
      m.data()[i] = rng ? static_cast<S>(stddev * rng->normal()) : S(0);
    return m;
  }
  static Matrix<S> constant(Rng* rng, Index r, Index c, double v) {
    return Matrix<S>::Constant(r, c, rng ? static_cast<S>(v) : S(0));
  }
  // Bias whose softplus is log-uniform in [1e-3, 1e-1].
  static Matrix<S> dt_bias_init(Rng* rng, Index c) {
    Matrix<S> m(1, c);
    for (Index i = 0; i < c; ++i) {
      if (!rng) {
        m(0, i) = 0;
        continue;
      }
      const double dt = std::exp(rng->uniform(std::log(1e-3), std::log(1e-1)));
      m(0, i) = static_cast<S>(dt + std::log(-std::expm1(-dt)));
    }
    return m;
  }

  void build(Rng* rng) {
    const Index d = cfg_.d_model, I = cfg_.inner_dim(), h = cfg_.heads(), s = cfg_.state_dim,
                w = cfg_.conv_width, md = cfg_.mlp_ratio * d;
    const std::string mix_prefix = ".mixer.";
    embed_ = add("embedding.weight", normal(rng, cfg_.vocab_size, d, 0.02), true);
    for (Index i = 0; i < cfg_.n_layers; ++i) {
      const std::string pre = "layers." + std::to_string(i);
      const std::string mx = pre + mix_prefix;
      Block b{};
      b.norm1_w = add(pre + ".norm1.weight", constant(rng, 1, d, 1.0), false);
      b.norm1_b = add(pre + ".norm1.bias", Matrix<S>::Zero(1, d), false);
      if (cfg_.mixer == MixerKind::mamba2) {
        const Index conv_ch = I + 2 * h * s;
        b.in_proj = add(mx + "in_proj", uniform(rng, d, 2 * I + 2 * h * s + h, 1.0 / std::sqrt(double(d))), true);
        b.conv_w = add(mx + "conv_weight", uniform(rng, w, conv_ch, 1.0 / std::sqrt(double(w))), true);
        b.conv_b = add(mx + "conv_bias", uniform(rng, 1, conv_ch, 1.0 / std::sqrt(double(w))), false);
        b.dt_bias = add(mx + "dt_bias", dt_bias_init(rng, h), false);
        Matrix<S> a_log(1, h);
        for (Index k = 0; k < h; ++k)
          a_log(0, k) = rng ? static_cast<S>(std::log(rng->uniform(1.0, 16.0))) : S(0);
        b.a_log = add(mx + "a_log", std::move(a_log), false);
        b.skip = add(mx + "D", constant(rng, 1, h, 1.0), false);
      } else {
        const Index r = cfg_.dt_rank();
        b.in_proj = add(mx + "in_proj", uniform(rng, d, 2 * I, 1.0 / std::sqrt(double(d))), true);
        b.conv_w = add(mx + "conv_weight", uniform(rng, w, I, 1.0 / std::sqrt(double(w))), true);
        b.conv_b = add(mx + "conv_bias", uniform(rng, 1, I, 1.0 / std::sqrt(double(w))), false);
        b.x_proj = add(mx + "x_proj", uniform(rng, I, r + 2 * s, 1.0 / std::sqrt(double(I))), true);
        b.dt_proj = add(mx + "dt_proj", uniform(rng, r, I, 1.0 / std::sqrt(double(r))), true);
        b.dt_bias = add(mx + "dt_bias", dt_bias_init(rng, I), false);
        Matrix<S> a_log(I, s);
        for (Index c = 0; c < I; ++c)
          for (Index k = 0; k < s; ++k) a_log(c, k) = rng ? static_cast<S>(std::log(double(k + 1))) : S(0);
        b.a_log = add(mx + "a_log", std::move(a_log), false);
        b.skip = add(mx + "D", constant(rng, 1, I, 1.0), false);
      }
      b.out_proj = add(mx + "out_proj", Matrix<S>::Zero(I, d), true);
      b.norm2_w = add(pre + ".norm2.weight", constant(rng, 1, d, 1.0), false);
      b.norm2_b = add(pre + ".norm2.bias", Matrix<S>::Zero(1, d), false);
      b.fc1_w = add(pre + ".mlp.fc1.weight", uniform(rng, d, md, 1.0 / std::sqrt(double(d))), true);
      b.fc1_b = add(pre + ".mlp.fc1.bias", Matrix<S>::Zero(1, md), false);
      b.fc2_w = add(pre + ".mlp.fc2.weight", uniform(rng, md, d, 1.0 / std::sqrt(double(md))), true);
      b.fc2_b = add(pre + ".mlp.fc2.bias", Matrix<S>::Zero(1, d), false);
      blocks_.push_back(b);
    }
    norm_f_w_ = add("norm_f.weight", constant(rng, 1, d, 1.0), false);
    norm_f_b_ = add("norm_f.bias", Matrix<S>::Zero(1, d), false);
    if (cfg_.num_classes > 0) add_head(rng);
  }

  void add_head(Rng* rng) {
    const Index d = cfg_.d_model;
    head_w_ = add("head.weight", uniform(rng, d, cfg_.num_classes, 1.0 / std::sqrt(double(d))), true);
    head_b_ = add("head.bias", Matrix<S>::Zero(1, cfg_.num_classes), false);
  }

  Tensor<S> mamba2(const Block& b, const Tensor<S>& u, Index L) const {
    const Index I = cfg_.inner_dim(), h = cfg_.heads(), s = cfg_.state_dim;
    Tensor<S> proj = matmul(u, p(b.in_proj));
    Tensor<S> z = slice_cols(proj, 0, I);
    Tensor<S> xbc = slice_cols(proj, I, I + 2 * h * s);
    Tensor<S> dt_raw = slice_cols(proj, 2 * I + 2 * h * s, h);
    xbc = silu(conv1d_causal(xbc, p(b.conv_w), p(b.conv_b), L));
    Tensor<S> xs = slice_cols(xbc, 0, I);
    Tensor<S> Bm = slice_cols(xbc, I, h * s);
    Tensor<S> Cm = slice_cols(xbc, I + h * s, h * s);
    Tensor<S> dt = softplus(add_row(dt_raw, p(b.dt_bias)));
    Tensor<S> A = neg(exp(p(b.a_log)));
    Tensor<S> y = ssd_scan(xs, dt, A, Bm, Cm, p(b.skip), L, h, cfg_.chunk_len);
    return matmul(y * silu(z), p(b.out_proj));
  }

  Tensor<S> mamba1(const Block& b, const Tensor<S>& u, Index L) const {
    const Index I = cfg_.inner_dim(), s = cfg_.state_dim, r = cfg_.dt_rank();
    Tensor<S> proj = matmul(u, p(b.in_proj));
    Tensor<S> xs = silu(conv1d_causal(slice_cols(proj, 0, I), p(b.conv_w), p(b.conv_b), L));
    Tensor<S> z = slice_cols(proj, I, I);
    Tensor<S> dbc = matmul(xs, p(b.x_proj));
    Tensor<S> dt = softplus(add_row(matmul(slice_cols(dbc, 0, r), p(b.dt_proj)), p(b.dt_bias)));
    Tensor<S> Bm = slice_cols(dbc, r, s);
    Tensor<S> Cm = slice_cols(dbc, r + s, s);
    Tensor<S> A = neg(exp(p(b.a_log)));
    Tensor<S> y = selective_scan(xs, dt, A, Bm, Cm, p(b.skip), L);
    return matmul(y * silu(z), p(b.out_proj));
  }

  BackboneConfig cfg_;
  std::vector<NamedParam<S>> params_;
  std::vector<Block> blocks_;
  std::size_t embed_ = kNone, norm_f_w_ = kNone, norm_f_b_ = kNone;
  std::size_t head_w_ = kNone, head_b_ = kNone;
};

}  // namespace bm
