#pragma once

// Ladder VAE with a classifier on the top latent level.
//
//   x -> conv encoder -> embedding -> deterministic upward ladder -> (mu_e, var_e) per level
//   z_L ~ N(mu_e,L, var_e,L);  for i = L-1..1:
//       (mu_p,i, var_p,i) = prior head(z_{i+1});  d_i = precision_merge(e_i, p_i);  z_i ~ N(d_i)
//   z_1 -> transposed-conv decoder -> sigmoid reconstruction
//   z_L -> 2-layer MLP -> class-1 score
//
// Level vectors are indexed bottom-up from 0.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lvae/errors.hpp"
#include "lvae/gaussian.hpp"
#include "lvae/model_config.hpp"
#include "lvae/nn.hpp"
#include "lvae/volume.hpp"

namespace lvae {

enum class Mode {
  train,       ///< batch statistics, sampled latents
  eval,        ///< running statistics, z_i = mean_d,i
  prior_only,  ///< running statistics, z_L supplied, z_i = mean_p,i below it
};

template <class T>
struct LevelState {
  GaussianParams<T> e;  ///< likelihood estimate from the encoder
  GaussianParams<T> p;  ///< prior; standard normal at the top level
  GaussianParams<T> d;  ///< posterior
  nn::Mat<T> z;         ///< [dim, batch]
};

template <class T>
struct LadderState {
  std::vector<LevelState<T>> levels;
  const LevelState<T>& top() const { return levels.back(); }
};

template <class T>
struct ForwardResult {
  nn::Batch3d<T> recon;  ///< per sample [channels, voxels], values in (0, 1)
  LadderState<T> ladder;
  nn::Mat<T> scores;  ///< [1, batch]
};

/// Gradients of a scalar objective with respect to the model outputs.
template <class T>
struct OutputGrads {
  nn::Batch3d<T> recon;
  nn::Mat<T> scores;
  std::vector<GaussianGrad<T>> posterior;  ///< per level, d(loss)/d(mean_d, var_d)
  std::vector<GaussianGrad<T>> prior;      ///< per level below the top, d(loss)/d(mean_p, var_p)
};

/// Activations recorded by a forward pass for the matching backward pass.
template <class T>
struct Tape {
  struct Head {
    nn::DenseCache<T> dense;
    nn::BatchNormCache<T> bn;
    nn::Mat<T> h;
    nn::DenseCache<T> mu, lv;
    nn::Mat<T> log_var;
  };

  Mode mode = Mode::eval;
  std::vector<nn::ConvCache<T>> enc_conv;
  std::vector<nn::Batch3d<T>> enc_act;
  nn::DenseCache<T> embed_dense;
  nn::BatchNormCache<T> embed_bn;
  nn::Mat<T> embedding;
  std::vector<Head> up;
  std::vector<Head> prior;
  std::vector<nn::Mat<T>> eps;
  nn::DenseCache<T> dec_dense;
  nn::Mat<T> dec_in;
  std::vector<nn::ConvCache<T>> dec_conv;
  std::vector<nn::BatchNormCache<T>> dec_bn;
  std::vector<nn::Batch3d<T>> dec_act;
  nn::DenseCache<T> cls1, cls2;
  nn::Mat<T> cls_h;
};

template <class T>
class Model {
public:
  Model() = default;

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  int levels() const { return cfg_.levels(); }

  /// Weights ~ N(0, init_sd^2); biases 0; batch-norm scale 1.
  template <class Rng>
  void initialize(Rng& rng) {
    visit_params([&](nn::Param<T>& p) {
      if (p.name.ends_with(".weight")) nn::fill_normal(p.value, rng, cfg_.init_sd);
      else if (p.name.ends_with(".gamma")) p.value.setOnes();
      else p.value.setZero();
    });
    visit_buffers([](nn::Buffer<T>& b) {
      if (b.name.ends_with(".running_var")) b.value.setOnes();
      else b.value.setZero();
    });
  }

  template <class Fn>
  void visit_params(Fn&& fn) {
    for (auto& c : enc_) c.visit(fn);
    embed_.visit(fn);
    embed_bn_.visit(fn);
    for (auto& h : up_) visit_head(h, fn);
    for (auto& h : prior_) visit_head(h, fn);
    dec_dense_.visit(fn);
    for (auto& c : dec_) c.visit(fn);
    for (auto& b : dec_bn_) b.visit(fn);
    cls1_.visit(fn);
    cls2_.visit(fn);
  }

  template <class Fn>
  void visit_buffers(Fn&& fn) {
    embed_bn_.visit_buffers(fn);
    for (auto& h : up_) h.bn.visit_buffers(fn);
    for (auto& h : prior_) h.bn.visit_buffers(fn);
    for (auto& b : dec_bn_) b.visit_buffers(fn);
  }

  void zero_grad() {
    visit_params([](nn::Param<T>& p) { p.zero_grad(); });
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit_params([&](nn::Param<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  // ------------------------------------------------------------ forward pieces

  /// Convolutional encoder to the flat embedding, [embedding_dim, batch].
  nn::Mat<T> encoder_forward(const nn::Batch3d<T>& x, bool train, Tape<T>* tape = nullptr) const {
    if (x.empty()) throw ShapeError("encoder_forward: empty batch");
    const Eigen::Index nvox = static_cast<Eigen::Index>(cfg_.input_dims.voxels());
    for (const auto& s : x)
      if (s.rows() != cfg_.input_channels || s.cols() != nvox)
        throw ShapeError("encoder_forward: expected input [" + std::to_string(cfg_.input_channels) + ", " +
                         to_string(cfg_.input_dims) + "], got [" + std::to_string(s.rows()) + ", " +
                         std::to_string(s.cols()) + " voxels]");
    if (tape) {
      tape->enc_conv.resize(enc_.size());
      tape->enc_act.resize(enc_.size());
    }
    nn::Batch3d<T> a = x;
    for (std::size_t s = 0; s < enc_.size(); ++s) {
      a = nn::relu(enc_[s].forward(a, tape ? &tape->enc_conv[s] : nullptr));
      if (tape) tape->enc_act[s] = a;
    }
    nn::Mat<T> flat = nn::flatten(a);
    nn::Mat<T> e = nn::elu(embed_bn_.forward(embed_.forward(flat, tape ? &tape->embed_dense : nullptr), train,
                                             tape ? &tape->embed_bn : nullptr));
    if (tape) tape->embedding = e;
    return e;
  }

  /// Deterministic upward pass: likelihood estimates for every level.
  std::vector<GaussianParams<T>> inference_ladder(const nn::Mat<T>& embedding, bool train,
                                                  Tape<T>* tape = nullptr) const {
    if (embedding.rows() != cfg_.embedding_dim) throw ShapeError("inference_ladder: embedding dim mismatch");
    if (tape) tape->up.resize(up_.size());
    std::vector<GaussianParams<T>> out;
    nn::Mat<T> h = embedding, next;
    for (std::size_t i = 0; i < up_.size(); ++i) {
      out.push_back(run_head(up_[i], h, train, tape ? &tape->up[i] : nullptr, &next));
      h = std::move(next);
    }
    return out;
  }

  /// Conditional prior of level `level` (0-based, below the top) given z of the level above.
  GaussianParams<T> prior_from_above(const nn::Mat<T>& z_next, int level, bool train,
                                     typename Tape<T>::Head* cache = nullptr) const {
    if (level < 0 || level >= levels() - 1)
      throw ContractError("prior_from_above: level " + std::to_string(level) +
                          " has no conditional prior (the top level prior is a fixed standard normal)");
    if (z_next.rows() != cfg_.latent_dims[static_cast<std::size_t>(level) + 1])
      throw ShapeError("prior_from_above: z_next dim mismatch");
    return run_head(prior_[static_cast<std::size_t>(level)], z_next, train, cache);
  }

  /// Top-down generative pass.  `e` must hold every level for train/eval;
  /// prior_only needs `z_top` and ignores `e`.
  template <class Rng>
  LadderState<T> top_down_pass(const std::vector<GaussianParams<T>>& e, Mode mode, Rng* rng,
                               const nn::Mat<T>* z_top = nullptr, Tape<T>* tape = nullptr) const {
    const int L = levels();
    LadderState<T> st;
    st.levels.resize(static_cast<std::size_t>(L));
    const bool train = mode == Mode::train;
    if (tape) {
      tape->prior.resize(static_cast<std::size_t>(L - 1));
      tape->eps.assign(static_cast<std::size_t>(L), {});
    }
    auto& top = st.levels.back();
    if (mode == Mode::prior_only) {
      if (!z_top) throw ContractError("top_down_pass: prior-only mode requires z_L");
      if (z_top->rows() != cfg_.latent_dims.back()) throw ShapeError("top_down_pass: z_L dim mismatch");
      top.z = *z_top;
      top.p = GaussianParams<T>::standard(z_top->rows(), z_top->cols());
      for (int i = L - 2; i >= 0; --i) {
        auto& lv = st.levels[static_cast<std::size_t>(i)];
        lv.p = prior_from_above(st.levels[static_cast<std::size_t>(i) + 1].z, i, false);
        lv.z = lv.p.mean;
      }
      return st;
    }
    if (static_cast<int>(e.size()) != L)
      throw ContractError("top_down_pass: likelihood estimates required for all " + std::to_string(L) + " levels");
    if (train && !rng) throw ContractError("top_down_pass: train mode requires an rng");
    top.e = e.back();
    top.d = e.back();
    top.p = GaussianParams<T>::standard(top.e.dim(), top.e.batch());
    top.z = draw(top.d, train, rng, tape ? &tape->eps.back() : nullptr);
    for (int i = L - 2; i >= 0; --i) {
      auto& lv = st.levels[static_cast<std::size_t>(i)];
      lv.e = e[static_cast<std::size_t>(i)];
      lv.p = prior_from_above(st.levels[static_cast<std::size_t>(i) + 1].z, i, train,
                              tape ? &tape->prior[static_cast<std::size_t>(i)] : nullptr);
      lv.d = precision_merge(lv.e, lv.p);
      lv.z = draw(lv.d, train, rng, tape ? &tape->eps[static_cast<std::size_t>(i)] : nullptr);
    }
    return st;
  }

  /// z_1 to per-sample reconstructions in (0, 1).
  nn::Batch3d<T> decoder_forward(const nn::Mat<T>& z1, bool train, Tape<T>* tape = nullptr) const {
    if (z1.rows() != cfg_.latent_dims.front()) throw ShapeError("decoder_forward: z_1 dim mismatch");
    nn::Mat<T> h = nn::relu(dec_dense_.forward(z1, tape ? &tape->dec_dense : nullptr));
    if (tape) {
      tape->dec_in = h;
      tape->dec_conv.resize(dec_.size());
      tape->dec_bn.resize(dec_bn_.size());
      tape->dec_act.resize(dec_.size());
    }
    nn::Batch3d<T> a = nn::unflatten(h, cfg_.decoder_channels.front(), cfg_.deepest_dims().voxels());
    for (std::size_t s = 0; s < dec_.size(); ++s) {
      nn::Batch3d<T> y = dec_[s].forward(a, tape ? &tape->dec_conv[s] : nullptr);
      if (s + 1 < dec_.size()) {
        a = nn::relu(dec_bn_[s].forward(y, train, tape ? &tape->dec_bn[s] : nullptr));
      } else {
        a.resize(y.size());
        for (std::size_t n = 0; n < y.size(); ++n) a[n] = nn::sigmoid(y[n]);
      }
      if (tape) tape->dec_act[s] = a;
    }
    return a;
  }

  /// Class-1 probability from the top latent, [1, batch].
  nn::Mat<T> mlp_classify(const nn::Mat<T>& z_top, Tape<T>* tape = nullptr) const {
    if (z_top.rows() != cfg_.latent_dims.back()) throw ShapeError("mlp_classify: z_L dim mismatch");
    nn::Mat<T> h = nn::relu(cls1_.forward(z_top, tape ? &tape->cls1 : nullptr));
    nn::Mat<T> s = nn::sigmoid(cls2_.forward(h, tape ? &tape->cls2 : nullptr));
    if (tape) tape->cls_h = h;
    return s;
  }

  /// Full pass.  `rng` is only used in train mode.
  template <class Rng>
  ForwardResult<T> forward(const nn::Batch3d<T>& x, Mode mode, Rng* rng, Tape<T>* tape = nullptr) const {
    if (mode == Mode::prior_only) throw ContractError("forward: use decode_prior for prior-only decoding");
    const bool train = mode == Mode::train;
    if (tape) tape->mode = mode;
    nn::Mat<T> emb = encoder_forward(x, train, tape);
    auto e = inference_ladder(emb, train, tape);
    ForwardResult<T> r;
    r.ladder = top_down_pass(e, mode, rng, nullptr, tape);
    r.recon = decoder_forward(r.ladder.levels.front().z, train, tape);
    r.scores = mlp_classify(r.ladder.top().z, tape);
    return r;
  }

  /// Eval-mode forward, one sample at a time so outputs do not depend on batch size.
  ForwardResult<T> forward_eval(const nn::Batch3d<T>& x) const {
    std::vector<ForwardResult<T>> parts;
    parts.reserve(x.size());
    for (const auto& s : x) parts.push_back(forward<std::mt19937_64>(nn::Batch3d<T>{s}, Mode::eval, nullptr));
    return join(parts);
  }

  /// Prior-only decoding of top-level points z_top [top dim, batch], one point at a time.
  ForwardResult<T> decode_prior(const nn::Mat<T>& z_top) const {
    std::vector<ForwardResult<T>> parts;
    parts.reserve(static_cast<std::size_t>(z_top.cols()));
    for (Eigen::Index c = 0; c < z_top.cols(); ++c) {
      const nn::Mat<T> z = z_top.col(c);
      ForwardResult<T> r;
      r.ladder = top_down_pass<std::mt19937_64>({}, Mode::prior_only, nullptr, &z);
      r.recon = decoder_forward(r.ladder.levels.front().z, false);
      r.scores = mlp_classify(r.ladder.top().z);
      parts.push_back(std::move(r));
    }
    return join(parts);
  }

  /// Folds the batch statistics recorded in a train-mode tape into the running averages.
  void commit_batch_stats(const Tape<T>& tape) {
    if (tape.mode != Mode::train) return;
    const Eigen::Index b = tape.embedding.cols();
    embed_bn_.commit(tape.embed_bn, b);
    for (std::size_t i = 0; i < up_.size(); ++i) up_[i].bn.commit(tape.up[i].bn, b);
    for (std::size_t i = 0; i < prior_.size(); ++i) prior_[i].bn.commit(tape.prior[i].bn, b);
    for (std::size_t i = 0; i < dec_bn_.size(); ++i) dec_bn_[i].commit(tape.dec_bn[i]);
  }

  // ------------------------------------------------------------ backward

  /// Accumulates parameter gradients of an objective whose output gradients are `g`.
  void backward(const Tape<T>& tape, const ForwardResult<T>& fr, const OutputGrads<T>& g) {
    if (tape.mode == Mode::prior_only) throw ContractError("backward: prior-only passes are not differentiable");
    const int L = levels();
    const bool train = tape.mode == Mode::train;
    const auto& st = fr.ladder;
    std::vector<nn::Mat<T>> dz(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
      const auto& z = st.levels[static_cast<std::size_t>(i)].z;
      dz[static_cast<std::size_t>(i)] = nn::Mat<T>::Zero(z.rows(), z.cols());
    }

    dz.front() += decoder_backward(tape, g.recon);
    {
      nn::Mat<T> ds = nn::sigmoid_backward(g.scores, fr.scores);
      nn::Mat<T> dh = nn::relu_backward(cls2_.backward(ds, tape.cls2), tape.cls_h);
      dz.back() += cls1_.backward(dh, tape.cls1);
    }

    std::vector<GaussianGrad<T>> de(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
      const auto& lv = st.levels[static_cast<std::size_t>(i)];
      GaussianGrad<T> dd = g.posterior[static_cast<std::size_t>(i)];
      if (train) sample_gaussian_backward(dz[static_cast<std::size_t>(i)], lv.d, tape.eps[static_cast<std::size_t>(i)], dd);
      else dd.mean += dz[static_cast<std::size_t>(i)];
      if (i == L - 1) {
        de[static_cast<std::size_t>(i)] = std::move(dd);
        break;
      }
      GaussianGrad<T> dei = GaussianGrad<T>::zeros_like(lv.e);
      GaussianGrad<T> dp = g.prior[static_cast<std::size_t>(i)];
      precision_merge_backward(dd, lv.e, lv.p, lv.d, dei, dp);
      de[static_cast<std::size_t>(i)] = std::move(dei);
      dz[static_cast<std::size_t>(i) + 1] +=
          head_backward(prior_[static_cast<std::size_t>(i)], tape.prior[static_cast<std::size_t>(i)], dp, nullptr);
    }

    nn::Mat<T> dh;  // gradient flowing into the hidden state of the level being processed
    for (int i = L - 1; i >= 0; --i) {
      const nn::Mat<T>* carry = dh.size() ? &dh : nullptr;
      dh = head_backward(up_[static_cast<std::size_t>(i)], tape.up[static_cast<std::size_t>(i)],
                         de[static_cast<std::size_t>(i)], carry);
    }
    nn::Mat<T> dflat = embed_.backward(
        embed_bn_.backward(nn::elu_backward(dh, tape.embedding), tape.embed_bn), tape.embed_dense);
    nn::Batch3d<T> da = nn::unflatten(dflat, cfg_.encoder_channels.back(), cfg_.deepest_dims().voxels());
    for (int s = static_cast<int>(enc_.size()) - 1; s >= 0; --s) {
      da = enc_[static_cast<std::size_t>(s)].backward(nn::relu_backward(da, tape.enc_act[static_cast<std::size_t>(s)]),
                                                      tape.enc_conv[static_cast<std::size_t>(s)]);
    }
  }

private:
  static nn::Mat<T> hcat(const std::vector<const nn::Mat<T>*>& ms) {
    Eigen::Index cols = 0;
    for (auto* m : ms) cols += m->cols();
    nn::Mat<T> out(ms.empty() ? 0 : ms.front()->rows(), cols);
    Eigen::Index at = 0;
    for (auto* m : ms) {
      if (m->cols() > 0) out.middleCols(at, m->cols()) = *m;
      at += m->cols();
    }
    return out;
  }

  static ForwardResult<T> join(std::vector<ForwardResult<T>>& parts) {
    if (parts.size() == 1) return std::move(parts.front());
    ForwardResult<T> r;
    if (parts.empty()) return r;
    const std::size_t L = parts.front().ladder.levels.size();
    r.ladder.levels.resize(L);
    auto gather = [&](auto member) {
      std::vector<const nn::Mat<T>*> ms;
      for (auto& p : parts) ms.push_back(&member(p));
      return hcat(ms);
    };
    for (std::size_t l = 0; l < L; ++l) {
      auto& out = r.ladder.levels[l];
      out.e.mean = gather([l](auto& p) -> auto& { return p.ladder.levels[l].e.mean; });
      out.e.var = gather([l](auto& p) -> auto& { return p.ladder.levels[l].e.var; });
      out.p.mean = gather([l](auto& p) -> auto& { return p.ladder.levels[l].p.mean; });
      out.p.var = gather([l](auto& p) -> auto& { return p.ladder.levels[l].p.var; });
      out.d.mean = gather([l](auto& p) -> auto& { return p.ladder.levels[l].d.mean; });
      out.d.var = gather([l](auto& p) -> auto& { return p.ladder.levels[l].d.var; });
      out.z = gather([l](auto& p) -> auto& { return p.ladder.levels[l].z; });
    }
    r.scores = gather([](auto& p) -> auto& { return p.scores; });
    for (auto& p : parts)
      for (auto& v : p.recon) r.recon.push_back(std::move(v));
    return r;
  }

  struct HeadLayers {
    nn::Dense<T> dense;
    nn::BatchNorm<T> bn;
    nn::Dense<T> mu;
    nn::Dense<T> lv;
  };

  template <class Fn>
  static void visit_head(HeadLayers& h, Fn& fn) {
    h.dense.visit(fn);
    h.bn.visit(fn);
    h.mu.visit(fn);
    h.lv.visit(fn);
  }

  HeadLayers make_head(const std::string& name, int in, int hidden, int out) const {
    HeadLayers h;
    h.dense = nn::Dense<T>(name + ".fc", in, hidden, false);
    h.bn = nn::BatchNorm<T>(name + ".bn", hidden, cfg_.bn_momentum, cfg_.bn_eps);
    h.mu = nn::Dense<T>(name + ".mu", hidden, out);
    h.lv = nn::Dense<T>(name + ".logvar", hidden, out);
    return h;
  }

  void build() {
    const auto& c = cfg_;
    const std::size_t S = c.encoder_channels.size();
    std::vector<Dims> dims{c.input_dims};
    for (std::size_t s = 0; s < S; ++s) {
      auto g = nn::ConvGeometry::downsample(dims.back(), c.conv_kernel, c.conv_stride);
      int in_ch = s == 0 ? c.input_channels : c.encoder_channels[s - 1];
      enc_.emplace_back("encoder." + std::to_string(s), in_ch, c.encoder_channels[s], g);
      dims.push_back(g.out);
    }
    const int flat = c.encoder_channels.back() * static_cast<int>(dims.back().voxels());
    embed_ = nn::Dense<T>("embedding.fc", flat, c.embedding_dim, false);
    embed_bn_ = nn::BatchNorm<T>("embedding.bn", c.embedding_dim, c.bn_momentum, c.bn_eps);

    const int L = c.levels();
    int in = c.embedding_dim;
    for (int i = 0; i < L; ++i) {
      up_.push_back(make_head("ladder." + std::to_string(i), in, c.ladder_hidden[static_cast<std::size_t>(i)],
                              c.latent_dims[static_cast<std::size_t>(i)]));
      in = c.ladder_hidden[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i + 1 < L; ++i)
      prior_.push_back(make_head("prior." + std::to_string(i), c.latent_dims[static_cast<std::size_t>(i) + 1],
                                 c.ladder_hidden[static_cast<std::size_t>(i)],
                                 c.latent_dims[static_cast<std::size_t>(i)]));

    dec_dense_ = nn::Dense<T>("decoder.fc", c.latent_dims.front(),
                              c.decoder_channels.front() * static_cast<int>(dims.back().voxels()));
    for (std::size_t j = 0; j < S; ++j) {
      auto g = nn::ConvGeometry::downsample(dims[S - 1 - j], c.conv_kernel, c.conv_stride);
      int out_ch = j + 1 < S ? c.decoder_channels[j + 1] : c.input_channels;
      dec_.emplace_back("decoder." + std::to_string(j), c.decoder_channels[j], out_ch, g);
      if (j + 1 < S) dec_bn_.emplace_back("decoder." + std::to_string(j) + ".bn", out_ch, c.bn_momentum, c.bn_eps);
    }
    cls1_ = nn::Dense<T>("classifier.fc1", c.latent_dims.back(), c.classifier_hidden);
    cls2_ = nn::Dense<T>("classifier.fc2", c.classifier_hidden, 1);
  }

  GaussianParams<T> run_head(const HeadLayers& h, const nn::Mat<T>& in, bool train,
                             typename Tape<T>::Head* cache, nn::Mat<T>* hidden_out = nullptr) const {
    nn::Mat<T> hidden = nn::elu(h.bn.forward(h.dense.forward(in, cache ? &cache->dense : nullptr), train,
                                             cache ? &cache->bn : nullptr));
    GaussianParams<T> g;
    g.mean = h.mu.forward(hidden, cache ? &cache->mu : nullptr);
    nn::Mat<T> log_var = h.lv.forward(hidden, cache ? &cache->lv : nullptr);
    g.var = variance_from_log(log_var, cfg_.variance);
    if (cache) {
      cache->h = hidden;
      cache->log_var = std::move(log_var);
    }
    if (hidden_out) *hidden_out = std::move(hidden);
    return g;
  }

  /// Backward through one head given d(mean, var); `dh_extra` is gradient
  /// arriving at the hidden state from elsewhere.  Returns d(input).
  nn::Mat<T> head_backward(HeadLayers& h, const typename Tape<T>::Head& c, const GaussianGrad<T>& dg,
                           const nn::Mat<T>* dh_extra) {
    nn::Mat<T> var = variance_from_log(c.log_var, cfg_.variance);
    nn::Mat<T> dlv = variance_from_log_backward(dg.var, c.log_var, var, cfg_.variance);
    nn::Mat<T> dh = h.mu.backward(dg.mean, c.mu);
    dh += h.lv.backward(dlv, c.lv);
    if (dh_extra) dh += *dh_extra;
    return h.dense.backward(h.bn.backward(nn::elu_backward(dh, c.h), c.bn), c.dense);
  }

  nn::Mat<T> decoder_backward(const Tape<T>& tape, const nn::Batch3d<T>& drecon) {
    nn::Batch3d<T> da(drecon.size());
    for (std::size_t n = 0; n < drecon.size(); ++n) da[n] = nn::sigmoid_backward(drecon[n], tape.dec_act.back()[n]);
    for (int s = static_cast<int>(dec_.size()) - 1; s >= 0; --s) {
      da = dec_[static_cast<std::size_t>(s)].backward(da, tape.dec_conv[static_cast<std::size_t>(s)]);
      if (s > 0)
        da = dec_bn_[static_cast<std::size_t>(s) - 1].backward(
            nn::relu_backward(da, tape.dec_act[static_cast<std::size_t>(s) - 1]),
            tape.dec_bn[static_cast<std::size_t>(s) - 1]);
    }
    nn::Mat<T> dh = nn::relu_backward(nn::flatten(da), tape.dec_in);
    return dec_dense_.backward(dh, tape.dec_dense);
  }

  template <class Rng>
  static nn::Mat<T> draw(const GaussianParams<T>& g, bool train, Rng* rng, nn::Mat<T>* eps) {
    if (!train) return g.mean;
    return sample_gaussian(g, *rng, eps);
  }

  ModelConfig cfg_;
  std::vector<nn::Conv3d<T>> enc_;
  nn::Dense<T> embed_;
  nn::BatchNorm<T> embed_bn_;
  std::vector<HeadLayers> up_;
  std::vector<HeadLayers> prior_;
  nn::Dense<T> dec_dense_;
  std::vector<nn::ConvTranspose3d<T>> dec_;
  std::vector<nn::BatchNorm3d<T>> dec_bn_;
  nn::Dense<T> cls1_, cls2_;
};

// ------------------------------------------------------------ volume <-> batch

template <class T>
nn::Mat<T> to_matrix(const Volume& v) {
  nn::Mat<T> m(v.channels, static_cast<Eigen::Index>(v.voxels_per_channel()));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(v.data[static_cast<std::size_t>(i)]);
  return m;
}

template <class T>
Volume to_volume(const nn::Mat<T>& m, Dims dims, Spacing spacing) {
  Volume v(dims, static_cast<int>(m.rows()), spacing);
  if (static_cast<std::size_t>(m.cols()) != dims.voxels()) throw ShapeError("to_volume: voxel count mismatch");
  for (Eigen::Index i = 0; i < m.size(); ++i) v.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return v;
}

template <class T>
nn::Batch3d<T> to_batch(const std::vector<const Volume*>& vols) {
  nn::Batch3d<T> b;
  b.reserve(vols.size());
  for (const auto* v : vols) b.push_back(to_matrix<T>(*v));
  return b;
}

}  // namespace lvae
