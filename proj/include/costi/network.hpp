#pragma once

// Dual-branch conditional backbone F and the consistency wrapper
//   f(x, s) = c_skip(s) x + c_out(s) F(c_in(s) x, interp, A, cond_mask, c_noise(s)).
//
// Activations are [B, L, N, d]: batch, time, node, feature. The primary branch
// sees the scaled noisy series; the conditional branch sees the linear
// interpolation of the visible values. Both carry the conditioning mask.
// Parameters live in a ParamStore addressed by index, so the same Model can be
// evaluated with any compatible store (student, teacher, best snapshot).

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "costi/data.hpp"
#include "costi/ops.hpp"
#include "costi/rng.hpp"
#include "costi/schedule.hpp"

namespace costi {

enum class TemporalMixer { bidir_attention, bidir_linear_scan };

inline std::string_view to_string(TemporalMixer m) {
  return m == TemporalMixer::bidir_attention ? "bidir_attention" : "bidir_linear_scan";
}

inline TemporalMixer parse_temporal_mixer(std::string_view name) {
  if (name == "bidir_attention") return TemporalMixer::bidir_attention;
  if (name == "bidir_linear_scan") return TemporalMixer::bidir_linear_scan;
  throw std::invalid_argument("unknown temporal mixer '" + std::string(name) + "'");
}

struct ModelConfig {
  std::size_t data_channels = 1;  // C
  std::size_t channels = 64;      // d
  std::size_t heads = 8;
  std::size_t nem_layers = 4;
  std::size_t f_t = 1;
  std::size_t f_s = 1;
  double dropout = 0.2;
  TemporalMixer temporal_mixer = TemporalMixer::bidir_attention;
  bool use_cond = true;
  bool use_stfem = true;
  bool use_nem = true;
  bool use_self_attention = true;
  std::size_t embedding_frequencies = 64;

  void validate() const {
    if (channels == 0 || heads == 0 || channels % heads != 0)
      throw std::invalid_argument("model: channels (" + std::to_string(channels) + ") must be divisible by heads (" +
                                  std::to_string(heads) + ")");
    if (f_t < 1 || f_s < 1) throw std::invalid_argument("model: compression factors must be >= 1");
    if (data_channels < 1) throw std::invalid_argument("model: data_channels must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must be in [0, 1)");
    if (embedding_frequencies < 1) throw std::invalid_argument("model: embedding_frequencies must be >= 1");
  }
};

enum class Init { fan_in_uniform, zeros, ones, decay_logit };

struct ParamSpec {
  std::string path;
  Shape shape;
  Init init = Init::fan_in_uniform;
  std::size_t fan_in = 1;
};

/// Ordered map from layer path to parameter tensor.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;

  /// Allocates and initializes every parameter of `specs` from `seed`.
  ParamStore(const std::vector<ParamSpec>& specs, std::uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    for (const auto& s : specs) {
      std::vector<T> v(shape_numel(s.shape));
      switch (s.init) {
        case Init::fan_in_uniform: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
          for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
          break;
        }
        case Init::zeros: break;
        case Init::ones: std::fill(v.begin(), v.end(), T(1)); break;
        case Init::decay_logit:
          // decays spread over (0.5, 0.95)
          for (std::size_t i = 0; i < v.size(); ++i) {
            const double a = 0.5 + 0.45 * (static_cast<double>(i) + 0.5) / static_cast<double>(v.size());
            v[i] = static_cast<T>(std::log(a / (1.0 - a)));
          }
          break;
      }
      add(s.path, Tensor<T>(s.shape, std::move(v), true));
    }
  }

  void add(std::string path, Tensor<T> t) {
    if (index_.count(path)) throw std::invalid_argument("duplicate parameter path " + path);
    index_[path] = tensors_.size();
    paths_.push_back(std::move(path));
    tensors_.push_back(std::move(t));
  }

  std::size_t size() const { return tensors_.size(); }
  const Tensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const std::string& path(std::size_t i) const { return paths_[i]; }
  const Tensor<T>& at(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::out_of_range("no parameter " + path);
    return tensors_[it->second];
  }
  bool contains(const std::string& path) const { return index_.count(path) != 0; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  /// Independent copy of every value (gradients not copied).
  ParamStore clone() const {
    ParamStore out;
    out.seed_ = seed_;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      out.add(paths_[i], Tensor<T>(tensors_[i].shape(), tensors_[i].to_vector(), tensors_[i].requires_grad()));
    return out;
  }

  void copy_values_from(const ParamStore& other) {
    if (other.size() != size()) throw std::invalid_argument("parameter store layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) tensors_[i].assign(other[i].data());
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (auto v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::string> paths_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

/// Row-normalized (A + I) as a dense [N, N] matrix.
template <typename T>
Tensor<T> normalized_adjacency(const Graph& g) {
  const std::size_t n = g.nodes;
  if (g.adjacency.size() != n * n) throw ShapeError("adjacency must be N x N");
  std::vector<T> a(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row += g.adjacency[i * n + j];
    for (std::size_t j = 0; j < n; ++j) {
      const double v = (i == j ? 1.0 : g.adjacency[i * n + j]) / row;
      a[i * n + j] = static_cast<T>(v);
    }
  }
  return Tensor<T>({n, n}, std::move(a));
}

/// Inputs of one batched forward pass. Tensors are [B, L, N, C].
template <typename T>
struct ModelInput {
  Tensor<T> x_noisy;
  Tensor<T> interp;     // linear interpolation of the visible values
  Tensor<T> cond_mask;  // 1 where visible
  std::vector<double> sigma;  // one noise level per batch element
  Tensor<T> adjacency;  // normalized, [N, N]
};

/// Sinusoidal encoding of the time index, shaped [1, L, 1, d] for broadcasting.
template <typename T>
Tensor<T> time_encoding(std::size_t steps, std::size_t d) {
  std::vector<T> e(steps * d);
  const std::size_t half = d / 2;
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::pow(1e4, -static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(1, half)));
      e[t * d + k] = static_cast<T>(std::sin(static_cast<double>(t) * w));
      e[t * d + half + k] = static_cast<T>(std::cos(static_cast<double>(t) * w));
    }
  return Tensor<T>({1, steps, 1, d}, std::move(e));
}

/// Sinusoidal features of c_noise at geometric frequencies 1 .. 1e4: [sin | cos].
template <typename T>
Tensor<T> noise_features(const std::vector<double>& c_noise, std::size_t frequencies) {
  const std::size_t b = c_noise.size();
  std::vector<T> f(b * 2 * frequencies);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < frequencies; ++k) {
      const double expo = frequencies > 1 ? static_cast<double>(k) / static_cast<double>(frequencies - 1) : 0.0;
      const double w = std::pow(1e4, expo);
      f[i * 2 * frequencies + k] = static_cast<T>(std::sin(c_noise[i] * w));
      f[i * 2 * frequencies + frequencies + k] = static_cast<T>(std::cos(c_noise[i] * w));
    }
  return Tensor<T>({b, 2 * frequencies}, std::move(f));
}

template <typename T>
class Model {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Linear {
    std::size_t w = npos, b = npos;
  };
  struct Norm {
    std::size_t gain = npos, bias = npos;
  };
  struct Attention {
    Linear q, k, v, o;
    Norm norm;
  };
  struct Mixer {
    Attention attn;        // bidir_attention
    std::size_t decay = npos;  // bidir_linear_scan
    Linear proj;
    Norm norm;
  };
  struct Stfem {
    Mixer temporal;
    Attention spatial;
    std::size_t mp_weight = npos;
    Norm mp_norm;
  };
  struct Nem {
    Linear embed;
    Attention temporal_cross;
    Mixer mixer;
    Attention spatial_cross;
    Attention spatial_self;
    Linear gate, out;
  };

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  ParamStore<T> init_params(std::uint64_t seed) const { return ParamStore<T>(specs_, seed); }

  /// Network evaluations so far, one per batch element of every forward pass.
  /// Shared by copies of the model.
  std::size_t forward_evaluations() const { return evaluations_->load(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : specs_) n += shape_numel(s.shape);
    return n;
  }

  // -------------------------------------------------------------------------
  // Building blocks (public for testing)
  // -------------------------------------------------------------------------

  Tensor<T> linear(const ParamStore<T>& ps, const Linear& l, const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, ps[l.w]);
    return l.b == npos ? y : add(y, ps[l.b]);
  }

  Tensor<T> norm(const ParamStore<T>& ps, const Norm& n, const Tensor<T>& x) const {
    return layer_norm(x, ps[n.gain], ps[n.bias], -1);
  }

  Tensor<T> drop(const Tensor<T>& x, const ForwardContext& ctx) const {
    if (!ctx.training || cfg_.dropout <= 0.0) return x;
    if (!ctx.rng) throw std::logic_error("training forward requires an rng for dropout");
    return dropout(x, cfg_.dropout, *ctx.rng, true);
  }

  /// Multi-head attention along axis 1 of z [A, S, I, d], with keys/values
  /// from h [A, Sk, I, d], followed by residual and layer norm. h == z is
  /// self-attention.
  Tensor<T> cross_attention(const ParamStore<T>& ps, const Attention& a, const Tensor<T>& z, const Tensor<T>& h,
                            const ForwardContext& ctx) const {
    Tensor<T> o = attention(linear(ps, a.q, z), linear(ps, a.k, h), linear(ps, a.v, h), cfg_.heads);
    return norm(ps, a.norm, add(z, drop(linear(ps, a.o, o), ctx)));
  }

  /// Attention along time, independently per node. x, c: [B, L, N, d].
  Tensor<T> temporal_attention(const ParamStore<T>& ps, const Attention& a, const Tensor<T>& x, const Tensor<T>* c,
                               const ForwardContext& ctx) const {
    return cross_attention(ps, a, x, c ? *c : x, ctx);
  }

  /// Attention across nodes, independently per time step.
  Tensor<T> spatial_attention(const ParamStore<T>& ps, const Attention& a, const Tensor<T>& x, const Tensor<T>* c,
                              const ForwardContext& ctx) const {
    const auto& s = x.shape();
    const std::size_t b = s[0], l = s[1], n = s[2], d = s[3];
    Tensor<T> z = reshape(x, {b * l, n, 1, d});
    Tensor<T> h = c ? reshape(*c, {b * l, c->size(2), 1, d}) : z;
    return reshape(cross_attention(ps, a, z, h, ctx), {b, l, n, d});
  }

  /// Bidirectional temporal mixing with residual and layer norm.
  Tensor<T> temporal_mix(const ParamStore<T>& ps, const Mixer& m, const Tensor<T>& x, const ForwardContext& ctx) const {
    if (cfg_.temporal_mixer == TemporalMixer::bidir_attention) return temporal_attention(ps, m.attn, x, nullptr, ctx);
    Tensor<T> seq = permute(x, {0, 2, 1, 3});  // [B, N, L, d]
    Tensor<T> a = sigmoid(ps[m.decay]);
    Tensor<T> both = concat<T>({ema_scan(seq, a, false), ema_scan(seq, a, true)}, -1);
    Tensor<T> mixed = permute(linear(ps, m.proj, both), {0, 2, 1, 3});
    return norm(ps, m.norm, add(x, drop(mixed, ctx)));
  }

  /// H' = A_hat H W + H with A_hat the normalized adjacency [N, N].
  Tensor<T> message_passing(const ParamStore<T>& ps, std::size_t weight, const Tensor<T>& h,
                            const Tensor<T>& adjacency, const ForwardContext& ctx) const {
    const std::size_t n = h.size(-2);
    if (adjacency.dim() != 2 || adjacency.size(0) != n || adjacency.size(1) != n)
      throw ShapeError("message_passing: adjacency " + to_string(adjacency.shape()) + " does not match " +
                       std::to_string(n) + " nodes");
    return add(h, drop(matmul(matmul(adjacency, h), ps[weight]), ctx));
  }

  Tensor<T> stfem_forward(const ParamStore<T>& ps, const Stfem& s, const Tensor<T>& h, const Tensor<T>& adjacency,
                          const ForwardContext& ctx) const {
    if (!cfg_.use_stfem) return h;
    Tensor<T> x = temporal_mix(ps, s.temporal, h, ctx);
    x = spatial_attention(ps, s.spatial, x, nullptr, ctx);
    const auto& sh = x.shape();
    Tensor<T> flat = reshape(x, {sh[0] * sh[1], sh[2], sh[3]});
    Tensor<T> mp = message_passing(ps, s.mp_weight, flat, adjacency, ctx);
    return norm(ps, s.mp_norm, reshape(mp, sh));
  }

  /// Strided temporal reduction: windows of f_t steps folded into features
  /// and projected (kernel f_t, stride f_t). Zero-pads L to a multiple of f_t.
  Tensor<T> temporal_down(const ParamStore<T>& ps, const Linear& l, const Tensor<T>& x) const {
    const std::size_t f = cfg_.f_t;
    if (f == 1) return silu(linear(ps, l, x));
    const auto& s = x.shape();
    const std::size_t b = s[0], len = s[1], n = s[2], d = s[3];
    const std::size_t lp = (len + f - 1) / f * f;
    Tensor<T> seq = permute(pad(x, 1, lp), {0, 2, 1, 3});
    Tensor<T> folded = reshape(seq, {b, n, lp / f, f * d});
    return permute(silu(linear(ps, l, folded)), {0, 2, 1, 3});
  }

  /// Node pooling: mean over each segment of f_s consecutive real nodes, then a
  /// projection. Padding nodes carry zero weight.
  Tensor<T> spatial_down(const ParamStore<T>& ps, const Linear& l, const Tensor<T>& x) const {
    const std::size_t f = cfg_.f_s;
    if (f == 1) return silu(linear(ps, l, x));
    const auto& s = x.shape();
    const std::size_t b = s[0], len = s[1], n = s[2], d = s[3];
    const std::size_t np = (n + f - 1) / f * f, groups = np / f;
    std::vector<T> w(np);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t real = std::min(f, n - g * f);
      for (std::size_t k = 0; k < f; ++k) w[g * f + k] = k < real ? static_cast<T>(1.0 / static_cast<double>(real)) : T(0);
    }
    Tensor<T> weights({1, groups, f, 1}, std::move(w));
    Tensor<T> grouped = reshape(pad(x, 2, np), {b * len, groups, f, d});
    Tensor<T> pooled = reshape(sum(mul(grouped, weights), 2), {b, len, groups, d});
    return silu(linear(ps, l, pooled));
  }

  /// Mirror of spatial_down: nearest-neighbour expansion to the skip's node
  /// count, concatenation with the skip, projection.
  Tensor<T> spatial_up(const ParamStore<T>& ps, const Linear& l, const Tensor<T>& x, const Tensor<T>& skip) const {
    const std::size_t n = skip.size(2);
    Tensor<T> up = repeat_interleave(x, 2, cfg_.f_s);
    if (up.size(2) != n) up = slice(up, 2, 0, n);
    return silu(linear(ps, l, concat<T>({up, skip}, -1)));
  }

  Tensor<T> temporal_up(const ParamStore<T>& ps, const Linear& l, const Tensor<T>& x, const Tensor<T>& skip) const {
    const std::size_t len = skip.size(1);
    Tensor<T> up = repeat_interleave(x, 1, cfg_.f_t);
    if (up.size(1) != len) up = slice(up, 1, 0, len);
    return silu(linear(ps, l, concat<T>({up, skip}, -1)));
  }

  /// Per-sample noise-level embedding [B, d].
  Tensor<T> sigma_embedding(const ParamStore<T>& ps, const std::vector<double>& c_noise) const {
    Tensor<T> f = noise_features<T>(c_noise, cfg_.embedding_frequencies);
    return linear(ps, embed2_, silu(linear(ps, embed1_, f)));
  }

  /// One noise extraction module. Returns (next residual stream, noise estimate).
  std::pair<Tensor<T>, Tensor<T>> nem_forward(const ParamStore<T>& ps, const Nem& m, const Tensor<T>& z,
                                              const Tensor<T>* cond, const Tensor<T>& emb,
                                              const ForwardContext& ctx) const {
    const std::size_t b = z.size(0), d = cfg_.channels;
    Tensor<T> e = reshape(linear(ps, m.embed, emb), {b, 1, 1, d});
    Tensor<T> h = add(z, e);
    h = temporal_attention(ps, m.temporal_cross, h, cond, ctx);
    h = temporal_mix(ps, m.mixer, h, ctx);
    h = spatial_attention(ps, m.spatial_cross, h, cond, ctx);
    if (cfg_.use_self_attention) h = spatial_attention(ps, m.spatial_self, h, nullptr, ctx);
    Tensor<T> g = linear(ps, m.gate, h);
    Tensor<T> gated = mul(tanh(slice(g, -1, 0, d)), sigmoid(slice(g, -1, d, d)));
    Tensor<T> o = linear(ps, m.out, gated);
    const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    Tensor<T> next = scale(add(z, slice(o, -1, 0, d)), inv_sqrt2);
    return {next, slice(o, -1, d, d)};
  }

  /// F: [B, L, N, C] scaled noisy input plus conditioning -> [B, L, N, C].
  Tensor<T> backbone_forward(const ParamStore<T>& ps, const Tensor<T>& x_scaled, const Tensor<T>& interp,
                             const Tensor<T>& cond_mask, const Tensor<T>& adjacency,
                             const std::vector<double>& c_noise, const ForwardContext& ctx) const {
    check_input(x_scaled, interp, cond_mask, c_noise.size());
    const bool cond_on = cfg_.use_cond;
    const Tensor<T> pos = time_encoding<T>(x_scaled.size(1), cfg_.channels);
    Tensor<T> p = add(silu(linear(ps, in_primary_, concat<T>({x_scaled, cond_mask}, -1))), pos);
    p = stfem_forward(ps, stfem_primary_, p, adjacency, ctx);

    Tensor<T> c1, c2, c3;
    if (cond_on) {
      c1 = add(silu(linear(ps, in_cond_, concat<T>({interp, cond_mask}, -1))), pos);
      c1 = stfem_forward(ps, stfem_cond_, c1, adjacency, ctx);
    }
    // stage 1: full resolution
    p = temporal_attention(ps, inject_[0], p, cond_on ? &c1 : nullptr, ctx);
    Tensor<T> skip0 = p;
    p = temporal_down(ps, down_t_, p);
    if (cond_on) c2 = temporal_down(ps, cond_down_t_, temporal_attention(ps, cond_self_[0], c1, nullptr, ctx));
    // stage 2: after temporal compression
    p = spatial_attention(ps, inject_[1], p, cond_on ? &c2 : nullptr, ctx);
    Tensor<T> skip1 = p;
    p = spatial_down(ps, down_s_, p);
    if (cond_on) c3 = spatial_down(ps, cond_down_s_, spatial_attention(ps, cond_self_[1], c2, nullptr, ctx));
    // stage 3: bottleneck
    Tensor<T> emb = sigma_embedding(ps, c_noise);
    Tensor<T> noise;
    if (cfg_.use_nem) {
      Tensor<T> z = p;
      for (const auto& block : nem_) {
        auto [next, est] = nem_forward(ps, block, z, cond_on ? &c3 : nullptr, emb, ctx);
        noise = noise.defined() ? add(noise, est) : est;
        z = next;
      }
    } else {
      const std::size_t b = p.size(0), d = cfg_.channels;
      noise = add(p, reshape(linear(ps, bottleneck_embed_, emb), {b, 1, 1, d}));
    }
    // the reconstruction path also sees the conditional features of each stage
    Tensor<T> up = spatial_up(ps, up_s_, noise, cond_on ? concat<T>({skip1, c2}, -1) : skip1);
    up = temporal_up(ps, up_t_, up, cond_on ? concat<T>({skip0, c1}, -1) : skip0);
    return linear(ps, head2_, silu(linear(ps, head1_, up)));
  }

  /// Consistency function f(x, s) = c_skip x + c_out F(c_in x, ...). Exactly
  /// x_noisy at s == sigma_min.
  Tensor<T> consistency_forward(const ParamStore<T>& ps, const ModelInput<T>& in, const NoiseSchedule& schedule,
                                const ForwardContext& ctx) const {
    const std::size_t b = in.sigma.size();
    if (b == 0 || in.x_noisy.dim() != 4 || in.x_noisy.size(0) != b)
      throw ShapeError("consistency_forward: x_noisy must be [B, L, N, C] with B = number of sigmas");
    std::vector<T> skip(b), out(b), cin(b);
    std::vector<double> cnoise(b);
    for (std::size_t i = 0; i < b; ++i) {
      const Scalings sc = scalings(in.sigma[i], schedule);
      skip[i] = static_cast<T>(sc.c_skip);
      out[i] = static_cast<T>(sc.c_out);
      cin[i] = static_cast<T>(sc.c_in);
      cnoise[i] = sc.c_noise;
    }
    evaluations_->fetch_add(b);
    const Shape per{b, 1, 1, 1};
    Tensor<T> x_scaled = mul(in.x_noisy, Tensor<T>(per, cin));
    Tensor<T> f = backbone_forward(ps, x_scaled, in.interp, in.cond_mask, in.adjacency, cnoise, ctx);
    return add(mul(in.x_noisy, Tensor<T>(per, skip)), mul(f, Tensor<T>(per, out)));
  }

  const Stfem& stfem_primary() const { return stfem_primary_; }
  const std::vector<Nem>& nem_blocks() const { return nem_; }
  const Attention& injection(std::size_t stage) const { return inject_.at(stage); }

 private:
  void check_input(const Tensor<T>& x, const Tensor<T>& interp, const Tensor<T>& mask, std::size_t b) const {
    if (x.dim() != 4 || x.size(3) != cfg_.data_channels || x.size(0) != b)
      throw ShapeError("backbone: input " + to_string(x.shape()) + " is not [B, L, N, " +
                       std::to_string(cfg_.data_channels) + "] with B = " + std::to_string(b));
    if (interp.shape() != x.shape() || mask.shape() != x.shape())
      throw ShapeError("backbone: conditioning shapes " + to_string(interp.shape()) + " / " + to_string(mask.shape()) +
                       " differ from input " + to_string(x.shape()));
  }

  std::size_t add_param(std::string path, Shape shape, Init init, std::size_t fan_in = 1) {
    specs_.push_back(ParamSpec{std::move(path), std::move(shape), init, fan_in});
    return specs_.size() - 1;
  }

  Linear make_linear(const std::string& path, std::size_t in, std::size_t out, bool bias = true,
                     bool zero = false) {
    Linear l;
    l.w = add_param(path + ".weight", {in, out}, zero ? Init::zeros : Init::fan_in_uniform, in);
    if (bias) l.b = add_param(path + ".bias", {out}, zero ? Init::zeros : Init::fan_in_uniform, in);
    return l;
  }

  Norm make_norm(const std::string& path) {
    const std::size_t d = cfg_.channels;
    return Norm{add_param(path + ".gain", {d}, Init::ones), add_param(path + ".bias", {d}, Init::zeros)};
  }

  Attention make_attention(const std::string& path) {
    const std::size_t d = cfg_.channels;
    Attention a;
    a.q = make_linear(path + ".q", d, d);
    a.k = make_linear(path + ".k", d, d);
    a.v = make_linear(path + ".v", d, d);
    a.o = make_linear(path + ".o", d, d);
    a.norm = make_norm(path + ".norm");
    return a;
  }

  Mixer make_mixer(const std::string& path) {
    Mixer m;
    if (cfg_.temporal_mixer == TemporalMixer::bidir_attention) {
      m.attn = make_attention(path + ".attn");
    } else {
      const std::size_t d = cfg_.channels;
      m.decay = add_param(path + ".decay_logit", {d}, Init::decay_logit);
      m.proj = make_linear(path + ".proj", 2 * d, d);
      m.norm = make_norm(path + ".norm");
    }
    return m;
  }

  Stfem make_stfem(const std::string& path) {
    Stfem s;
    if (!cfg_.use_stfem) return s;
    const std::size_t d = cfg_.channels;
    s.temporal = make_mixer(path + ".temporal");
    s.spatial = make_attention(path + ".spatial");
    s.mp_weight = add_param(path + ".mp.weight", {d, d}, Init::fan_in_uniform, d);
    s.mp_norm = make_norm(path + ".mp.norm");
    return s;
  }

  void build() {
    const std::size_t d = cfg_.channels, c = cfg_.data_channels;
    const std::size_t emb_in = 2 * cfg_.embedding_frequencies;
    in_primary_ = make_linear("primary.input", 2 * c, d);
    stfem_primary_ = make_stfem("primary.stfem");
    if (cfg_.use_cond) {
      in_cond_ = make_linear("cond.input", 2 * c, d);
      stfem_cond_ = make_stfem("cond.stfem");
    }
    inject_.push_back(make_attention("primary.inject0"));
    down_t_ = make_linear("primary.down_t", cfg_.f_t * d, d);
    if (cfg_.use_cond) {
      cond_self_.push_back(make_attention("cond.self0"));
      cond_down_t_ = make_linear("cond.down_t", cfg_.f_t * d, d);
    }
    inject_.push_back(make_attention("primary.inject1"));
    down_s_ = make_linear("primary.down_s", d, d);
    if (cfg_.use_cond) {
      cond_self_.push_back(make_attention("cond.self1"));
      cond_down_s_ = make_linear("cond.down_s", d, d);
    }
    embed1_ = make_linear("sigma.fc1", emb_in, d);
    embed2_ = make_linear("sigma.fc2", d, d);
    if (cfg_.use_nem) {
      for (std::size_t i = 0; i < cfg_.nem_layers; ++i) {
        const std::string p = "nem" + std::to_string(i);
        Nem m;
        m.embed = make_linear(p + ".embed", d, d);
        m.temporal_cross = make_attention(p + ".temporal_cross");
        m.mixer = make_mixer(p + ".mixer");
        m.spatial_cross = make_attention(p + ".spatial_cross");
        if (cfg_.use_self_attention) m.spatial_self = make_attention(p + ".spatial_self");
        m.gate = make_linear(p + ".gate", d, 2 * d);
        m.out = make_linear(p + ".out", d, 2 * d);
        nem_.push_back(m);
      }
    } else {
      bottleneck_embed_ = make_linear("bottleneck.embed", d, d);
    }
    const std::size_t up_width = (cfg_.use_cond ? 3 : 2) * d;
    up_s_ = make_linear("up.spatial", up_width, d);
    up_t_ = make_linear("up.temporal", up_width, d);
    head1_ = make_linear("head.fc1", d, d);
    head2_ = make_linear("head.fc2", d, c, true, true);
  }

  ModelConfig cfg_;
  std::shared_ptr<std::atomic<std::size_t>> evaluations_ = std::make_shared<std::atomic<std::size_t>>(0);
  std::vector<ParamSpec> specs_;
  Linear in_primary_, in_cond_;
  Stfem stfem_primary_, stfem_cond_;
  std::vector<Attention> inject_, cond_self_;
  Linear down_t_, down_s_, cond_down_t_, cond_down_s_;
  Linear embed1_, embed2_, bottleneck_embed_;
  std::vector<Nem> nem_;
  Linear up_s_, up_t_, head1_, head2_;
};

/// Stacks per-window [L, N, C] arrays into a [B, L, N, C] tensor.
template <typename T>
Tensor<T> stack_windows(const std::vector<const std::vector<double>*>& parts, const Dims& d) {
  std::vector<T> v;
  v.reserve(parts.size() * d.size());
  for (const auto* p : parts)
    for (double x : *p) v.push_back(static_cast<T>(x));
  return Tensor<T>({parts.size(), d.steps, d.nodes, d.channels}, std::move(v));
}

template <typename T>
Tensor<T> mask_tensor(const std::vector<const Mask*>& parts, const Dims& d) {
  std::vector<T> v;
  v.reserve(parts.size() * d.size());
  for (const auto* p : parts)
    for (auto x : *p) v.push_back(x ? T(1) : T(0));
  return Tensor<T>({parts.size(), d.steps, d.nodes, d.channels}, std::move(v));
}

}  // namespace costi
