#include "qvit/model.hpp"

#include <cmath>
#include <random>

#include "qvit/ops.hpp"

namespace qvit {
namespace {

constexpr float kGammaFloor = 1e-4f;

QuantizerConfig quant_cfg(int bits, QuantKind kind, ScaleMode mode, bool enabled) {
  QuantizerConfig c;
  c.bits = enabled ? bits : kPassthroughBits;
  c.kind = kind;
  c.scale_mode = mode;
  return c;
}

Tensor xavier(int out, int in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<float> v(static_cast<std::size_t>(in) * out);
  for (auto& x : v) x = static_cast<float>(u(rng));
  return Tensor::from({std::size_t(out), std::size_t(in)}, std::move(v), true);
}

Tensor small_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.02);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

QLinear make_linear(int in, int out, const QuantizerConfig& input_cfg,
                    const QuantizerConfig& weight_cfg, std::mt19937_64& rng) {
  QLinear l;
  l.weight = xavier(out, in, rng);
  l.bias = Tensor::zeros({std::size_t(out)}, true);
  l.input_quant = Quantizer(input_cfg);
  l.weight_quant = Quantizer(weight_cfg);
  return l;
}

void push_quantizer_params(std::vector<NamedTensor>& out, const std::string& name,
                           const Quantizer& q) {
  const auto params = q.parameters();
  if (!params.empty()) out.push_back({name + ".alpha", params[0]});
  if (params.size() > 1) out.push_back({name + ".zero_point", params[1]});
}

void push_linear(std::vector<NamedTensor>& out, const std::string& name, const QLinear& l) {
  out.push_back({name + ".weight", l.weight});
  out.push_back({name + ".bias", l.bias});
  push_quantizer_params(out, name + ".input_quant", l.input_quant);
  push_quantizer_params(out, name + ".weight_quant", l.weight_quant);
}

bool is_quantizer_param(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".alpha") || ends_with(".zero_point");
}

}  // namespace

std::string to_string(ModelPart part) {
  switch (part) {
    case ModelPart::QkvLinears:
      return "qkv-linears";
    case ModelPart::AttentionWeights:
      return "attention-weights";
    case ModelPart::MhsaOutWeights:
      return "mhsa-out-weights";
    case ModelPart::Mlp:
      return "mlp";
  }
  return "unknown";
}

ModelPart model_part_from_string(const std::string& name) {
  for (auto p : kAllModelParts)
    if (to_string(p) == name) return p;
  throw ConfigError("unknown model part '" + name +
                    "' (expected qkv-linears, attention-weights, mhsa-out-weights or mlp)");
}

bool& QuantParts::operator[](ModelPart p) {
  switch (p) {
    case ModelPart::QkvLinears:
      return qkv_linears;
    case ModelPart::AttentionWeights:
      return attention_weights;
    case ModelPart::MhsaOutWeights:
      return mhsa_out_weights;
    case ModelPart::Mlp:
      return mlp;
  }
  return mlp;
}

bool QuantParts::operator[](ModelPart p) const { return const_cast<QuantParts&>(*this)[p]; }

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(depth, "depth");
  positive(heads, "heads");
  positive(embed_dim, "embed_dim");
  positive(mlp_ratio, "mlp_ratio");
  positive(classes, "classes");
  if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size must be divisible by patch_size");
  }
  for (int bits : {w_bits, a_bits, first_last_bits}) {
    QuantizerConfig{bits}.validate();
  }
  if (!(irm_eps > 0.0f)) throw ConfigError("irm_eps must be positive");
  if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps must be positive");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels &&
         depth == o.depth && heads == o.heads && embed_dim == o.embed_dim &&
         mlp_ratio == o.mlp_ratio && classes == o.classes;
}

ModelConfig set_module_precision(ModelConfig cfg, const std::string& part, bool full_precision) {
  cfg.quant_parts[model_part_from_string(part)] = !full_precision;
  return cfg;
}

DistributionStats distribution_stats(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("distribution_stats expects [B, H, T, d]");
  const std::size_t b = x.dim(0), h = x.dim(1), slice = x.dim(2) * x.dim(3);
  const auto xv = x.data();
  DistributionStats st;
  st.mean.assign(h, 0.0);
  st.variance.assign(h, 0.0);
  const double n = static_cast<double>(b * slice);
  for (std::size_t hh = 0; hh < h; ++hh) {
    double s = 0.0;
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t i = 0; i < slice; ++i) s += xv[(bb * h + hh) * slice + i];
    const double mu = s / n;
    double ss = 0.0;
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t i = 0; i < slice; ++i) {
        const double d = xv[(bb * h + hh) * slice + i] - mu;
        ss += d * d;
      }
    st.mean[hh] = mu;
    st.variance[hh] = ss / n;
  }
  return st;
}

Tensor irm_transform(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() != 4) throw DimensionError("irm_transform expects [B, H, T, d]");
  const std::size_t batch = x.dim(0), heads = x.dim(1), n = x.dim(2) * x.dim(3);
  if (gamma.numel() != heads || beta.numel() != heads) {
    throw DimensionError("irm_transform: gamma and beta need one value per head");
  }
  if (!(eps >= 0.0f)) throw ContractError("irm_transform: eps must be non-negative");
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (float g : gv) {
    if (g == 0.0f) throw ContractError("irm_transform: gamma must be non-zero");
  }
  // Per (sample, head): mean and sqrt(var + eps).
  auto mu = std::make_shared<std::vector<double>>(batch * heads);
  auto sd = std::make_shared<std::vector<double>>(batch * heads);
  std::vector<float> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t s = b * heads + h;
      const float* row = xv.data() + s * n;
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += row[i];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (row[i] - m) * (row[i] - m);
      var /= static_cast<double>(n);
      const double sdev = std::sqrt(var + eps);
      (*mu)[s] = m;
      (*sd)[s] = sdev;
      const double denom = static_cast<double>(gv[h]) * sdev;
      for (std::size_t i = 0; i < n; ++i)
        out[s * n + i] = static_cast<float>((row[i] - m + bv[h]) / denom);
    }
  }
  return make_op("irm", x.shape(), std::move(out), {x, gamma, beta},
                 [x, gamma, beta, mu, sd, batch, heads, n](BackwardContext& ctx) {
                   const auto g = ctx.grad_output();
                   const auto y = ctx.output();
                   const auto xv = x.data();
                   const auto gv = gamma.data();
                   const auto bv = beta.data();
                   std::span<float> gx, gg, gb;
                   if (ctx.needs_grad(0)) gx = ctx.grad_input(0);
                   if (ctx.needs_grad(1)) gg = ctx.grad_input(1);
                   if (ctx.needs_grad(2)) gb = ctx.grad_input(2);
                   const double nn = static_cast<double>(n);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t h = 0; h < heads; ++h) {
                       const std::size_t s = b * heads + h;
                       const double gam = gv[h], s_dev = (*sd)[s], m = (*mu)[s];
                       const float* gr = g.data() + s * n;
                       double sum_g = 0.0, sum_gy = 0.0, sum_gu = 0.0;
                       for (std::size_t i = 0; i < n; ++i) {
                         sum_g += gr[i];
                         sum_gy += static_cast<double>(gr[i]) * y[s * n + i];
                         sum_gu += static_cast<double>(gr[i]) * (xv[s * n + i] - m + bv[h]);
                       }
                       if (!gb.empty()) gb[h] += static_cast<float>(sum_g / (gam * s_dev));
                       if (!gg.empty()) gg[h] += static_cast<float>(-sum_gy / gam);
                       if (!gx.empty()) {
                         const double mean_g = sum_g / nn;
                         const double k1 = 1.0 / (gam * s_dev);
                         const double k2 = sum_gu / (nn * gam * s_dev * s_dev * s_dev);
                         for (std::size_t i = 0; i < n; ++i) {
                           const double u = xv[s * n + i] - m;
                           gx[s * n + i] += static_cast<float>((gr[i] - mean_g) * k1 - u * k2);
                         }
                       }
                     }
                   }
                 });
}

Tensor QLinear::forward(const Tensor& x, bool training) {
  return linear(input_quant(x, training), weight_quant(weight, training), bias);
}

Tensor extract_patches(const Tensor& images, int patch_size) {
  if (images.rank() != 4) throw ConfigError("images must be [B, H, W, C]");
  const std::size_t b = images.dim(0), hgt = images.dim(1), wid = images.dim(2),
                    ch = images.dim(3);
  const std::size_t p = static_cast<std::size_t>(patch_size);
  if (p == 0 || hgt % p != 0 || wid % p != 0) {
    throw ConfigError("image " + shape_str(images.shape()) + " not divisible into " +
                      std::to_string(patch_size) + "px patches");
  }
  const std::size_t ny = hgt / p, nx = wid / p, pd = p * p * ch;
  const auto iv = images.data();
  std::vector<float> out(b * ny * nx * pd);
  std::size_t o = 0;
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t py = 0; py < ny; ++py)
      for (std::size_t px = 0; px < nx; ++px)
        for (std::size_t y = 0; y < p; ++y) {
          const std::size_t src = ((bb * hgt + py * p + y) * wid + px * p) * ch;
          std::copy_n(iv.begin() + static_cast<std::ptrdiff_t>(src), p * ch,
                      out.begin() + static_cast<std::ptrdiff_t>(o));
          o += p * ch;
        }
  return Tensor::from({b, ny * nx, pd}, std::move(out));
}

QViT::QViT(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.embed_dim;
  const auto mode = cfg_.scale_mode;
  const bool q = cfg_.quantized();
  const int fl = q ? cfg_.first_last_bits : kPassthroughBits;
  const auto& parts = cfg_.quant_parts;
  using K = QuantKind;

  embed_ = make_linear(cfg_.patch_dim(), d, quant_cfg(fl, K::ActivationAsymmetric, mode, true),
                       quant_cfg(fl, K::WeightSymmetric, mode, true), rng);
  cls_token_ = small_normal({1, 1, std::size_t(d)}, rng);
  pos_embed_ = small_normal({1, std::size_t(cfg_.tokens()), std::size_t(d)}, rng);

  const QuantizerConfig off{kPassthroughBits};
  for (int l = 0; l < cfg_.depth; ++l) {
    Block b;
    b.ln1_gain = Tensor::full({std::size_t(d)}, 1.0f, true);
    b.ln1_bias = Tensor::zeros({std::size_t(d)}, true);
    b.ln2_gain = Tensor::full({std::size_t(d)}, 1.0f, true);
    b.ln2_bias = Tensor::zeros({std::size_t(d)}, true);

    const bool qkv = parts.qkv_linears;
    b.qkv_input = Quantizer(quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, qkv));
    const auto wq = quant_cfg(cfg_.w_bits, K::WeightSymmetric, mode, qkv);
    b.q = make_linear(d, d, off, wq, rng);
    b.k = make_linear(d, d, off, wq, rng);
    b.v = make_linear(d, d, off, wq, rng);

    const bool att = parts.attention_weights;
    b.q_act = Quantizer(quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, att));
    b.k_act = Quantizer(quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, att));
    b.v_act = Quantizer(quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, att));
    b.attn_act = Quantizer(quant_cfg(cfg_.a_bits, K::ActivationUnsigned, mode, att));

    const bool out = parts.mhsa_out_weights;
    b.proj = make_linear(d, d, quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, out),
                         quant_cfg(cfg_.w_bits, K::WeightSymmetric, mode, out), rng);

    const bool mlp = parts.mlp;
    const int hidden = d * cfg_.mlp_ratio;
    b.fc1 = make_linear(d, hidden, quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, mlp),
                        quant_cfg(cfg_.w_bits, K::WeightSymmetric, mode, mlp), rng);
    b.fc2 = make_linear(hidden, d, quant_cfg(cfg_.a_bits, K::ActivationAsymmetric, mode, mlp),
                        quant_cfg(cfg_.w_bits, K::WeightSymmetric, mode, mlp), rng);

    const std::size_t h = static_cast<std::size_t>(cfg_.heads);
    b.gamma_q = Tensor::full({h}, 1.0f, true);
    b.beta_q = Tensor::zeros({h}, true);
    b.gamma_k = Tensor::full({h}, 1.0f, true);
    b.beta_k = Tensor::zeros({h}, true);
    blocks_.push_back(std::move(b));
  }
  norm_gain_ = Tensor::full({std::size_t(d)}, 1.0f, true);
  norm_bias_ = Tensor::zeros({std::size_t(d)}, true);
  head_ = make_linear(d, cfg_.classes, quant_cfg(fl, K::ActivationAsymmetric, mode, true),
                      quant_cfg(fl, K::WeightSymmetric, mode, true), rng);
}

Tensor QViT::patch_embed(const Tensor& images, bool training) {
  if (images.rank() != 4 || images.dim(1) != std::size_t(cfg_.image_size) ||
      images.dim(2) != std::size_t(cfg_.image_size) ||
      images.dim(3) != std::size_t(cfg_.channels)) {
    throw ConfigError("image batch " + shape_str(images.shape()) + " does not match model " +
                      std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
                      "x" + std::to_string(cfg_.channels));
  }
  const std::size_t b = images.dim(0), d = std::size_t(cfg_.embed_dim);
  const Tensor tokens = embed_.forward(extract_patches(images, cfg_.patch_size), training);
  const Tensor cls = add(Tensor::zeros({b, 1, d}), cls_token_);
  const Tensor parts[] = {cls, tokens};
  return add(concat(parts, 1), pos_embed_);
}

std::pair<Tensor, LayerTelemetry> QViT::attention(std::size_t layer, const Tensor& x,
                                                  bool training, bool capture) {
  Block& blk = blocks_.at(layer);
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const std::size_t h = std::size_t(cfg_.heads), dh = std::size_t(cfg_.head_dim());
  auto split = [&](const Tensor& y) { return permute(reshape(y, {b, t, h, dh}), {0, 2, 1, 3}); };

  const Tensor xq = blk.qkv_input(x, training);
  const Tensor q = split(blk.q.forward(xq, training));
  const Tensor k = split(blk.k.forward(xq, training));
  const Tensor v = split(blk.v.forward(xq, training));

  Tensor q_rect = q, k_rect = k;
  if (cfg_.irm_enabled) {
    q_rect = irm_transform(q, blk.gamma_q, blk.beta_q, cfg_.irm_eps);
    k_rect = irm_transform(k, blk.gamma_k, blk.beta_k, cfg_.irm_eps);
  }
  const Tensor qa = blk.q_act(q_rect, training);
  const Tensor ka = blk.k_act(k_rect, training);
  const Tensor va = blk.v_act(v, training);

  const Tensor scores = mul_scalar(matmul_nt(qa, ka), 1.0f / std::sqrt(static_cast<float>(dh)));
  const Tensor probs = softmax_lastdim(scores);
  const Tensor probs_q = blk.attn_act(probs, training);
  const Tensor ctx = reshape(permute(matmul(probs_q, va), {0, 2, 1, 3}), {b, t, d});
  Tensor out = blk.proj.forward(ctx, training);

  LayerTelemetry tel;
  if (capture) {
    tel.raw_q = q;
    tel.raw_k = k;
    tel.q = q_rect;
    tel.k = k_rect;
    tel.attention = probs;
    tel.quantized_attention = probs_q;
    if (!blk.q_act.passthrough()) tel.q_codes = quantize_activation(q_rect, blk.q_act.state());
    if (!blk.k_act.passthrough()) tel.k_codes = quantize_activation(k_rect, blk.k_act.state());
  }
  return {std::move(out), std::move(tel)};
}

QViT::Output QViT::forward(const Tensor& images, bool training, bool capture) {
  Output out;
  Tensor x = patch_embed(images, training);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& blk = blocks_[l];
    auto [attn, tel] = attention(l, layer_norm(x, blk.ln1_gain, blk.ln1_bias, cfg_.ln_eps),
                                 training, capture);
    x = add(x, attn);
    const Tensor h = layer_norm(x, blk.ln2_gain, blk.ln2_bias, cfg_.ln_eps);
    x = add(x, blk.fc2.forward(gelu(blk.fc1.forward(h, training)), training));
    if (capture) out.telemetry.layers.push_back(std::move(tel));
  }
  const std::size_t b = x.dim(0), d = x.dim(2);
  const Tensor cls = reshape(slice(x, 1, 0, 1), {b, d});
  out.logits = head_.forward(layer_norm(cls, norm_gain_, norm_bias_, cfg_.ln_eps), training);
  return out;
}

std::vector<NamedTensor> QViT::parameters() const {
  std::vector<NamedTensor> out;
  push_linear(out, "embed", embed_);
  out.push_back({"cls_token", cls_token_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    push_quantizer_params(out, p + "qkv_input", b.qkv_input);
    push_linear(out, p + "q", b.q);
    push_linear(out, p + "k", b.k);
    push_linear(out, p + "v", b.v);
    push_quantizer_params(out, p + "q_act", b.q_act);
    push_quantizer_params(out, p + "k_act", b.k_act);
    push_quantizer_params(out, p + "v_act", b.v_act);
    push_quantizer_params(out, p + "attn_act", b.attn_act);
    out.push_back({p + "irm.gamma_q", b.gamma_q});
    out.push_back({p + "irm.beta_q", b.beta_q});
    out.push_back({p + "irm.gamma_k", b.gamma_k});
    out.push_back({p + "irm.beta_k", b.beta_k});
    push_linear(out, p + "proj", b.proj);
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    push_linear(out, p + "fc1", b.fc1);
    push_linear(out, p + "fc2", b.fc2);
  }
  out.push_back({"norm.gain", norm_gain_});
  out.push_back({"norm.bias", norm_bias_});
  push_linear(out, "head", head_);
  return out;
}

std::vector<NamedQuantizer> QViT::quantizers() {
  std::vector<NamedQuantizer> out;
  auto lin = [&](const std::string& n, QLinear& l) {
    out.push_back({n + ".input_quant", &l.input_quant});
    out.push_back({n + ".weight_quant", &l.weight_quant});
  };
  lin("embed", embed_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "qkv_input", &b.qkv_input});
    lin(p + "q", b.q);
    lin(p + "k", b.k);
    lin(p + "v", b.v);
    out.push_back({p + "q_act", &b.q_act});
    out.push_back({p + "k_act", &b.k_act});
    out.push_back({p + "v_act", &b.v_act});
    out.push_back({p + "attn_act", &b.attn_act});
    lin(p + "proj", b.proj);
    lin(p + "fc1", b.fc1);
    lin(p + "fc2", b.fc2);
  }
  lin("head", head_);
  return out;
}

void QViT::clamp_parameters() {
  for (auto& b : blocks_) {
    for (Tensor* g : {&b.gamma_q, &b.gamma_k}) {
      for (auto& v : g->mutable_data()) {
        if (std::abs(v) < kGammaFloor) v = v < 0.0f ? -kGammaFloor : kGammaFloor;
      }
    }
  }
  for (auto& nq : quantizers()) nq.quantizer->clamp_parameters();
}

std::size_t QViT::copy_float_weights_from(const QViT& other) {
  if (!cfg_.same_architecture(other.cfg_)) {
    throw ConfigError("cannot copy weights between different architectures");
  }
  std::size_t copied = 0;
  const auto src = other.parameters();
  for (auto& dst : parameters()) {
    if (is_quantizer_param(dst.name)) continue;
    for (const auto& s : src) {
      if (s.name == dst.name && s.tensor.shape() == dst.tensor.shape()) {
        auto out = const_cast<Tensor&>(dst.tensor).mutable_data();
        const auto in = s.tensor.data();
        std::copy(in.begin(), in.end(), out.begin());
        ++copied;
        break;
      }
    }
  }
  return copied;
}

}  // namespace qvit
