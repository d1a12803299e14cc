#include <cstdint>

#include "qvit/model.hpp"

namespace qvit {

ModelStats model_stats(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t d = static_cast<std::uint64_t>(cfg.embed_dim);
  const std::uint64_t t = static_cast<std::uint64_t>(cfg.tokens());
  const std::uint64_t n = static_cast<std::uint64_t>(cfg.patches());
  const std::uint64_t pd = static_cast<std::uint64_t>(cfg.patch_dim());
  const std::uint64_t hidden = d * static_cast<std::uint64_t>(cfg.mlp_ratio);
  const std::uint64_t c = static_cast<std::uint64_t>(cfg.classes);
  const std::uint64_t h = static_cast<std::uint64_t>(cfg.heads);
  const std::uint64_t dh = static_cast<std::uint64_t>(cfg.head_dim());
  const std::uint64_t depth = static_cast<std::uint64_t>(cfg.depth);

  const std::uint64_t embed = pd * d + d;
  const std::uint64_t head = d * c + c;
  std::uint64_t block = 2 * d                 // ln1
                        + 3 * (d * d + d)     // q, k, v
                        + (d * d + d)         // proj
                        + 2 * d               // ln2
                        + (d * hidden + hidden) + (hidden * d + d);
  if (cfg.irm_enabled) block += 4 * h;
  const std::uint64_t body = d + t * d + depth * block + 2 * d;

  const bool q = cfg.quantized();
  const int body_bits = q ? cfg.w_bits : kPassthroughBits;
  const int fl_bits = q ? cfg.first_last_bits : kPassthroughBits;

  ModelStats st;
  st.params = embed + head + body;
  const double bits = static_cast<double>(body) * body_bits +
                      static_cast<double>(embed + head) * fl_bits;
  st.size_mb = bits / 8.0 / 1e6;

  auto bits_of = [&](bool part_on, int b) { return (q && part_on) ? b : kPassthroughBits; };
  const auto& parts = cfg.quant_parts;
  const double wa_fl = static_cast<double>(fl_bits) * fl_bits;
  const double wa_qkv = double(bits_of(parts.qkv_linears, cfg.w_bits)) *
                        bits_of(parts.qkv_linears, cfg.a_bits);
  const double aa_att = double(bits_of(parts.attention_weights, cfg.a_bits)) *
                        bits_of(parts.attention_weights, cfg.a_bits);
  const double wa_out = double(bits_of(parts.mhsa_out_weights, cfg.w_bits)) *
                        bits_of(parts.mhsa_out_weights, cfg.a_bits);
  const double wa_mlp = double(bits_of(parts.mlp, cfg.w_bits)) * bits_of(parts.mlp, cfg.a_bits);

  const double m_embed = double(n) * pd * d;
  const double m_qkv = 3.0 * t * d * d;
  const double m_att = 2.0 * h * t * t * dh;
  const double m_out = double(t) * d * d;
  const double m_mlp = 2.0 * t * d * hidden;
  const double m_head = double(d) * c;
  st.macs = m_embed + m_head + depth * (m_qkv + m_att + m_out + m_mlp);
  st.bops = (m_embed + m_head) * wa_fl +
            depth * (m_qkv * wa_qkv + m_att * aa_att + m_out * wa_out + m_mlp * wa_mlp);
  return st;
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig cfg;
  if (name == "tiny") return cfg;
  if (name == "deit-s" || name == "deit-b") {
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.channels = 3;
    cfg.depth = 12;
    cfg.mlp_ratio = 4;
    cfg.classes = 1000;
    cfg.heads = name == "deit-s" ? 6 : 12;
    cfg.embed_dim = name == "deit-s" ? 384 : 768;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected deit-s, deit-b or tiny)");
}

}  // namespace qvit
