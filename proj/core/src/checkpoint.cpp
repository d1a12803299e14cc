#include "qvit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "json_io.hpp"

namespace qvit {
namespace {

constexpr char kMagic[4] = {'Q', 'V', 'I', 'T'};

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t off) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

void append_floats(std::string& out, std::span<const float> values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_le(out, bits);
  }
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

Checkpoint snapshot(QViT& model, std::int64_t step) {
  Checkpoint c;
  c.config = model.config();
  c.step = step;
  for (const auto& nq : model.quantizers()) c.quantizers.emplace_back(nq.name, nq.quantizer->state());
  for (const auto& p : model.parameters()) c.tensors.push_back({p.name, p.tensor.clone()});
  return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  using json_io::Json;
  std::string blobs;
  Json tensors = Json::array();
  for (const auto& t : ckpt.tensors) {
    const std::size_t offset = blobs.size();
    append_floats(blobs, t.tensor.data());
    const std::size_t length = blobs.size() - offset;
    Json e;
    e["name"] = t.name;
    e["shape"] = t.tensor.shape();
    e["dtype"] = "f32";
    e["offset"] = offset;
    e["length"] = length;
    e["checksum"] = hex64(fnv1a64(blobs.data() + offset, length));
    tensors.push_back(std::move(e));
  }
  Json quant = Json::array();
  for (const auto& [name, state] : ckpt.quantizers) {
    Json e;
    e["name"] = name;
    e["state"] = json_io::to_json(state);
    quant.push_back(std::move(e));
  }
  Json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["model"] = json_io::to_json(ckpt.config);
  manifest["step"] = ckpt.step;
  manifest["quantizers"] = std::move(quant);
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += blobs;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using json_io::Json;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < 16) throw IntegrityError("checkpoint truncated inside the header");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("checkpoint format version " + std::to_string(version) +
                                  " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes, 8);
  if (bytes.size() - 16 < manifest_len) throw IntegrityError("checkpoint truncated in manifest");
  Json manifest;
  try {
    manifest = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const std::size_t blob_base = 16 + manifest_len;

  Checkpoint c;
  try {
    json_io::from_json(manifest.at("model"), c.config, "checkpoint.model");
    c.step = manifest.at("step").get<std::int64_t>();
    for (const auto& q : manifest.at("quantizers")) {
      c.quantizers.emplace_back(q.at("name").get<std::string>(),
                                json_io::quantizer_state_from_json(q.at("state")));
    }
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto length = t.at("length").get<std::size_t>();
      if (t.at("dtype").get<std::string>() != "f32") {
        throw FormatError("tensor '" + name + "' has unsupported dtype");
      }
      if (length != shape_numel(shape) * 4) {
        throw IntegrityError("tensor '" + name + "' length does not match its shape");
      }
      if (blob_base + offset + length > bytes.size()) {
        throw IntegrityError("checkpoint truncated in tensor '" + name + "'");
      }
      const char* p = bytes.data() + blob_base + offset;
      if (hex64(fnv1a64(p, length)) != t.at("checksum").get<std::string>()) {
        throw IntegrityError("checksum mismatch in tensor '" + name + "'");
      }
      std::vector<float> values(length / 4);
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = get_le<std::uint32_t>(bytes, blob_base + offset + 4 * i);
        std::memcpy(&values[i], &bits, sizeof bits);
      }
      c.tensors.push_back({name, Tensor::from(shape, std::move(values))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return c;
}

void save_checkpoint(QViT& model, const std::string& path, std::int64_t step) {
  const std::string bytes = serialize_checkpoint(snapshot(model, step));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

void apply_checkpoint(QViT& model, const Checkpoint& ckpt) {
  if (!(model.config() == ckpt.config)) {
    throw ConfigError("checkpoint configuration does not match the model");
  }
  auto quantizers = model.quantizers();
  if (quantizers.size() != ckpt.quantizers.size()) {
    throw ConsistencyError("checkpoint quantizer count does not match the model");
  }
  for (std::size_t i = 0; i < quantizers.size(); ++i) {
    if (quantizers[i].name != ckpt.quantizers[i].first) {
      throw ConsistencyError("checkpoint quantizer '" + ckpt.quantizers[i].first +
                             "' does not match '" + quantizers[i].name + "'");
    }
    quantizers[i].quantizer->set_state(ckpt.quantizers[i].second);
  }
  const auto params = model.parameters();
  if (params.size() != ckpt.tensors.size()) {
    throw ConsistencyError("checkpoint tensor count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ckpt.tensors[i];
    if (src.name != params[i].name || src.tensor.shape() != params[i].tensor.shape()) {
      throw ConsistencyError("checkpoint tensor '" + src.name + "' does not match '" +
                             params[i].name + "'");
    }
    Tensor dst = params[i].tensor;
    const auto v = src.tensor.data();
    std::copy(v.begin(), v.end(), dst.mutable_data().begin());
  }
}

std::unique_ptr<QViT> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<QViT>(ckpt.config, 0);
  apply_checkpoint(*model, ckpt);
  return model;
}

}  // namespace qvit
