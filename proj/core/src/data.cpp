#include "qvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

namespace qvit {
namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open IDX file '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
  std::size_t payload = 0;
};

IdxFile parse_idx(const std::string& path, std::uint32_t magic, std::size_t rank) {
  IdxFile f;
  f.bytes = read_file(path);
  const std::size_t header = 4 + 4 * rank;
  if (f.bytes.size() < 4 || be32(f.bytes, 0) != magic) {
    throw FormatError("'" + path + "': bad IDX magic (expected 0x" +
                      (magic == 0x803 ? std::string("803") : std::string("801")) + ")");
  }
  if (f.bytes.size() < header) throw FormatError("'" + path + "': truncated IDX header");
  std::size_t expected = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    f.dims.push_back(be32(f.bytes, 4 + 4 * i));
    expected *= f.dims.back();
  }
  if (f.bytes.size() - header < expected) {
    throw FormatError("'" + path + "': truncated IDX payload (" +
                      std::to_string(f.bytes.size() - header) + " of " +
                      std::to_string(expected) + " bytes)");
  }
  f.payload = header;
  return f;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void Dataset::validate() const {
  if (n == 0) throw ConsistencyError("dataset is empty");
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw ConsistencyError("dataset image dimensions must be positive");
  }
  if (images.size() != n * image_bytes() || labels.size() != n) {
    throw ConsistencyError("dataset buffers do not match n = " + std::to_string(n));
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw ConsistencyError("label " + std::to_string(l) + " outside [0, " +
                             std::to_string(classes) + ")");
    }
  }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int class_count) {
  const IdxFile img = parse_idx(images_path, 0x803, 3);
  const IdxFile lab = parse_idx(labels_path, 0x801, 1);
  if (img.dims[0] != lab.dims[0]) {
    throw ConsistencyError("IDX count mismatch: " + std::to_string(img.dims[0]) +
                           " images vs " + std::to_string(lab.dims[0]) + " labels");
  }
  Dataset ds;
  ds.n = img.dims[0];
  ds.height = static_cast<int>(img.dims[1]);
  ds.width = static_cast<int>(img.dims[2]);
  ds.channels = 1;
  const std::size_t total = ds.n * ds.image_bytes();
  const auto first = img.bytes.begin() + static_cast<std::ptrdiff_t>(img.payload);
  ds.images.assign(first, first + static_cast<std::ptrdiff_t>(total));
  int max_label = 0;
  ds.labels.resize(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) {
    ds.labels[i] = lab.bytes[lab.payload + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = class_count > 0 ? class_count : max_label + 1;
  ds.validate();
  return ds;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.per_class < 1 || spec.image_size < 2) {
    throw ConfigError("synthetic dataset needs per_class >= 1 and image_size >= 2");
  }
  Dataset ds;
  ds.classes = spec.classes;
  ds.height = ds.width = spec.image_size;
  ds.channels = 1;
  ds.n = static_cast<std::size_t>(spec.classes) * spec.per_class;
  ds.images.resize(ds.n * ds.image_bytes());
  ds.labels.resize(ds.n);

  std::mt19937_64 rng(derive_seed(spec.seed, 0));
  std::normal_distribution<double> noise(0.0, 25.0);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  const double size = spec.image_size;
  std::size_t i = 0;
  for (int s = 0; s < spec.per_class; ++s) {
    for (int c = 0; c < spec.classes; ++c, ++i) {
      const double theta = std::numbers::pi * c / spec.classes;
      const double cycles = 2.0 + (c % 3);
      const double phase = 0.25 * std::numbers::pi * jitter(rng);
      const double amp = spec.amplitude * (1.0 + 0.4 * jitter(rng));
      std::uint8_t* img = ds.images.data() + i * ds.image_bytes();
      for (int y = 0; y < spec.image_size; ++y) {
        for (int x = 0; x < spec.image_size; ++x) {
          const double u = (x * std::cos(theta) + y * std::sin(theta)) / size;
          const double v =
              128.0 + amp * std::sin(2.0 * std::numbers::pi * cycles * u + phase) + noise(rng);
          img[y * spec.image_size + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
      ds.labels[i] = c;
    }
  }
  return ds;
}

ChannelStats channel_stats(const Dataset& ds) {
  ds.validate();
  const std::size_t c = static_cast<std::size_t>(ds.channels);
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.stddev.assign(c, 0.0);
  std::vector<double> sq(c, 0.0);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const double v = ds.images[i] / 255.0;
    st.mean[i % c] += v;
    sq[i % c] += v * v;
  }
  const double count = static_cast<double>(ds.images.size() / c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    st.mean[ch] /= count;
    const double var = std::max(sq[ch] / count - st.mean[ch] * st.mean[ch], 0.0);
    st.stddev[ch] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return st;
}

void flip_horizontal(std::span<float> image, int height, int width, int channels) {
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width / 2; ++x)
      for (int c = 0; c < channels; ++c)
        std::swap(image[(std::size_t(y) * width + x) * channels + c],
                  image[(std::size_t(y) * width + (width - 1 - x)) * channels + c]);
}

Tensor normalize_and_augment(const Dataset& ds, std::span<const std::size_t> indices,
                             const ChannelStats& stats, bool train_mode, std::uint64_t seed) {
  const std::size_t h = ds.height, w = ds.width, c = ds.channels, per = ds.image_bytes();
  if (stats.mean.size() != c) throw DimensionError("channel stats do not match the dataset");
  std::vector<float> out(indices.size() * per);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shift(-4, 4);
  std::bernoulli_distribution coin(0.5);
  std::vector<float> norm(per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= ds.n) throw IndexError("sample index out of range");
    const std::uint8_t* src = ds.images.data() + indices[b] * per;
    for (std::size_t i = 0; i < per; ++i) {
      norm[i] = static_cast<float>((src[i] / 255.0 - stats.mean[i % c]) / stats.stddev[i % c]);
    }
    float* dst = out.data() + b * per;
    if (!train_mode) {
      std::copy(norm.begin(), norm.end(), dst);
      continue;
    }
    if (coin(rng)) flip_horizontal(norm, ds.height, ds.width, ds.channels);
    const int dy = shift(rng), dx = shift(rng);
    // Zero padding happens after normalization, so padded pixels are 0.
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = long(y) + dy, sx = long(x) + dx;
        const bool inside = sy >= 0 && sx >= 0 && sy < long(h) && sx < long(w);
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[(y * w + x) * c + ch] = inside ? norm[(std::size_t(sy) * w + sx) * c + ch] : 0.0f;
      }
    }
  }
  return Tensor::from({indices.size(), h, w, c}, std::move(out));
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.labels.at(i));
  return out;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                             bool train_mode)
    : n_(ds.n), batch_size_(batch_size), seed_(seed), train_(train_mode) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
}

std::vector<std::size_t> BatchIterator::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> p(n_);
  for (std::size_t i = 0; i < n_; ++i) p[i] = i;
  if (!train_) return p;
  std::mt19937_64 rng(derive_seed(seed_, epoch));
  // Fisher-Yates with an explicit draw so the order does not depend on
  // the standard library's shuffle.
  for (std::size_t i = n_; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

std::vector<std::vector<std::size_t>> BatchIterator::batches(std::uint64_t epoch) const {
  const auto p = permutation(epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n_; start += batch_size_) {
    const std::size_t end = std::min(n_, start + batch_size_);
    if (train_ && end - start < batch_size_) break;
    out.emplace_back(p.begin() + static_cast<std::ptrdiff_t>(start),
                     p.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void DataSpec::validate() const {
  if (source == "synthetic") {
    if (synthetic.classes < 2) throw ConfigError("data.synthetic.classes must be >= 2");
    if (synthetic.per_class < 1 || test_per_class < 1) {
      throw ConfigError("data.synthetic.per_class and data.test_per_class must be >= 1");
    }
    if (synthetic.image_size < 2) throw ConfigError("data.synthetic.image_size must be >= 2");
  } else if (source == "idx") {
    if (train_images.empty() || train_labels.empty() || test_images.empty() ||
        test_labels.empty()) {
      throw ConfigError("idx data needs train_images, train_labels, test_images, test_labels");
    }
  } else {
    throw ConfigError("data.source must be 'synthetic' or 'idx', got '" + source + "'");
  }
}

DataSplits load_data(const DataSpec& spec) {
  spec.validate();
  if (spec.source == "idx") {
    DataSplits s{load_idx(spec.train_images, spec.train_labels),
                 load_idx(spec.test_images, spec.test_labels)};
    const int classes = std::max(s.train.classes, s.test.classes);
    s.train.classes = s.test.classes = classes;
    return s;
  }
  SyntheticSpec test = spec.synthetic;
  test.per_class = spec.test_per_class;
  test.seed = derive_seed(spec.synthetic.seed, 0x7e57);
  return {generate_synthetic(spec.synthetic), generate_synthetic(test)};
}

}  // namespace qvit
