#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qvit/tensor.hpp"

namespace qvit {

struct Dataset {
  std::vector<std::uint8_t> images;  // [n, height, width, channels]
  std::vector<int> labels;
  std::size_t n = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  int classes = 0;

  std::size_t image_bytes() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  // Throws ConsistencyError.
  void validate() const;
};

/// IDX image (magic 0x803, u8 [n, rows, cols]) and label (magic 0x801, u8
/// [n]) files. Throws FormatError for bad magic or truncation and
/// ConsistencyError when the counts disagree. class_count 0 infers it from
/// the largest label.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int class_count = 0);

struct SyntheticSpec {
  int classes = 4;
  int per_class = 256;
  int image_size = 32;
  std::uint64_t seed = 0;
  // Grating contrast on the 0-255 scale; pixel noise is N(0, 25^2).
  double amplitude = 14.0;
};

/// Class c is a sinusoidal grating with its own orientation and frequency;
/// each sample gets a small random phase and contrast jitter plus pixel
/// noise. Samples are interleaved by class.
Dataset generate_synthetic(const SyntheticSpec& spec);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};
ChannelStats channel_stats(const Dataset& ds);

/// Images at `indices` as floats [B, H, W, C] normalized with `stats`. In
/// train mode each image is flipped horizontally with p = 0.5 and randomly
/// cropped from a 4-pixel zero-padded copy, drawn from `seed`.
Tensor normalize_and_augment(const Dataset& ds, std::span<const std::size_t> indices,
                             const ChannelStats& stats, bool train_mode, std::uint64_t seed);

// In-place horizontal flip of one [H, W, C] float image.
void flip_horizontal(std::span<float> image, int height, int width, int channels);

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool train_mode);

  // Shuffled in train mode, identity order otherwise; a pure function of
  // (seed, epoch).
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;
  // Train mode drops the trailing partial batch; evaluation keeps it.
  std::vector<std::vector<std::size_t>> batches(std::uint64_t epoch) const;
  std::size_t batch_size() const { return batch_size_; }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool train_;
};

struct DataSpec {
  // "synthetic" or "idx".
  std::string source = "synthetic";
  SyntheticSpec synthetic;
  // Test split of the synthetic source: same patterns, different seed.
  int test_per_class = 128;
  std::string train_images, train_labels, test_images, test_labels;

  void validate() const;
};

struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits load_data(const DataSpec& spec);

// Mixes (seed, stream) into an independent 64-bit seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace qvit
