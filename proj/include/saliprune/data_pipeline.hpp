#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "saliprune/rng.hpp"
#include "saliprune/tensor.hpp"

namespace saliprune {

enum class SplitTag : std::uint8_t { train = 0, val = 1, test = 2 };

const char* split_name(SplitTag tag);

/// Location of the class-determining patch of a synthetic sample, in pixels.
struct PatchBox {
  int top = 0;
  int left = 0;
  int size = 0;

  /// True when the continuous point lies over one of the patch pixels
  /// (pixel centers are integers, so each pixel spans +-0.5).
  bool contains(double row, double col) const {
    return row >= top - 0.5 && row <= top + size - 0.5 && col >= left - 0.5 &&
           col <= left + size - 0.5;
  }
};

struct Normalization {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Images are stored normalized, NCHW. The sample id is the row index.
struct Dataset {
  std::string source;  // "cifar10" or "synthetic"
  std::uint64_t seed = 0;
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  std::vector<float> images;
  std::vector<int> labels;
  std::vector<SplitTag> tags;
  /// Sample ids (all from the train split) used during pruning.
  std::vector<int> prune_subset;
  /// Synthetic only: one box per sample.
  std::vector<PatchBox> boxes;
  Normalization norm;

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t image_numel() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  bool synthetic() const { return !boxes.empty(); }
  std::vector<int> indices(SplitTag tag) const;
  /// [B, C, H, W] batch. With `augment`, each image is randomly flipped and
  /// cropped from a 4-pixel zero-padded copy.
  Tensor batch(std::span<const int> ids, Rng* augment = nullptr) const;
  std::vector<int> batch_labels(std::span<const int> ids) const;
  /// One image as [C, H, W].
  Tensor image(int id) const;
  /// Maps a normalized image back to [0, 1] display values.
  Tensor denormalize(const Tensor& chw) const;
  /// SHA-256 over shape, pixels, labels and split tags.
  std::string fingerprint() const;
  /// Throws when labels, tags or metadata are inconsistent.
  void validate() const;
};

/// Bytes per CIFAR-10 record: 1 label byte + 32*32*3 pixel bytes.
inline constexpr std::size_t kCifarRecordBytes = 1 + 32 * 32 * 3;

/// Parses CIFAR-10 binary batch files from `root` (data_batch_1..5.bin and
/// test_batch.bin, optionally inside cifar-10-batches-bin/). The training
/// files are split 0.9/0.1 into train/val, 5% of all training records form
/// the prune subset (drawn from the train split), and the test file becomes
/// the test split. Normalization is taken from the train split.
Dataset load_cifar10(const std::filesystem::path& root, std::uint64_t seed);

/// Parses records from one file into raw [0, 1] pixels and labels.
void read_cifar_file(const std::filesystem::path& file, std::vector<float>& pixels,
                     std::vector<int>& labels);

inline constexpr int kSyntheticPatterns = 16;
inline constexpr int kPatchSize = 8;

/// n images of side `size` holding Gaussian background noise and the 8x8
/// pattern of their class at a uniformly random position. Untagged: every
/// sample starts in the train split and unnormalized.
Dataset make_synthetic(int n, int num_classes, Rng& rng, int size = 32);

/// The 8x8x3 template of `label` (values 0 or 1, CHW).
std::vector<float> synthetic_pattern(int label);

/// Classifies a synthetic sample from its patch pixels alone by counting
/// pixels matching each class template (raw pixel values).
int pattern_oracle(const std::vector<float>& raw_chw, int size, const PatchBox& box,
                   int num_classes);

/// Deterministic disjoint partition. One ratio per split tag in order
/// (train, val, test); missing trailing ratios are zero. Sizes are
/// floor(r * n) with the remainder assigned to the first split.
void split(Dataset& data, std::span<const double> ratios, std::uint64_t seed);

/// Draws round(fraction * n_total) prune-subset ids from the train split.
void draw_prune_subset(Dataset& data, double fraction, int n_total, std::uint64_t seed);

/// Computes per-channel mean/std over the train split and normalizes every
/// image in place.
void normalize_from_train(Dataset& data);

/// Complete synthetic benchmark: generate, split 0.8/0.1/0.1, prune subset
/// of 5%, normalize.
Dataset synthetic_benchmark(int n, int num_classes, std::uint64_t seed);

}  // namespace saliprune
