#include "saliprune/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <openssl/evp.h>

#include "saliprune/error.hpp"

namespace saliprune {

namespace fs = std::filesystem;

const char* split_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

std::vector<int> Dataset::indices(SplitTag tag) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (tags[i] == tag) out.push_back(i);
  }
  return out;
}

Tensor Dataset::batch(std::span<const int> ids, Rng* augment) const {
  const std::size_t per = image_numel();
  Tensor out({static_cast<int>(ids.size()), channels, height, width});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    const float* src = images.data() + static_cast<std::size_t>(ids[b]) * per;
    Real* dst = out.data() + b * per;
    if (!augment) {
      std::copy(src, src + per, dst);
      continue;
    }
    const bool flip = augment->bernoulli(0.5);
    const int dy = static_cast<int>(augment->below(9)) - 4;
    const int dx = static_cast<int>(augment->below(9)) - 4;
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const int sy = y + dy;
          int sx = x + dx;
          Real v = 0;
          if (sy >= 0 && sy < height && sx >= 0 && sx < width) {
            if (flip) sx = width - 1 - sx;
            v = src[(static_cast<std::size_t>(c) * height + sy) * width + sx];
          }
          dst[(static_cast<std::size_t>(c) * height + y) * width + x] = v;
        }
      }
    }
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const int> ids) const {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(labels[id]);
  return out;
}

Tensor Dataset::image(int id) const {
  const int one[] = {id};
  return batch(one).reshaped({channels, height, width});
}

Tensor Dataset::denormalize(const Tensor& chw) const {
  Tensor out = chw;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const double m = norm.mean.empty() ? 0.0 : norm.mean[c];
    const double s = norm.std.empty() ? 1.0 : norm.std[c];
    for (std::size_t i = 0; i < plane; ++i) {
      Real& v = out[c * plane + i];
      v = static_cast<Real>(std::clamp(v * s + m, 0.0, 1.0));
    }
  }
  return out;
}

std::string Dataset::fingerprint() const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  const int dims[] = {size(), channels, height, width, num_classes};
  EVP_DigestUpdate(ctx, dims, sizeof(dims));
  EVP_DigestUpdate(ctx, images.data(), images.size() * sizeof(float));
  EVP_DigestUpdate(ctx, labels.data(), labels.size() * sizeof(int));
  EVP_DigestUpdate(ctx, tags.data(), tags.size());
  EVP_DigestUpdate(ctx, prune_subset.data(), prune_subset.size() * sizeof(int));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

void Dataset::validate() const {
  if (images.size() != image_numel() * labels.size()) {
    throw ShapeMismatch("dataset image buffer does not match the sample count");
  }
  if (tags.size() != labels.size()) throw ShapeMismatch("dataset split tags missing");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw InvalidParameter("label out of range");
  }
  if (!boxes.empty() && boxes.size() != labels.size()) {
    throw ShapeMismatch("synthetic metadata must cover every sample");
  }
  for (const PatchBox& b : boxes) {
    if (b.size <= 0 || b.top < 0 || b.left < 0 || b.top + b.size > height ||
        b.left + b.size > width) {
      throw InvalidParameter("patch box outside the image");
    }
  }
  for (int id : prune_subset) {
    if (id < 0 || id >= size() || tags[id] != SplitTag::train) {
      throw InvalidParameter("prune subset must be drawn from the train split");
    }
  }
}

void read_cifar_file(const fs::path& file, std::vector<float>& pixels, std::vector<int>& labels) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open CIFAR-10 file " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw IoError("corrupt CIFAR-10 file " + file.string() + ": " + std::to_string(bytes.size()) +
                  " bytes is not a multiple of the " + std::to_string(kCifarRecordBytes) +
                  "-byte record");
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw IoError("corrupt CIFAR-10 file " + file.string() + ": label " +
                    std::to_string(rec[0]) + " in record " + std::to_string(r));
    }
    labels.push_back(rec[0]);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i) pixels.push_back(rec[i] / 255.0f);
  }
}

Dataset load_cifar10(const fs::path& root, std::uint64_t seed) {
  fs::path dir = root;
  if (!fs::exists(dir / "data_batch_1.bin") && fs::exists(dir / "cifar-10-batches-bin")) {
    dir /= "cifar-10-batches-bin";
  }
  Dataset d;
  d.source = "cifar10";
  d.seed = seed;
  for (int i = 1; i <= 5; ++i) {
    const fs::path f = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (!fs::exists(f)) throw IoError("missing CIFAR-10 file " + f.string());
    read_cifar_file(f, d.images, d.labels);
  }
  const int n_train = d.size();
  const fs::path test = dir / "test_batch.bin";
  if (!fs::exists(test)) throw IoError("missing CIFAR-10 file " + test.string());
  read_cifar_file(test, d.images, d.labels);

  // Partition only the official training records; the test file keeps its tag.
  Dataset train_part;
  train_part.labels.assign(d.labels.begin(), d.labels.begin() + n_train);
  const double ratios[] = {0.9, 0.1};
  train_part.tags.assign(n_train, SplitTag::train);
  split(train_part, ratios, seed);
  d.tags = train_part.tags;
  d.tags.resize(d.labels.size(), SplitTag::test);
  draw_prune_subset(d, 0.05, n_train, seed);
  normalize_from_train(d);
  d.validate();
  return d;
}

std::vector<float> synthetic_pattern(int label) {
  if (label < 0 || label >= kSyntheticPatterns) {
    throw InvalidParameter("no synthetic pattern for class " + std::to_string(label));
  }
  // 4x4 grid of 2x2 cells, each cell one corner of the RGB cube. Cells are
  // drawn from a fixed stream per class; the first cell encodes the class
  // index so templates are pairwise distinct.
  Rng rng(0x5A11E4C7ULL + static_cast<std::uint64_t>(label));
  std::vector<float> out(3 * kPatchSize * kPatchSize);
  for (int cy = 0; cy < 4; ++cy) {
    for (int cx = 0; cx < 4; ++cx) {
      int corner = static_cast<int>(rng.below(8));
      if (cy == 0 && cx == 0) corner = label % 8;
      if (cy == 0 && cx == 1) corner = label / 8 == 0 ? 7 : 0;
      for (int c = 0; c < 3; ++c) {
        const float v = static_cast<float>((corner >> c) & 1);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            out[(c * kPatchSize + cy * 2 + dy) * kPatchSize + cx * 2 + dx] = v;
          }
        }
      }
    }
  }
  return out;
}

Dataset make_synthetic(int n, int num_classes, Rng& rng, int size) {
  if (num_classes < 1 || num_classes > kSyntheticPatterns) {
    throw InvalidParameter("synthetic data supports 1.." + std::to_string(kSyntheticPatterns) +
                           " classes");
  }
  if (n < 0 || size < kPatchSize) throw InvalidParameter("invalid synthetic dataset size");
  Dataset d;
  d.source = "synthetic";
  d.seed = rng.seed();
  d.height = d.width = size;
  d.num_classes = num_classes;
  d.images.resize(static_cast<std::size_t>(n) * d.image_numel());
  std::vector<std::vector<float>> patterns;
  for (int k = 0; k < num_classes; ++k) patterns.push_back(synthetic_pattern(k));
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < n; ++i) {
    float* img = d.images.data() + static_cast<std::size_t>(i) * d.image_numel();
    for (std::size_t j = 0; j < d.image_numel(); ++j) {
      img[j] = static_cast<float>(std::clamp(0.5 + 0.15 * rng.normal(), 0.0, 1.0));
    }
    const int label = static_cast<int>(rng.below(num_classes));
    PatchBox box{static_cast<int>(rng.below(size - kPatchSize + 1)),
                 static_cast<int>(rng.below(size - kPatchSize + 1)), kPatchSize};
    const auto& pat = patterns[label];
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < kPatchSize; ++y) {
        for (int x = 0; x < kPatchSize; ++x) {
          img[c * plane + static_cast<std::size_t>(box.top + y) * size + box.left + x] =
              pat[(c * kPatchSize + y) * kPatchSize + x];
        }
      }
    }
    d.labels.push_back(label);
    d.boxes.push_back(box);
  }
  d.tags.assign(n, SplitTag::train);
  return d;
}

int pattern_oracle(const std::vector<float>& raw_chw, int size, const PatchBox& box,
                   int num_classes) {
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  int best = -1;
  int best_count = -1;
  for (int k = 0; k < num_classes; ++k) {
    const auto pat = synthetic_pattern(k);
    int count = 0;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < box.size; ++y) {
        for (int x = 0; x < box.size; ++x) {
          const float v =
              raw_chw[c * plane + static_cast<std::size_t>(box.top + y) * size + box.left + x];
          if (std::abs(v - pat[(c * kPatchSize + y) * kPatchSize + x]) < 1e-3f) ++count;
        }
      }
    }
    if (count > best_count) {
      best_count = count;
      best = k;
    }
  }
  return best;
}

void split(Dataset& data, std::span<const double> ratios, std::uint64_t seed) {
  if (ratios.empty() || ratios.size() > 3) throw InvalidParameter("split needs 1 to 3 ratios");
  double total = 0;
  for (double r : ratios) {
    if (!(r >= 0) || r > 1) throw InvalidParameter("split ratios must lie in [0, 1]");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidParameter("split ratios must sum to 1");
  const int n = data.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).substream(0x5911);
  for (int i = n - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }
  std::vector<int> sizes;
  int assigned = 0;
  for (double r : ratios) {
    // Small epsilon so that 0.9 * 100 lands on 90 rather than 89.
    sizes.push_back(static_cast<int>(std::floor(r * n + 1e-9)));
    assigned += sizes.back();
  }
  sizes[0] += n - assigned;
  data.tags.assign(n, SplitTag::train);
  int pos = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    for (int k = 0; k < sizes[s]; ++k) data.tags[order[pos++]] = static_cast<SplitTag>(s);
  }
  data.prune_subset.clear();
}

void draw_prune_subset(Dataset& data, double fraction, int n_total, std::uint64_t seed) {
  if (fraction < 0 || fraction > 1) throw InvalidParameter("prune fraction must lie in [0, 1]");
  std::vector<int> pool = data.indices(SplitTag::train);
  const int want = static_cast<int>(std::lround(fraction * n_total));
  if (want > static_cast<int>(pool.size())) {
    throw InvalidParameter("prune subset larger than the train split");
  }
  Rng rng = Rng(seed).substream(0x9A0E);
  for (int i = 0; i < want; ++i) {
    const int j = i + static_cast<int>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(want);
  std::sort(pool.begin(), pool.end());
  data.prune_subset = std::move(pool);
}

void normalize_from_train(Dataset& data) {
  const auto train = data.indices(SplitTag::train);
  if (train.empty()) throw InvalidParameter("cannot normalize without training samples");
  const std::size_t plane = static_cast<std::size_t>(data.height) * data.width;
  data.norm.mean.assign(data.channels, 0.0);
  data.norm.std.assign(data.channels, 0.0);
  for (int c = 0; c < data.channels; ++c) {
    double sum = 0, sq = 0;
    for (int id : train) {
      const float* p = data.images.data() + id * data.image_numel() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double count = static_cast<double>(train.size() * plane);
    const double mean = sum / count;
    data.norm.mean[c] = mean;
    data.norm.std[c] = std::sqrt(std::max(sq / count - mean * mean, 1e-12));
  }
  for (int id = 0; id < data.size(); ++id) {
    for (int c = 0; c < data.channels; ++c) {
      float* p = data.images.data() + id * data.image_numel() + c * plane;
      const double m = data.norm.mean[c], s = data.norm.std[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>((p[i] - m) / s);
    }
  }
}

Dataset synthetic_benchmark(int n, int num_classes, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d = make_synthetic(n, num_classes, rng);
  const double ratios[] = {0.8, 0.1, 0.1};
  split(d, ratios, seed);
  draw_prune_subset(d, 0.05, n, seed);
  normalize_from_train(d);
  d.validate();
  return d;
}

}  // namespace saliprune
