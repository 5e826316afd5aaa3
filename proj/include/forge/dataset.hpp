#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

/// Per-channel affine normalization applied after scaling bytes to [0, 1].
struct Normalization {
  std::vector<float> mean{0.1307f};
  std::vector<float> stddev{0.3081f};

  static Normalization mnist() { return {}; }
  static Normalization cifar10() {
    return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  }
};

struct Dataset {
  Tensor images;  // [N, C, H, W], or [N, features] for vector inputs
  std::vector<int> labels;
  std::size_t classes = 10;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  /// Gathers the given rows into a batch of shape [rows.size(), sample_shape()...].
  Tensor gather_images(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;

  /// Contiguous slice [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;

  /// Throws InputError when labels and images disagree or a label is out of range.
  void validate() const;
};

/// Parses a pair of IDX files (images magic 0x00000803, labels 0x00000801).
Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                       const Normalization& norm = Normalization::mnist(), std::string split = "");

/// Same as load_mnist_idx but from in-memory file contents.
Dataset parse_mnist_idx(std::span<const unsigned char> images, std::span<const unsigned char> labels,
                        const Normalization& norm = Normalization::mnist(), std::string split = "");

/// CIFAR-10 binary batches: records of <1 label byte><3072 pixel bytes>.
Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& batch_files,
                         const Normalization& norm = Normalization::cifar10(), std::string split = "");

struct MnistFiles {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  static MnistFiles in_directory(const std::filesystem::path& dir);
};

}  // namespace forge
