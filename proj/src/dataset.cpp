#include "forge/dataset.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace forge {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class BigEndianReader {
 public:
  BigEndianReader(std::span<const unsigned char> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = (std::uint32_t{bytes_[pos_]} << 24) | (std::uint32_t{bytes_[pos_ + 1]} << 16) |
                            (std::uint32_t{bytes_[pos_ + 2]} << 8) | std::uint32_t{bytes_[pos_ + 3]};
    pos_ += 4;
    return v;
  }

  std::span<const unsigned char> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " bytes, " + std::to_string(bytes_.size() - pos_) + " left)");
    }
  }

  std::span<const unsigned char> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void check_magic(std::uint32_t expected, std::uint32_t actual, const std::string& what) {
  if (expected != actual) {
    throw FormatError(what + ": bad magic at offset 0: expected " + hex32(expected) + ", got " + hex32(actual));
  }
}

float normalize(unsigned char px, const Normalization& norm, std::size_t channel) {
  return (static_cast<float>(px) / 255.0f - norm.mean[channel]) / norm.stddev[channel];
}

}  // namespace

Tensor Dataset::gather_images(std::span<const std::size_t> rows) const {
  const Shape sample = sample_shape();
  const std::size_t stride = shape_numel(sample);
  Shape shape{rows.size()};
  shape.insert(shape.end(), sample.begin(), sample.end());
  Tensor out(shape);
  const float* src = images.data().data();
  float* dst = out.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::memcpy(dst + i * stride, src + rows[i] * stride, stride * sizeof(float));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size() || count == 0) throw InputError("dataset slice out of range");
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = begin + i;
  return {gather_images(rows), gather_labels(rows), classes, split};
}

void Dataset::validate() const {
  if (images.rank() < 2) throw InputError("dataset images must be [N, ...], got " + to_string(images.shape()));
  if (images.dim(0) != labels.size()) {
    throw InputError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw InputError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

Dataset parse_mnist_idx(std::span<const unsigned char> images, std::span<const unsigned char> labels,
                        const Normalization& norm, std::string split) {
  BigEndianReader ir(images, "IDX images");
  check_magic(kImageMagic, ir.u32(), "IDX images");
  const std::uint32_t n = ir.u32(), rows = ir.u32(), cols = ir.u32();
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX images: zero dimension in header");
  // Guards the multiplication below against absurd headers.
  if (static_cast<std::uint64_t>(rows) * cols > (1u << 24)) throw FormatError("IDX images: image size too large");
  const std::size_t per = static_cast<std::size_t>(rows) * cols;
  if ((images.size() - ir.offset()) / per < n) {
    throw FormatError("IDX images: truncated at offset " + std::to_string(images.size()) + ", header declares " +
                      std::to_string(n) + " images");
  }
  auto pixels = ir.take(per * n);

  BigEndianReader lr(labels, "IDX labels");
  check_magic(kLabelMagic, lr.u32(), "IDX labels");
  const std::uint32_t nl = lr.u32();
  if (nl != n) {
    throw FormatError("IDX labels: count " + std::to_string(nl) + " does not match image count " + std::to_string(n));
  }
  auto label_bytes = lr.take(nl);

  if (norm.mean.empty() || norm.stddev.empty()) throw InputError("normalization needs one channel");
  Dataset ds;
  ds.split = std::move(split);
  ds.classes = 10;
  std::vector<float> data(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) data[i] = normalize(pixels[i], norm, 0);
  ds.images = Tensor({n, 1, rows, cols}, std::move(data));
  ds.labels.assign(label_bytes.begin(), label_bytes.end());
  ds.validate();
  return ds;
}

Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                       const Normalization& norm, std::string split) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  try {
    return parse_mnist_idx(images, labels, norm, std::move(split));
  } catch (const FormatError& e) {
    throw FormatError(images_path.filename().string() + "/" + labels_path.filename().string() + ": " + e.what());
  }
}

Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& batch_files, const Normalization& norm,
                         std::string split) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  if (norm.mean.size() != 3 || norm.stddev.size() != 3) throw InputError("CIFAR-10 normalization needs 3 channels");
  std::vector<float> data;
  std::vector<int> labels;
  for (const auto& path : batch_files) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(kRecord));
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      labels.push_back(bytes[off]);
      for (std::size_t i = 0; i < kPixels; ++i) data.push_back(normalize(bytes[off + 1 + i], norm, i / 1024));
    }
  }
  if (labels.empty()) throw InputError("no CIFAR-10 batch files given");
  Dataset ds;
  ds.split = std::move(split);
  ds.images = Tensor({labels.size(), 3, 32, 32}, std::move(data));
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

MnistFiles MnistFiles::in_directory(const std::filesystem::path& dir) {
  return {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", dir / "t10k-images-idx3-ubyte",
          dir / "t10k-labels-idx1-ubyte"};
}

}  // namespace forge
