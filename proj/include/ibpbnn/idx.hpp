#pragma once

// Reader for the IDX image/label files used by the MNIST family.
// Layout: big-endian u32 magic, big-endian u32 dimension sizes, then raw
// unsigned bytes. Images use magic 0x00000803 (N, rows, cols); labels use
// 0x00000801 (N).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibpbnn/tasks.hpp"

namespace ibpbnn {

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxDataset {
  Tensor images;  // N x rows x cols, bytes / 255
  std::vector<std::uint8_t> labels;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return labels.size(); }

  /// Flattened N x (rows*cols) features with labels 0..9.
  Dataset to_dataset(std::size_t num_classes = 10) const {
    Dataset ds{Tensor({size(), rows * cols}, images.values()), {}, num_classes};
    ds.y.assign(labels.begin(), labels.end());
    return ds;
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open IDX file '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IdxError(IdxError::Kind::truncated, "IDX header truncated in '" + path + "'");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void check_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%08x (expected 0x%08x)", got, want);
    throw IdxError(IdxError::Kind::bad_magic, "bad IDX magic number " + std::string(buf) + " in '" + path + "'");
  }
}

}  // namespace detail

inline IdxDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  detail::check_magic(detail::be32(img, 0, images_path), kIdxImageMagic, images_path);
  detail::check_magic(detail::be32(lab, 0, labels_path), kIdxLabelMagic, labels_path);

  const std::size_t n = detail::be32(img, 4, images_path);
  const std::size_t rows = detail::be32(img, 8, images_path);
  const std::size_t cols = detail::be32(img, 12, images_path);
  const std::size_t n_labels = detail::be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw IdxError(IdxError::Kind::count_mismatch, "IDX image count " + std::to_string(n) +
                                                       " does not match label count " + std::to_string(n_labels));
  }
  if (img.size() < 16 + n * rows * cols) {
    throw IdxError(IdxError::Kind::truncated, "IDX image payload truncated in '" + images_path + "'");
  }
  if (lab.size() < 8 + n) {
    throw IdxError(IdxError::Kind::truncated, "IDX label payload truncated in '" + labels_path + "'");
  }

  IdxDataset out;
  out.rows = rows;
  out.cols = cols;
  out.images = Tensor({n, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) out.images[i] = img[16 + i] / 255.0;
  out.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  return out;
}

}  // namespace ibpbnn
