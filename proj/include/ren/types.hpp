#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ren/linalg.hpp"

namespace ren {

/// A point prompt in normalized image coordinates, 0 <= x, y < 1.
struct PointPrompt {
  float x = 0.0f;
  float y = 0.0f;

  bool valid() const { return x >= 0.0f && x < 1.0f && y >= 0.0f && y < 1.0f; }
  /// Pixel column/row containing the prompt on a width x height canvas.
  int pixel_x(int width) const { return std::min(width - 1, static_cast<int>(x * static_cast<float>(width))); }
  int pixel_y(int height) const { return std::min(height - 1, static_cast<int>(y * static_cast<float>(height))); }
  friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

/// Frozen encoder output: an h_patches x w_patches grid of dim-wide features
/// for an image_h x image_w image. Row p of `data` is patch p in row-major
/// grid order.
struct PatchFeatureMap {
  std::uint32_t h_patches = 0;
  std::uint32_t w_patches = 0;
  std::uint32_t dim = 0;
  std::uint32_t image_h = 0;
  std::uint32_t image_w = 0;
  std::uint32_t patch_size = 0;
  MatrixF data;  // (h_patches * w_patches) x dim

  std::size_t patch_count() const { return std::size_t{h_patches} * w_patches; }

  // Patch row/col containing pixel (x, y).
  std::uint32_t patch_row(int y) const {
    return static_cast<std::uint32_t>(std::uint64_t(y) * h_patches / image_h);
  }
  std::uint32_t patch_col(int x) const {
    return static_cast<std::uint32_t>(std::uint64_t(x) * w_patches / image_w);
  }
  std::size_t patch_of_pixel(int x, int y) const { return std::size_t{patch_row(y)} * w_patches + patch_col(x); }

  // Center pixel of patch cell (row, col).
  int center_y(std::uint32_t row) const { return static_cast<int>((2.0 * row + 1.0) * image_h / (2.0 * h_patches)); }
  int center_x(std::uint32_t col) const { return static_cast<int>((2.0 * col + 1.0) * image_w / (2.0 * w_patches)); }

  /// Throws ValidationError when any invariant is broken.
  void validate() const;
};

/// Boolean pixel coverage. Stored decoded; run-length form is the interchange
/// representation (alternating runs starting with a run of zeros).
class RegionMask {
 public:
  RegionMask() = default;
  RegionMask(int width, int height) : width_(width), height_(height), bits_(std::size_t(width) * height, 0) {}

  static RegionMask from_runs(int width, int height, const std::vector<std::uint32_t>& runs);
  std::vector<std::uint32_t> to_runs() const;

  int width() const { return width_; }
  int height() const { return height_; }
  bool at(int x, int y) const { return bits_[std::size_t(y) * width_ + x] != 0; }
  void set(int x, int y, bool v = true) { bits_[std::size_t(y) * width_ + x] = v ? 1 : 0; }
  std::size_t area() const;
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const RegionMask&, const RegionMask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Per-prompt output of the region encoder.
struct TokenSet {
  std::vector<PointPrompt> prompts;
  MatrixF ren_tokens;      // n x d_model
  MatrixF aligned_tokens;  // n x encoder_dim
  std::string source_id;

  std::size_t size() const { return prompts.size(); }
  void validate() const;
};

/// One attention layer of a target encoder used for global aggregation: a
/// query (CLS) state attending over patch features.
struct PoolingHead {
  RowVector<float> query;  // length D_t
  MatrixF w_q, w_k, w_v, w_o;  // D_t x D_t
  std::uint32_t n_heads = 1;

  std::size_t dim() const { return static_cast<std::size_t>(query.size()); }
  void validate() const;
};

}  // namespace ren
