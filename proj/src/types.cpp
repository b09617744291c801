#include "ren/types.hpp"

#include <numeric>

namespace ren {

void PatchFeatureMap::validate() const {
  if (h_patches < 1 || w_patches < 1 || dim < 1 || image_h < 1 || image_w < 1 || patch_size < 1)
    throw ValidationError("feature map dimensions must all be >= 1");
  if (image_h < h_patches || image_w < w_patches)
    throw ValidationError("image must be at least as large as the patch grid");
  if (static_cast<std::size_t>(data.rows()) != patch_count() || static_cast<std::size_t>(data.cols()) != dim)
    throw ValidationError("feature payload shape does not match header");
  if (!data.allFinite()) throw ValidationError("feature payload contains non-finite values");
}

RegionMask RegionMask::from_runs(int width, int height, const std::vector<std::uint32_t>& runs) {
  if (width < 1 || height < 1) throw ValidationError("mask dimensions must be >= 1");
  RegionMask mask(width, height);
  const std::size_t total = std::size_t(width) * height;
  std::size_t pos = 0;
  bool value = false;
  for (std::uint32_t run : runs) {
    if (pos + run > total) throw ValidationError("mask runs exceed width*height");
    if (value) std::fill_n(mask.bits_.begin() + static_cast<std::ptrdiff_t>(pos), run, std::uint8_t{1});
    pos += run;
    value = !value;
  }
  if (pos != total) throw ValidationError("mask runs do not sum to width*height");
  return mask;
}

std::vector<std::uint32_t> RegionMask::to_runs() const {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t count = 0;
  for (std::uint8_t b : bits_) {
    if (b != current) {
      runs.push_back(count);
      count = 0;
      current = b;
    }
    ++count;
  }
  runs.push_back(count);
  return runs;
}

std::size_t RegionMask::area() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

void TokenSet::validate() const {
  const auto n = static_cast<Eigen::Index>(prompts.size());
  if (ren_tokens.rows() != n || aligned_tokens.rows() != n)
    throw ValidationError("token set rows disagree with prompt count");
  if (!ren_tokens.allFinite() || !aligned_tokens.allFinite())
    throw ValidationError("token set contains non-finite values");
  for (const auto& p : prompts)
    if (!p.valid()) throw ValidationError("prompt outside [0,1)^2");
}

void PoolingHead::validate() const {
  const auto d = query.size();
  if (d < 1 || n_heads < 1 || d % n_heads != 0) throw ValidationError("pooling head dim must be divisible by n_heads");
  for (const MatrixF* w : {&w_q, &w_k, &w_v, &w_o})
    if (w->rows() != d || w->cols() != d) throw ValidationError("pooling head projection must be dim x dim");
  if (!query.allFinite() || !w_q.allFinite() || !w_k.allFinite() || !w_v.allFinite() || !w_o.allFinite())
    throw ValidationError("pooling head contains non-finite values");
}

}  // namespace ren
