#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ren/scene.hpp"
#include "ren/types.hpp"

namespace ren {

// RFT: "RFT1", u32 LE {h_patches, w_patches, dim, image_h, image_w, patch_size},
// f32 LE payload h*w*dim. An optional trailing pooling-head block follows:
// "PHD1", u32 {dim, n_heads}, f32 query[dim], w_q, w_k, w_v, w_o (dim*dim each).
struct RftFile {
  PatchFeatureMap map;
  std::optional<PoolingHead> pooling_head;
};

std::vector<std::uint8_t> encode_rft(const PatchFeatureMap& map, const PoolingHead* head = nullptr);
RftFile decode_rft(const std::vector<std::uint8_t>& bytes);
void write_rft(const std::filesystem::path& path, const PatchFeatureMap& map, const PoolingHead* head = nullptr);
RftFile read_rft(const std::filesystem::path& path);

// RTOK: "RTOK", u32 LE {n, d_model, D}, f32 ren[n*d_model], f32 aligned[n*D],
// then a trailing prompt block "PRM1", f32 (x, y)[n], u32 id length, id bytes.
std::vector<std::uint8_t> encode_rtok(const TokenSet& tokens);
TokenSet decode_rtok(const std::vector<std::uint8_t>& bytes);
void write_rtok(const std::filesystem::path& path, const TokenSet& tokens);
TokenSet read_rtok(const std::filesystem::path& path);

// Masks as {"width", "height", "counts"}: alternating run lengths, first run
// counts zeros (may be 0), row-major pixel order.
nlohmann::json mask_to_json(const RegionMask& mask);
RegionMask mask_from_json(const nlohmann::json& j);
nlohmann::json masks_to_json(const std::vector<RegionMask>& masks);
std::vector<RegionMask> masks_from_json(const nlohmann::json& j);

// Binary PPM (P6, maxval 255). Comment lines in the header are skipped.
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// Little-endian primitive codec shared by the binary formats.
class ByteWriter {
 public:
  void magic(const char (&tag)[5]) { bytes_.insert(bytes_.end(), tag, tag + 4); }
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(const float* data, std::size_t n);
  void str(const std::string& s);
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool peek_magic(const char (&tag)[5]) const;
  void expect_magic(const char (&tag)[5]);
  std::uint32_t u32();
  float f32();
  // Reads n floats; NaN is rejected with ValidationError.
  void f32s(float* out, std::size_t n);
  std::string str();

 private:
  void need(std::size_t n) const;
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace ren
