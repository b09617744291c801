#include "ren/io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ren {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void ByteWriter::u32(std::uint32_t v) {
  std::uint8_t b[4];
  std::memcpy(b, &v, 4);
  bytes_.insert(bytes_.end(), b, b + 4);
}

void ByteWriter::f32(float v) {
  std::uint8_t b[4];
  std::memcpy(b, &v, 4);
  bytes_.insert(bytes_.end(), b, b + 4);
}

void ByteWriter::f32s(const float* data, std::size_t n) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(data);
  bytes_.insert(bytes_.end(), p, p + n * 4);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) throw FormatError("truncated input: need " + std::to_string(n) + " bytes, have " + std::to_string(remaining()));
}

bool ByteReader::peek_magic(const char (&tag)[5]) const {
  return remaining() >= 4 && std::memcmp(bytes_.data() + pos_, tag, 4) == 0;
}

void ByteReader::expect_magic(const char (&tag)[5]) {
  need(4);
  if (!peek_magic(tag)) throw FormatError(std::string("bad magic, expected ") + tag);
  pos_ += 4;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

float ByteReader::f32() {
  need(4);
  float v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

void ByteReader::f32s(float* out, std::size_t n) {
  if (n > remaining() / 4) throw FormatError("truncated f32 payload");
  std::memcpy(out, bytes_.data() + pos_, n * 4);
  pos_ += n * 4;
  for (std::size_t i = 0; i < n; ++i)
    if (std::isnan(out[i])) throw ValidationError("NaN in payload at element " + std::to_string(i));
}

std::string ByteReader::str() {
  const std::uint32_t len = u32();
  need(len);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
  pos_ += len;
  return s;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---- RFT ----

std::vector<std::uint8_t> encode_rft(const PatchFeatureMap& map, const PoolingHead* head) {
  map.validate();
  ByteWriter w;
  w.magic("RFT1");
  for (std::uint32_t v : {map.h_patches, map.w_patches, map.dim, map.image_h, map.image_w, map.patch_size}) w.u32(v);
  w.f32s(map.data.data(), static_cast<std::size_t>(map.data.size()));
  if (head != nullptr) {
    head->validate();
    w.magic("PHD1");
    w.u32(static_cast<std::uint32_t>(head->dim()));
    w.u32(head->n_heads);
    w.f32s(head->query.data(), head->dim());
    for (const MatrixF* m : {&head->w_q, &head->w_k, &head->w_v, &head->w_o})
      w.f32s(m->data(), static_cast<std::size_t>(m->size()));
  }
  return w.take();
}

RftFile decode_rft(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("RFT1");
  RftFile file;
  auto& m = file.map;
  m.h_patches = r.u32();
  m.w_patches = r.u32();
  m.dim = r.u32();
  m.image_h = r.u32();
  m.image_w = r.u32();
  m.patch_size = r.u32();
  const std::uint64_t count = std::uint64_t{m.h_patches} * m.w_patches * m.dim;
  if (count == 0) throw ValidationError("zero-sized feature map header");
  if (count > r.remaining() / 4) throw FormatError("truncated RFT payload");
  m.data.resize(static_cast<Eigen::Index>(m.patch_count()), m.dim);
  r.f32s(m.data.data(), count);
  m.validate();
  if (!r.at_end()) {
    if (!r.peek_magic("PHD1")) throw FormatError("unexpected trailing bytes after RFT payload");
    r.expect_magic("PHD1");
    PoolingHead head;
    const std::uint32_t d = r.u32();
    head.n_heads = r.u32();
    head.query.resize(d);
    r.f32s(head.query.data(), d);
    for (MatrixF* w : {&head.w_q, &head.w_k, &head.w_v, &head.w_o}) {
      w->resize(d, d);
      r.f32s(w->data(), std::size_t{d} * d);
    }
    if (!r.at_end()) throw FormatError("unexpected trailing bytes after pooling head");
    head.validate();
    file.pooling_head = std::move(head);
  }
  return file;
}

void write_rft(const std::filesystem::path& path, const PatchFeatureMap& map, const PoolingHead* head) {
  write_bytes(path, encode_rft(map, head));
}

RftFile read_rft(const std::filesystem::path& path) { return decode_rft(read_bytes(path)); }

// ---- RTOK ----

std::vector<std::uint8_t> encode_rtok(const TokenSet& tokens) {
  tokens.validate();
  ByteWriter w;
  w.magic("RTOK");
  w.u32(static_cast<std::uint32_t>(tokens.size()));
  w.u32(static_cast<std::uint32_t>(tokens.ren_tokens.cols()));
  w.u32(static_cast<std::uint32_t>(tokens.aligned_tokens.cols()));
  w.f32s(tokens.ren_tokens.data(), static_cast<std::size_t>(tokens.ren_tokens.size()));
  w.f32s(tokens.aligned_tokens.data(), static_cast<std::size_t>(tokens.aligned_tokens.size()));
  w.magic("PRM1");
  for (const auto& p : tokens.prompts) {
    w.f32(p.x);
    w.f32(p.y);
  }
  w.str(tokens.source_id);
  return w.take();
}

TokenSet decode_rtok(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("RTOK");
  const std::uint32_t n = r.u32();
  const std::uint32_t d_model = r.u32();
  const std::uint32_t dim = r.u32();
  TokenSet t;
  t.ren_tokens.resize(n, d_model);
  t.aligned_tokens.resize(n, dim);
  r.f32s(t.ren_tokens.data(), std::size_t{n} * d_model);
  r.f32s(t.aligned_tokens.data(), std::size_t{n} * dim);
  t.prompts.resize(n);
  if (!r.at_end()) {
    r.expect_magic("PRM1");
    for (auto& p : t.prompts) {
      p.x = r.f32();
      p.y = r.f32();
    }
    t.source_id = r.str();
    if (!r.at_end()) throw FormatError("unexpected trailing bytes after RTOK prompt block");
  }
  t.validate();
  return t;
}

void write_rtok(const std::filesystem::path& path, const TokenSet& tokens) { write_bytes(path, encode_rtok(tokens)); }

TokenSet read_rtok(const std::filesystem::path& path) { return decode_rtok(read_bytes(path)); }

// ---- masks ----

nlohmann::json mask_to_json(const RegionMask& mask) {
  return {{"width", mask.width()}, {"height", mask.height()}, {"counts", mask.to_runs()}};
}

RegionMask mask_from_json(const nlohmann::json& j) {
  try {
    return RegionMask::from_runs(j.at("width").get<int>(), j.at("height").get<int>(),
                                 j.at("counts").get<std::vector<std::uint32_t>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mask JSON: ") + e.what());
  }
}

nlohmann::json masks_to_json(const std::vector<RegionMask>& masks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : masks) arr.push_back(mask_to_json(m));
  return {{"masks", arr}};
}

std::vector<RegionMask> masks_from_json(const nlohmann::json& j) {
  if (!j.contains("masks") || !j["masks"].is_array()) throw FormatError("mask list JSON needs a \"masks\" array");
  std::vector<RegionMask> out;
  for (const auto& m : j["masks"]) out.push_back(mask_from_json(m));
  return out;
}

}  // namespace ren

// ---- PPM ----

namespace ren {

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    long v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && v < 1'000'000) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError("PPM header: expected a number");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6)");
  pos = 2;
  RgbImage img;
  img.width = static_cast<int>(number());
  img.height = static_cast<int>(number());
  const long maxval = number();
  if (img.width < 1 || img.height < 1) throw FormatError("PPM has an empty image");
  if (maxval != 255) throw FormatError("PPM maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM header not terminated");
  ++pos;
  const std::size_t n = std::size_t(img.width) * img.height * 3;
  if (bytes.size() - pos < n) throw FormatError("PPM pixel data truncated");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data.begin(), image.data.end());
  return out;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_bytes(path, encode_ppm(image)); }

}  // namespace ren
