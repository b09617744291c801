#include "ren/checkpoint.hpp"

#include <map>
#include <set>

#include "ren/errors.hpp"
#include "ren/io.hpp"

namespace ren {

namespace {
constexpr std::uint32_t kVersion = 1;
}

std::vector<std::uint8_t> encode_checkpoint(const RenConfig& config, const RenParams<float>& params) {
  params.check_shapes(config);
  ByteWriter w;
  w.magic("RENC");
  w.u32(kVersion);
  for (std::uint32_t v : {config.d_model, config.n_blocks, config.n_heads, config.encoder_dim, config.ffn_mult}) w.u32(v);
  std::uint32_t count = 0;
  params.for_each([&](const std::string&, const MatrixF&, bool) { ++count; });
  w.u32(count);
  params.for_each([&](const std::string& name, const MatrixF& m, bool) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    w.f32s(m.data(), static_cast<std::size_t>(m.size()));
  });
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("RENC");
  if (r.u32() != kVersion) throw FormatError("unsupported checkpoint version");
  Checkpoint ck;
  ck.config.d_model = r.u32();
  ck.config.n_blocks = r.u32();
  ck.config.n_heads = r.u32();
  ck.config.encoder_dim = r.u32();
  ck.config.ffn_mult = r.u32();
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.params = init_params(0, ck.config);
  std::map<std::string, MatrixF*> slots;
  ck.params.for_each([&](const std::string& name, MatrixF& m, bool) { slots[name] = &m; });

  const std::uint32_t count = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str();
    const auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unknown tensor '" + name + "' in checkpoint");
    if (!seen.insert(name).second) throw FormatError("duplicate tensor '" + name + "' in checkpoint");
    const std::uint32_t rows = r.u32(), cols = r.u32();
    MatrixF& dst = *it->second;
    if (rows != dst.rows() || cols != dst.cols()) throw FormatError("tensor '" + name + "' has the wrong shape");
    r.f32s(dst.data(), static_cast<std::size_t>(dst.size()));
  }
  if (seen.size() != slots.size()) throw FormatError("checkpoint is missing tensors");
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

void write_checkpoint(const std::string& path, const RenConfig& config, const RenParams<float>& params) {
  write_bytes(path, encode_checkpoint(config, params));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_bytes(path)); }

}  // namespace ren
