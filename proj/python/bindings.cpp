#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ren/aggregation.hpp"
#include "ren/checkpoint.hpp"
#include "ren/errors.hpp"
#include "ren/eval.hpp"
#include "ren/extension.hpp"
#include "ren/io.hpp"
#include "ren/model.hpp"
#include "ren/prompting.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace ren;

namespace {

using Prompts = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::vector<PointPrompt> to_prompts(const Prompts& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw py::value_error("prompts must have shape (n, 2)");
  auto r = a.unchecked<2>();
  std::vector<PointPrompt> out;
  for (py::ssize_t i = 0; i < r.shape(0); ++i) out.push_back({r(i, 0), r(i, 1)});
  return out;
}

py::array_t<float> from_prompts(const std::vector<PointPrompt>& p) {
  py::array_t<float> a({py::ssize_t(p.size()), py::ssize_t(2)});
  auto w = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < p.size(); ++i) {
    w(py::ssize_t(i), 0) = p[i].x;
    w(py::ssize_t(i), 1) = p[i].y;
  }
  return a;
}

TokenSet make_tokens(const Prompts& prompts, const MatrixF& ren, const MatrixF& aligned, const std::string& source) {
  TokenSet t;
  t.prompts = to_prompts(prompts);
  t.ren_tokens = ren;
  t.aligned_tokens = aligned;
  t.source_id = source;
  t.validate();
  return t;
}

py::dict tokens_dict(const TokenSet& t) {
  return py::dict("prompts"_a = from_prompts(t.prompts), "ren"_a = t.ren_tokens, "aligned"_a = t.aligned_tokens,
                  "source_id"_a = t.source_id);
}

// Features as an (h, w, dim) float array plus the image size they describe.
PatchFeatureMap to_map(py::array_t<float, py::array::c_style | py::array::forcecast> f, std::uint32_t image_h,
                       std::uint32_t image_w) {
  if (f.ndim() != 3) throw py::value_error("features must have shape (h_patches, w_patches, dim)");
  PatchFeatureMap m;
  m.h_patches = std::uint32_t(f.shape(0));
  m.w_patches = std::uint32_t(f.shape(1));
  m.dim = std::uint32_t(f.shape(2));
  m.image_h = image_h ? image_h : m.h_patches;
  m.image_w = image_w ? image_w : m.w_patches;
  m.patch_size = m.image_h / std::max<std::uint32_t>(1, m.h_patches);
  m.data = Eigen::Map<const MatrixF>(f.data(), Eigen::Index(m.patch_count()), Eigen::Index(m.dim));
  m.validate();
  return m;
}

class Model {
 public:
  explicit Model(const std::string& path) : ck_(read_checkpoint(path)) {}

  py::dict tokenize(py::array_t<float, py::array::c_style | py::array::forcecast> features, const Prompts& prompts,
                    std::uint32_t image_h, std::uint32_t image_w) const {
    const auto map = to_map(features, image_h, image_w);
    const auto p = to_prompts(prompts);
    TokenSet t;
    {
      py::gil_scoped_release nogil;
      t = forward(map, p, ck_.params, ck_.config);
    }
    return tokens_dict(t);
  }

  py::dict config() const {
    const auto& c = ck_.config;
    return py::dict("d_model"_a = c.d_model, "n_blocks"_a = c.n_blocks, "n_heads"_a = c.n_heads,
                    "encoder_dim"_a = c.encoder_dim, "ffn_mult"_a = c.ffn_mult);
  }

  MatrixF align_proj() const { return ck_.params.align_proj; }

 private:
  Checkpoint ck_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Region tokenization engine: point-prompted region tokens over frozen patch features";

  py::register_exception<Error>(m, "RenError");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), "path"_a, "Load a RENC checkpoint.")
      .def("tokenize", &Model::tokenize, "features"_a, "prompts"_a, "image_h"_a = 0, "image_w"_a = 0,
           "Region tokens for (n, 2) normalized prompts over (h, w, dim) patch features.\n"
           "Returns a dict with prompts, ren and aligned arrays.")
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("align_proj", &Model::align_proj);

  m.def(
      "write_initial_checkpoint",
      [](const std::string& path, std::uint64_t seed, std::uint32_t d_model, std::uint32_t n_blocks,
         std::uint32_t n_heads, std::uint32_t encoder_dim) {
        RenConfig c;
        c.d_model = d_model;
        c.n_blocks = n_blocks;
        c.n_heads = n_heads;
        c.encoder_dim = encoder_dim;
        c.validate();
        write_checkpoint(path, c, init_params(seed, c));
      },
      "path"_a, "seed"_a = 0, "d_model"_a = 32, "n_blocks"_a = 4, "n_heads"_a = 8, "encoder_dim"_a = 32,
      "Write an untrained checkpoint (every block starts as the identity).");

  m.def("grid_prompts", [](int g) { return from_prompts(grid_prompts(g)); }, "g"_a,
        "G*G prompts at cell centers, row-major, shape (G*G, 2).");

  m.def(
      "slic",
      [](py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> rgb, int s, double compactness) {
        if (rgb.ndim() != 3 || rgb.shape(2) != 3) throw py::value_error("image must have shape (h, w, 3)");
        RgbImage img;
        img.height = int(rgb.shape(0));
        img.width = int(rgb.shape(1));
        img.data.assign(rgb.data(), rgb.data() + rgb.size());
        SuperpixelMap sp;
        {
          py::gil_scoped_release nogil;
          sp = slic_segment(img, s, {compactness, 10});
        }
        py::array_t<std::int32_t> labels({py::ssize_t(sp.height), py::ssize_t(sp.width)});
        std::copy(sp.labels.begin(), sp.labels.end(), labels.mutable_data());
        return py::make_tuple(labels, from_prompts(slic_prompts(sp)));
      },
      "image"_a, "s"_a, "compactness"_a = 256.0,
      "SLIC superpixels. Returns (labels (h, w) int32, one prompt per superpixel (count, 2)).");

  m.def(
      "aggregate",
      [](const Prompts& prompts, const MatrixF& ren, const MatrixF& aligned, double mu, std::optional<std::size_t> min_group) {
        const auto t = make_tokens(prompts, ren, aligned, "");
        const auto r = aggregate(t, mu, min_group);
        return py::dict("groups"_a = r.groups, "representatives"_a = r.representatives,
                        "discarded"_a = r.discarded, "ren"_a = r.pooled_ren, "aligned"_a = r.pooled_aligned,
                        "prompts"_a = from_prompts(r.representative_prompts), "min_group"_a = r.min_group);
      },
      "prompts"_a, "ren"_a, "aligned"_a, "mu"_a = kDefaultMu, "min_group"_a = py::none(),
      "Connected components of the cosine > mu graph over REN tokens, mean-pooled.");

  m.def(
      "token_count_curve",
      [](const MatrixF& ren, const std::vector<double>& mus) {
        TokenSet t;
        t.ren_tokens = ren;
        t.aligned_tokens = ren;
        t.prompts.assign(std::size_t(ren.rows()), PointPrompt{0.5f, 0.5f});
        return token_count_curve(t, mus);
      },
      "ren"_a, "mus"_a, "Component count per threshold, as (mu, count) pairs.");

  m.def("ari",
        [](const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) { return ari(a, b); },
        "predicted"_a, "truth"_a, "Adjusted Rand index.");

  m.def(
      "read_rft",
      [](const std::string& path) {
        const auto f = read_rft(path);
        const auto& map = f.map;
        py::array_t<float> a({py::ssize_t(map.h_patches), py::ssize_t(map.w_patches), py::ssize_t(map.dim)});
        std::copy(map.data.data(), map.data.data() + map.data.size(), a.mutable_data());
        return py::dict("features"_a = a, "image_h"_a = map.image_h, "image_w"_a = map.image_w,
                        "patch_size"_a = map.patch_size, "has_pooling_head"_a = f.pooling_head.has_value());
      },
      "path"_a, "Patch features of an RFT file as an (h, w, dim) array plus header fields.");

  m.def(
      "write_rft",
      [](const std::string& path, py::array_t<float, py::array::c_style | py::array::forcecast> features,
         std::uint32_t image_h, std::uint32_t image_w) {
        auto map = to_map(features, image_h, image_w);
        write_rft(path, map);
      },
      "path"_a, "features"_a, "image_h"_a, "image_w"_a, "Write (h, w, dim) features as RFT (patch_size = image_h / h).");

  m.def("read_rtok", [](const std::string& path) { return tokens_dict(read_rtok(path)); }, "path"_a);
  m.def(
      "write_rtok",
      [](const std::string& path, const Prompts& prompts, const MatrixF& ren, const MatrixF& aligned,
         const std::string& source_id) { write_rtok(path, make_tokens(prompts, ren, aligned, source_id)); },
      "path"_a, "prompts"_a, "ren"_a, "aligned"_a, "source_id"_a = "");
}
