#include "siblurry/backbone.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "siblurry/error.hpp"
#include "siblurry/rng.hpp"
#include "siblurry/safetensors.hpp"

namespace siblurry {

namespace {

Matrix gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

void hash_matrix(std::uint64_t& h, const Matrix& m) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
}

template <class F>
void for_each_param(const BackboneParams& p, F&& f) {
  f("patch_embed.proj.weight", p.patch_w);
  f("patch_embed.proj.bias", p.patch_b);
  f("cls_token", p.cls);
  f("pos_embed", p.pos);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    const std::string pre = fmt::format("blocks.{}.", i);
    f(pre + "norm1.weight", b.norm1_w);
    f(pre + "norm1.bias", b.norm1_b);
    f(pre + "attn.qkv.weight", b.qkv_w);
    f(pre + "attn.qkv.bias", b.qkv_b);
    f(pre + "attn.proj.weight", b.proj_w);
    f(pre + "attn.proj.bias", b.proj_b);
    f(pre + "norm2.weight", b.norm2_w);
    f(pre + "norm2.bias", b.norm2_b);
    f(pre + "mlp.fc1.weight", b.fc1_w);
    f(pre + "mlp.fc1.bias", b.fc1_b);
    f(pre + "mlp.fc2.weight", b.fc2_w);
    f(pre + "mlp.fc2.bias", b.fc2_b);
  }
  f("norm.weight", p.norm_w);
  f("norm.bias", p.norm_b);
}

template <class F>
void for_each_param(BackboneParams& p, F&& f) {
  for_each_param(static_cast<const BackboneParams&>(p),
                 [&](const std::string& name, const Matrix& m) { f(name, const_cast<Matrix&>(m)); });
}

/// Expected [rows x cols] of every named parameter.
std::pair<Index, Index> expected_shape(const BackboneSpec& s, const std::string& name) {
  const Index d = s.embed_dim;
  if (name == "patch_embed.proj.weight") return {d, s.patch_dim()};
  if (name == "pos_embed") return {s.num_tokens(), d};
  if (name.ends_with("qkv.weight")) return {3 * d, d};
  if (name.ends_with("qkv.bias")) return {1, 3 * d};
  if (name.ends_with("fc1.weight")) return {s.mlp_dim, d};
  if (name.ends_with("fc1.bias")) return {1, s.mlp_dim};
  if (name.ends_with("fc2.weight")) return {d, s.mlp_dim};
  if (name.ends_with("proj.weight")) return {d, d};
  return {1, d};
}

}  // namespace

BackboneSpec BackboneSpec::toy(int input_dim, int embed_dim, int num_heads) {
  BackboneSpec s;
  s.profile = "toy";
  s.depth = 2;
  s.embed_dim = embed_dim;
  s.num_heads = num_heads;
  s.mlp_dim = 4 * embed_dim;
  s.patch_size = 8;
  s.input = {1, 1, input_dim};
  s.prompt_layers = {1};
  s.prompt_length = 8;
  s.mean = {0.0};
  s.std = {1.0};
  return s;
}

BackboneSpec BackboneSpec::full() {
  BackboneSpec s;
  s.profile = "full";
  s.depth = 12;
  s.embed_dim = 768;
  s.num_heads = 12;
  s.mlp_dim = 3072;
  s.patch_size = 16;
  s.input = {3, 224, 224};
  s.prompt_layers = {0, 1, 2, 3, 4};
  s.prompt_length = 8;
  s.mean = {0.5, 0.5, 0.5};
  s.std = {0.5, 0.5, 0.5};
  return s;
}

Index BackboneSpec::num_patches() const {
  return static_cast<Index>(input.height / patch_height()) * (input.width / patch_size);
}

void BackboneSpec::validate() const {
  if (depth < 1 || embed_dim < 1 || num_heads < 1 || mlp_dim < 1 || patch_size < 1) {
    throw ConfigError("backbone: depth, embed_dim, num_heads, mlp_dim and patch_size must be positive");
  }
  if (embed_dim % num_heads != 0) throw ConfigError("backbone: embed_dim must be divisible by num_heads");
  if (input.width % patch_size != 0 || input.height % patch_height() != 0) {
    throw ConfigError("backbone: input resolution must be a multiple of the patch size");
  }
  for (int l : prompt_layers) {
    if (l < 0 || l >= depth) throw ConfigError(fmt::format("backbone: prompt layer {} outside [0, {})", l, depth));
  }
  if (std::adjacent_find(prompt_layers.begin(), prompt_layers.end(), std::greater_equal<>()) != prompt_layers.end()) {
    throw ConfigError("backbone: prompt_layers must be strictly increasing");
  }
  if (!prompt_layers.empty() && prompt_length < 1) throw ConfigError("backbone: prompt_length must be >= 1");
  if (mean.size() != static_cast<std::size_t>(input.channels) || std.size() != mean.size()) {
    throw ConfigError("backbone: mean/std need one entry per channel");
  }
  for (double s : std) {
    if (!(s > 0.0)) throw ConfigError("backbone: std entries must be positive");
  }
}

Backbone::Backbone(BackboneSpec spec, BackboneParams params) : spec_(std::move(spec)), params_(std::move(params)) {}

Backbone Backbone::random(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = Rng(seed).split("backbone");
  const Index d = spec.embed_dim;
  auto init = [&](Index out, Index in) { return gaussian(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng); };
  BackboneParams p;
  p.patch_w = init(d, spec.patch_dim());
  p.patch_b = Matrix::Zero(1, d);
  p.cls = gaussian(1, d, 0.02, rng);
  p.pos = gaussian(spec.num_tokens(), d, 0.02, rng);
  for (int i = 0; i < spec.depth; ++i) {
    BlockParams b;
    b.norm1_w = Matrix::Ones(1, d);
    b.norm1_b = Matrix::Zero(1, d);
    b.qkv_w = init(3 * d, d);
    b.qkv_b = Matrix::Zero(1, 3 * d);
    b.proj_w = init(d, d);
    b.proj_b = Matrix::Zero(1, d);
    b.norm2_w = Matrix::Ones(1, d);
    b.norm2_b = Matrix::Zero(1, d);
    b.fc1_w = init(spec.mlp_dim, d);
    b.fc1_b = Matrix::Zero(1, spec.mlp_dim);
    b.fc2_w = init(d, spec.mlp_dim);
    b.fc2_b = Matrix::Zero(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.norm_w = Matrix::Ones(1, d);
  p.norm_b = Matrix::Zero(1, d);
  return Backbone(spec, std::move(p));
}

Backbone Backbone::from_checkpoint(const BackboneSpec& spec, const std::filesystem::path& path) {
  spec.validate();
  const TensorFile file = read_safetensors(path);
  BackboneParams p;
  p.blocks.resize(static_cast<std::size_t>(spec.depth));
  for_each_param(p, [&](const std::string& name, Matrix& m) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw LoadError(fmt::format("checkpoint {} lacks tensor '{}'", path.string(), name));
    m = it->second.as_matrix();
    const auto [rows, cols] = expected_shape(spec, name);
    if (m.rows() != rows || m.cols() != cols) {
      throw LoadError(fmt::format("tensor '{}' has shape [{}x{}], expected [{}x{}]", name, m.rows(), m.cols(), rows, cols));
    }
  });
  return Backbone(spec, std::move(p));
}

Backbone Backbone::create(const BackboneSpec& spec, std::uint64_t seed) {
  return spec.pretrained.empty() ? random(spec, seed) : from_checkpoint(spec, spec.pretrained);
}

void Backbone::save(const std::filesystem::path& path) const {
  TensorFile file;
  for_each_param(params_, [&](const std::string& name, const Matrix& m) { file.tensors[name] = Tensor::from_matrix(m); });
  file.metadata["profile"] = spec_.profile;
  write_safetensors(path, file);
}

Matrix Backbone::preprocess(const Matrix& raw, const InputShape& raw_shape) const {
  if (raw.cols() != raw_shape.size()) {
    throw ContractError(fmt::format("preprocess: rows have {} values, shape expects {}", raw.cols(), raw_shape.size()));
  }
  const InputShape& out = spec_.input;
  if (raw_shape.channels != out.channels) {
    throw ContractError(fmt::format("preprocess: {} input channels, backbone expects {}", raw_shape.channels, out.channels));
  }
  Matrix result(raw.rows(), out.size());
  const Index plane_in = static_cast<Index>(raw_shape.height) * raw_shape.width;
  const Index plane_out = static_cast<Index>(out.height) * out.width;
  for (Index r = 0; r < raw.rows(); ++r) {
    for (int c = 0; c < out.channels; ++c) {
      std::vector<double> in_plane(static_cast<std::size_t>(plane_in));
      for (Index i = 0; i < plane_in; ++i) in_plane[static_cast<std::size_t>(i)] = raw(r, c * plane_in + i);
      std::vector<double> out_plane(static_cast<std::size_t>(plane_out));
      if (raw_shape == out) {
        out_plane = in_plane;
      } else {
        cv::Mat in_mat(raw_shape.height, raw_shape.width, CV_64F, in_plane.data());
        cv::Mat out_mat(out.height, out.width, CV_64F, out_plane.data());
        cv::resize(in_mat, out_mat, out_mat.size(), 0, 0, cv::INTER_LINEAR);
      }
      const double mean = spec_.mean[static_cast<std::size_t>(c)];
      const double stddev = spec_.std[static_cast<std::size_t>(c)];
      for (Index i = 0; i < plane_out; ++i) {
        result(r, c * plane_out + i) = (out_plane[static_cast<std::size_t>(i)] - mean) / stddev;
      }
    }
  }
  return result;
}

Matrix Backbone::embed(const Matrix& x) const {
  const Index b = x.rows();
  const Index t = spec_.num_tokens();
  const Index np = spec_.num_patches();
  const Index ph = spec_.patch_height();
  const Index s = spec_.patch_size;
  const Index h = spec_.input.height;
  const Index w = spec_.input.width;
  const Index per_row = w / s;
  Matrix patches(b * np, spec_.patch_dim());
  for (Index n = 0; n < b; ++n) {
    for (Index j = 0; j < np; ++j) {
      const Index py = j / per_row;
      const Index px = j % per_row;
      for (Index c = 0; c < spec_.input.channels; ++c) {
        for (Index ky = 0; ky < ph; ++ky) {
          for (Index kx = 0; kx < s; ++kx) {
            patches(n * np + j, (c * ph + ky) * s + kx) = x(n, c * h * w + (py * ph + ky) * w + px * s + kx);
          }
        }
      }
    }
  }
  const Matrix projected = (patches * params_.patch_w.transpose()).rowwise() + params_.patch_b.row(0);
  Matrix tokens(b * t, spec_.embed_dim);
  for (Index n = 0; n < b; ++n) {
    tokens.row(n * t) = params_.cls.row(0) + params_.pos.row(0);
    tokens.block(n * t + 1, 0, np, spec_.embed_dim) = projected.block(n * np, 0, np, spec_.embed_dim) +
                                                       params_.pos.bottomRows(np);
  }
  return tokens;
}

ad::Var Backbone::forward(ad::Tape& tape, const Matrix& x, std::span<const ad::Var> prompts,
                          std::span<const int> selection) const {
  if (x.cols() != spec_.input.size()) {
    throw ContractError(fmt::format("backbone: input width {} does not match expected {}", x.cols(), spec_.input.size()));
  }
  const Index batch = x.rows();
  const bool prompted = !prompts.empty() && spec_.prompting();
  std::vector<ad::Var> sources;
  std::vector<Index> offsets(static_cast<std::size_t>(batch), 0);
  if (prompted) {
    if (selection.size() != static_cast<std::size_t>(batch)) {
      throw ContractError("backbone: one prompt selection per sample is required");
    }
    for (const auto& p : prompts) {
      const Matrix& v = tape.value(p);
      if (v.rows() != spec_.prompt_rows() || v.cols() != spec_.embed_dim) {
        throw ContractError(fmt::format("backbone: prompt entry has shape [{}x{}], expected [{}x{}]", v.rows(),
                                        v.cols(), spec_.prompt_rows(), spec_.embed_dim));
      }
    }
    for (int s : selection) {
      if (s < 0 || static_cast<std::size_t>(s) >= prompts.size()) throw ContractError("backbone: selection out of range");
      sources.push_back(prompts[static_cast<std::size_t>(s)]);
    }
  }

  const Index t = spec_.num_tokens();
  const Index lp = spec_.prompt_length;
  ad::Var h = tape.constant(embed(x));
  Index tokens = t;
  for (int l = 0; l < spec_.depth; ++l) {
    const BlockParams& bp = params_.blocks[static_cast<std::size_t>(l)];
    const auto pos = std::find(spec_.prompt_layers.begin(), spec_.prompt_layers.end(), l);
    const bool here = prompted && pos != spec_.prompt_layers.end();
    if (here) {
      const Index layer_offset = (pos - spec_.prompt_layers.begin()) * lp;
      std::fill(offsets.begin(), offsets.end(), layer_offset);
      h = ad::prepend_blocks(h, sources, offsets, lp, batch, tokens);
      tokens += lp;
    }
    ad::Var a = ad::layer_norm(h, tape.ref(bp.norm1_w), tape.ref(bp.norm1_b), spec_.ln_eps);
    a = ad::linear(a, tape.ref(bp.qkv_w), tape.ref(bp.qkv_b));
    a = ad::self_attention(a, batch, tokens, spec_.num_heads);
    a = ad::linear(a, tape.ref(bp.proj_w), tape.ref(bp.proj_b));
    h = ad::add(h, a);
    ad::Var m = ad::layer_norm(h, tape.ref(bp.norm2_w), tape.ref(bp.norm2_b), spec_.ln_eps);
    m = ad::gelu(ad::linear(m, tape.ref(bp.fc1_w), tape.ref(bp.fc1_b)));
    m = ad::linear(m, tape.ref(bp.fc2_w), tape.ref(bp.fc2_b));
    h = ad::add(h, m);
    if (here) {
      h = ad::drop_leading_rows(h, batch, tokens, lp);
      tokens -= lp;
    }
  }
  std::vector<Index> cls_rows(static_cast<std::size_t>(batch));
  for (Index n = 0; n < batch; ++n) cls_rows[static_cast<std::size_t>(n)] = n * t;
  h = ad::select_rows(h, cls_rows);
  return ad::layer_norm(h, tape.ref(params_.norm_w), tape.ref(params_.norm_b), spec_.ln_eps);
}

Matrix Backbone::extract_query(const Matrix& x) const {
  ad::Tape tape(false);
  return tape.value(forward(tape, x, {}, {}));
}

std::uint64_t Backbone::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_param(params_, [&](const std::string&, const Matrix& m) { hash_matrix(h, m); });
  return h;
}

Matrix classify(const Matrix& h, const Matrix& w) {
  if (h.cols() != w.rows()) {
    throw ContractError(fmt::format("classify: features have width {}, head expects {}", h.cols(), w.rows()));
  }
  return h * w;
}

}  // namespace siblurry
