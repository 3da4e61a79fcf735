#pragma once

// Frozen vision transformer feature extractor.
//
// Parameter names and layouts follow the common timm ViT checkpoint layout
// (weights stored [out x in]), so pre-trained ViT-B/16 safetensors files load
// directly. A `toy` profile with random frozen weights is used for tests.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "siblurry/autodiff.hpp"
#include "siblurry/datasets.hpp"
#include "siblurry/types.hpp"

namespace siblurry {

struct BackboneSpec {
  std::string profile = "toy";
  int depth = 2;
  int embed_dim = 64;
  int num_heads = 4;
  int mlp_dim = 256;
  /// Patch edge length. Inputs with height 1 use 1 x patch_size patches.
  int patch_size = 8;
  InputShape input{1, 1, 64};
  std::vector<int> prompt_layers{1};
  int prompt_length = 8;
  /// Optional safetensors file with pre-trained weights.
  std::string pretrained;
  /// Per-channel normalization applied after resizing.
  std::vector<double> mean{0.0};
  std::vector<double> std{1.0};
  double ln_eps = 1e-6;

  /// Depth 2, random frozen weights, vector inputs of length input_dim.
  static BackboneSpec toy(int input_dim = 64, int embed_dim = 64, int num_heads = 4);
  /// ViT-B/16 at 224x224 with prompts in layers 0..4.
  static BackboneSpec full();

  int patch_height() const { return input.height == 1 ? 1 : patch_size; }
  Index patch_dim() const { return static_cast<Index>(input.channels) * patch_height() * patch_size; }
  Index num_patches() const;
  /// Class token plus patches.
  Index num_tokens() const { return num_patches() + 1; }
  /// Rows of one prompt entry: prompt_layers.size() * prompt_length.
  Index prompt_rows() const { return static_cast<Index>(prompt_layers.size()) * prompt_length; }
  bool prompting() const { return !prompt_layers.empty() && prompt_length > 0; }

  void validate() const;
};

struct BlockParams {
  Matrix norm1_w, norm1_b;
  Matrix qkv_w, qkv_b;
  Matrix proj_w, proj_b;
  Matrix norm2_w, norm2_b;
  Matrix fc1_w, fc1_b;
  Matrix fc2_w, fc2_b;
};

struct BackboneParams {
  Matrix patch_w;  // [D x patch_dim]
  Matrix patch_b;  // [1 x D]
  Matrix cls;      // [1 x D]
  Matrix pos;      // [tokens x D]
  std::vector<BlockParams> blocks;
  Matrix norm_w, norm_b;
};

class Backbone {
 public:
  static Backbone random(const BackboneSpec& spec, std::uint64_t seed);
  static Backbone from_checkpoint(const BackboneSpec& spec, const std::filesystem::path& path);
  /// `spec.pretrained` when set, otherwise random weights from `seed`.
  static Backbone create(const BackboneSpec& spec, std::uint64_t seed);

  const BackboneSpec& spec() const noexcept { return spec_; }
  const BackboneParams& params() const noexcept { return params_; }
  Index embed_dim() const noexcept { return spec_.embed_dim; }

  /// Resizes raw rows of shape `raw` to the backbone resolution and applies
  /// the per-channel normalization.
  Matrix preprocess(const Matrix& raw, const InputShape& raw_shape) const;

  /// Class-token features of the prompt-free pass, one row per input.
  Matrix extract_query(const Matrix& x) const;

  /// Deep-prompted forward pass recorded on `tape`.
  ///
  /// Sample b uses prompt entry prompts[selection[b]], a Var of shape
  /// [prompt_rows x D] whose rows are grouped by prompt layer. With an empty
  /// `prompts` span the pass is prompt-free.
  ad::Var forward(ad::Tape& tape, const Matrix& x, std::span<const ad::Var> prompts,
                  std::span<const int> selection) const;

  /// FNV-1a over every parameter value.
  std::uint64_t parameter_hash() const;

  void save(const std::filesystem::path& path) const;

 private:
  Backbone(BackboneSpec spec, BackboneParams params);
  Matrix embed(const Matrix& x) const;

  BackboneSpec spec_;
  BackboneParams params_;
};

/// Plain product h * W; W is [D x num_classes].
Matrix classify(const Matrix& h, const Matrix& w);

}  // namespace siblurry
