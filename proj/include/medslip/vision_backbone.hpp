#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "medslip/autograd.hpp"
#include "medslip/params.hpp"

namespace medslip::vision {

inline constexpr int kMinImageSide = 32;

/// Pixels stored as (H*W) x C, pixel (y, x) at row y*W + x, values in [0, 1].
struct ImageTensor {
  ag::Mat pixels;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(pixels.cols()); }
  double at(int y, int x, int c = 0) const { return pixels(static_cast<Eigen::Index>(y) * width + x, c); }
  double& at(int y, int x, int c = 0) { return pixels(static_cast<Eigen::Index>(y) * width + x, c); }

  static ImageTensor zeros(int height, int width, int channels = 1);
};

/// Throws InputError unless H, W >= 32, C in {1, 3} and all pixels lie in [0, 1].
void validate(const ImageTensor& img);

ImageTensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageTensor& img);
/// Raw little-endian float32 HWC array with a JSON sidecar {"height","width","channels"}.
ImageTensor read_raw(const std::filesystem::path& path);
void write_raw(const std::filesystem::path& path, const ImageTensor& img);
/// Dispatches on extension: .png or raw otherwise.
ImageTensor read_image(const std::filesystem::path& path);

struct BackboneConfig {
  int in_channels = 1;
  /// One convolution + ReLU per entry.
  std::vector<int> channels{16, 32, 128};
  /// Per-stage stride, 1 or 2. A JSON config that sets channels without strides gets all 2s.
  std::vector<int> strides{2, 2, 2};
  /// Kernel of the stride-2 stages. 4 keeps token centers on the half-pixel grid used for
  /// upsampling; 3 is also accepted. Stride-1 stages always use 3.
  int kernel = 4;

  int stride() const;
  /// Token grid side for an input side: ceil(in / 2) per stride-2 stage.
  int output_size(int in) const;
  int stage_kernel(std::size_t stage) const;
  int out_channels() const { return channels.back(); }
  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

struct Backbone {
  BackboneConfig config;
  std::vector<ag::Var> weights;
  std::vector<ag::Var> biases;

  /// He-initialized weights, zero biases, registered as backbone.stage<k>.{weight,bias}.
  static Backbone create(const BackboneConfig& cfg, ParamStore& store, std::uint64_t seed);
  /// Rebind to parameters already present in `store`.
  static Backbone bind(const BackboneConfig& cfg, const ParamStore& store);
};

/// Differentiable feature map. `pyramid[k]` is the output of stage k.
struct FeatureMapVar {
  ag::Spatial tokens;
  int stride = 0;
  std::vector<ag::Spatial> pyramid;
};

struct FeatureMap {
  ag::Mat tokens;  // T x d_v, T = height * width
  int height = 0;
  int width = 0;
  int stride = 0;
  std::vector<ag::Mat> pyramid;
};

FeatureMapVar encode(const ImageTensor& img, const Backbone& backbone);
FeatureMap encode_image(const ImageTensor& img, const Backbone& backbone);

}  // namespace medslip::vision
