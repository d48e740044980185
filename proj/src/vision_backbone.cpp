#include "medslip/vision_backbone.hpp"

#include <algorithm>
#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "medslip/errors.hpp"

namespace medslip::vision {

ImageTensor ImageTensor::zeros(int height, int width, int channels) {
  ImageTensor img;
  img.height = height;
  img.width = width;
  img.pixels = ag::Mat::Zero(static_cast<Eigen::Index>(height) * width, channels);
  return img;
}

void validate(const ImageTensor& img) {
  if (img.height < kMinImageSide || img.width < kMinImageSide)
    throw InputError("image: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is below the minimum side of " + std::to_string(kMinImageSide));
  if (img.channels() != 1 && img.channels() != 3) throw InputError("image: channels must be 1 or 3");
  if (img.pixels.rows() != static_cast<Eigen::Index>(img.height) * img.width)
    throw InputError("image: pixel buffer does not match dimensions");
  if (!img.pixels.allFinite() || img.pixels.minCoeff() < 0.0 || img.pixels.maxCoeff() > 1.0)
    throw InputError("image: pixel values must be finite and within [0, 1]");
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageTensor read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("invalid PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int ch = png_get_channels(png, info);
  if (ch != 1 && ch != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("unsupported PNG channel count in " + path.string());
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * ch);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * ch;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  ImageTensor img = ImageTensor::zeros(h, w, ch);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels.data()[i] = buf[i] / 255.0;
  return img;
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path.string());
  }
  const int ch = img.channels();
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.pixels.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = std::clamp(img.pixels.data()[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = buf.data() + static_cast<std::size_t>(y) * img.width * ch;
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageTensor read_raw(const std::filesystem::path& path) {
  const auto sidecar = std::filesystem::path(path.string() + ".json");
  std::ifstream js(sidecar);
  if (!js) throw IoError("raw image: missing shape sidecar " + sidecar.string());
  nlohmann::json shape;
  try {
    shape = nlohmann::json::parse(js);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("raw image sidecar: " + std::string(e.what()));
  }
  const int h = shape.at("height").get<int>();
  const int w = shape.at("width").get<int>();
  const int c = shape.value("channels", 1);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open raw image: " + path.string());
  const std::size_t count = static_cast<std::size_t>(h) * w * c;
  std::vector<unsigned char> raw(4 * count);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw InputError("raw image: file shorter than declared shape");
  ImageTensor img = ImageTensor::zeros(h, w, c);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = raw.data() + 4 * i;
    const std::uint32_t u = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                            (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    img.pixels.data()[i] = f;
  }
  return img;
}

void write_raw(const std::filesystem::path& path, const ImageTensor& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write raw image: " + path.string());
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) {
    const float f = static_cast<float>(img.pixels.data()[i]);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    const char b[4] = {char(u & 0xff), char((u >> 8) & 0xff), char((u >> 16) & 0xff),
                       char((u >> 24) & 0xff)};
    out.write(b, 4);
  }
  std::ofstream js(path.string() + ".json");
  js << nlohmann::json{{"height", img.height}, {"width", img.width}, {"channels", img.channels()}}.dump()
     << '\n';
  if (!out || !js) throw IoError("write failed: " + path.string());
}

ImageTensor read_image(const std::filesystem::path& path) {
  return path.extension() == ".png" ? read_png(path) : read_raw(path);
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"in_channels", in_channels}, {"channels", channels}, {"strides", strides}, {"kernel", kernel}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("channels")) {
    c.channels = j["channels"].get<std::vector<int>>();
    c.strides.assign(c.channels.size(), 2);
  }
  if (j.contains("strides")) c.strides = j["strides"].get<std::vector<int>>();
  c.kernel = j.value("kernel", c.kernel);
  c.validate();
  return c;
}

void BackboneConfig::validate() const {
  if (channels.empty()) throw ConfigError("backbone: at least one stage is required");
  if (kernel != 3 && kernel != 4) throw ConfigError("backbone: kernel must be 3 or 4");
  if (in_channels != 1 && in_channels != 3) throw ConfigError("backbone: in_channels must be 1 or 3");
  for (int c : channels)
    if (c < 1) throw ConfigError("backbone: channel counts must be positive");
  if (strides.size() != channels.size())
    throw ConfigError("backbone: strides and channels must have the same length");
  for (int s : strides)
    if (s != 1 && s != 2) throw ConfigError("backbone: each stage stride must be 1 or 2");
}

int BackboneConfig::stride() const {
  int s = 1;
  for (int k : strides) s *= k;
  return s;
}

int BackboneConfig::output_size(int in) const {
  for (int k : strides)
    if (k == 2) in = (in + 1) / 2;
  return in;
}

int BackboneConfig::stage_kernel(std::size_t stage) const { return strides[stage] == 2 ? kernel : 3; }

Backbone Backbone::create(const BackboneConfig& cfg, ParamStore& store, std::uint64_t seed) {
  cfg.validate();
  Backbone b;
  b.config = cfg;
  int cin = cfg.in_channels;
  for (std::size_t k = 0; k < cfg.channels.size(); ++k) {
    const int cout = cfg.channels[k];
    Rng rng(derive_seed(seed, "backbone.stage", k));
    const int fan_in = cfg.stage_kernel(k) * cfg.stage_kernel(k) * cin;
    const auto prefix = "backbone.stage" + std::to_string(k);
    b.weights.push_back(store.add(prefix + ".weight",
                                  random_normal(fan_in, cout, std::sqrt(2.0 / fan_in), rng)));
    b.biases.push_back(store.add(prefix + ".bias", ag::Mat::Zero(1, cout)));
    cin = cout;
  }
  return b;
}

Backbone Backbone::bind(const BackboneConfig& cfg, const ParamStore& store) {
  Backbone b;
  b.config = cfg;
  for (std::size_t k = 0; k < cfg.channels.size(); ++k) {
    const auto prefix = "backbone.stage" + std::to_string(k);
    b.weights.push_back(store.get(prefix + ".weight"));
    b.biases.push_back(store.get(prefix + ".bias"));
  }
  return b;
}

namespace {

// Stride-2 convolution producing ceil(H/2) x ceil(W/2). With an even kernel and even sides,
// output token t is centered on input pixel 2t + 0.5, so after s stages token centers sit at
// s*t + (s-1)/2, the same convention the half-pixel bilinear upsampler assumes. Stride-1
// stages use a centered 3x3 window.
ag::Spatial stage_conv(const ag::Spatial& x, const ag::Var& w, const ag::Var& b, int kernel,
                       int stride) {
  if (stride == 1) return ag::conv2d(x, w, b, 3, 1, 1);
  const int oh = (x.height + 1) / 2, ow = (x.width + 1) / 2;
  if (kernel == 3) return ag::conv2d(x, w, b, 3, 2, 1);
  if (x.height % 2 == 0 && x.width % 2 == 0) return ag::conv2d(x, w, b, 4, 2, 1);
  return ag::crop(ag::conv2d(x, w, b, 4, 2, 2), oh, ow);
}

}  // namespace

FeatureMapVar encode(const ImageTensor& img, const Backbone& backbone) {
  validate(img);
  if (img.channels() != backbone.config.in_channels)
    throw ShapeError("encode: image has " + std::to_string(img.channels()) +
                     " channels, backbone expects " + std::to_string(backbone.config.in_channels));
  FeatureMapVar fm;
  ag::Spatial x{ag::constant(img.pixels), img.height, img.width};
  for (std::size_t k = 0; k < backbone.weights.size(); ++k) {
    x = stage_conv(x, backbone.weights[k], backbone.biases[k], backbone.config.kernel,
                   backbone.config.strides[k]);
    x.value = ag::relu(x.value);
    fm.pyramid.push_back(x);
  }
  fm.tokens = x;
  fm.stride = backbone.config.stride();
  return fm;
}

FeatureMap encode_image(const ImageTensor& img, const Backbone& backbone) {
  const auto v = encode(img, backbone);
  FeatureMap fm;
  fm.tokens = v.tokens.value.value();
  fm.height = v.tokens.height;
  fm.width = v.tokens.width;
  fm.stride = v.stride;
  for (const auto& p : v.pyramid) fm.pyramid.push_back(p.value.value());
  return fm;
}

}  // namespace medslip::vision
