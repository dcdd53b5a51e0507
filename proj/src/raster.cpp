#include "detrbench/raster.hpp"

#include "detrbench/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <memory>

namespace detrbench {

std::uint16_t quantize_u16(double v) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 65536.0);
  return static_cast<std::uint16_t>(std::min(scaled, 65535.0));
}

double dequantize_u16(std::uint16_t q) { return (static_cast<double>(q) + 0.5) / 65536.0; }

Image snap_to_u16_grid(const Image& image) {
  Image out = image;
  for (double& v : out.data) v = dequantize_u16(quantize_u16(v));
  return out;
}

namespace {

// OpenCV stores BGR; images here are RGB.
cv::Mat to_cv(const Image& image, int depth) {
  cv::Mat m(image.height, image.width, CV_MAKETYPE(depth, 3));
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = image.at(y, x, c);
        if (depth == CV_16U)
          m.at<cv::Vec3w>(y, x)[2 - c] = quantize_u16(v);
        else
          m.at<cv::Vec3b>(y, x)[2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return m;
}

void write_or_throw(const std::filesystem::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m, {cv::IMWRITE_PNG_COMPRESSION, 3}))
    throw LoadError("failed to write image: " + path.string());
}

}  // namespace

void write_png16(const Image& image, const std::filesystem::path& path) { write_or_throw(path, to_cv(image, CV_16U)); }

void write_png8(const Image& image, const std::filesystem::path& path) { write_or_throw(path, to_cv(image, CV_8U)); }

Image read_png16(const std::filesystem::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw LoadError("cannot read image: " + path.string());
  if (m.type() != CV_16UC3) throw LoadError("expected 16-bit RGB raster: " + path.string());
  Image out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = dequantize_u16(m.at<cv::Vec3w>(y, x)[2 - c]);
  return out;
}

Image read_image_file(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_COLOR);
  if (m.empty()) throw LoadError("cannot read image: " + path.string());
  const double scale = m.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  cv::Mat f;
  m.convertTo(f, CV_64FC3, scale);
  Image out(f.rows, f.cols);
  for (int y = 0; y < f.rows; ++y)
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp(f.at<cv::Vec3d>(y, x)[2 - c], 0.0, 1.0);
  return out;
}

Image resize_image(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat src(image.height, image.width, CV_64FC3, const_cast<double*>(image.data.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_AREA);
  Image out(height, width);
  std::copy(dst.ptr<double>(), dst.ptr<double>() + out.size(), out.data.begin());
  for (double& v : out.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open for hashing: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace detrbench
