#include "attn_distill/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace {

const std::vector<int> kPngParams{cv::IMWRITE_PNG_COMPRESSION, 6};

cv::Mat to_bgr_mat(const Rgb8& raster) {
  cv::Mat rgb(raster.height, raster.width, CV_8UC3, const_cast<std::uint8_t*>(raster.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

Image to_image(const Rgb8& raster) {
  Image image(raster.height, raster.width);
  std::transform(raster.pixels.begin(), raster.pixels.end(), image.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
  return image;
}

Rgb8 to_rgb8(const Image& image) {
  Rgb8 out{image.height, image.width, std::vector<std::uint8_t>(image.pixels.size())};
  std::transform(image.pixels.begin(), image.pixels.end(), out.pixels.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });
  return out;
}

Rgb8 read_rgb(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("cannot read raster: " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot decode raster: " + path.string());
  if (mat.depth() != CV_8U) throw FormatError("raster is not 8-bit: " + path.string());
  if (mat.channels() != 3) {
    throw FormatError("expected 3 channels, found " + std::to_string(mat.channels()) + ": " +
                      path.string());
  }
  cv::Mat rgb;
  cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
  Rgb8 out{rgb.rows, rgb.cols, {}};
  out.pixels.assign(rgb.data, rgb.data + rgb.total() * 3);
  return out;
}

Gray8 read_gray(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("cannot read mask: " + path.string());
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot decode mask: " + path.string());
  if (mat.depth() != CV_8U) throw FormatError("mask is not 8-bit: " + path.string());
  cv::Mat gray;
  if (mat.channels() == 1) {
    gray = mat;
  } else if (mat.channels() == 3 || mat.channels() == 4) {
    // Any nonzero channel marks the pixel; keep the maximum.
    std::vector<cv::Mat> planes;
    cv::split(mat, planes);
    gray = planes[0].clone();
    for (std::size_t i = 1; i < std::min<std::size_t>(planes.size(), 3); ++i) {
      cv::max(gray, planes[i], gray);
    }
  } else {
    throw FormatError("unsupported mask channel count: " + path.string());
  }
  if (!gray.isContinuous()) gray = gray.clone();
  Gray8 out{gray.rows, gray.cols, {}};
  out.pixels.assign(gray.data, gray.data + gray.total());
  return out;
}

void write_png(const std::filesystem::path& path, const Rgb8& raster) {
  if (!cv::imwrite(path.string(), to_bgr_mat(raster), kPngParams)) {
    throw IoError("cannot write image: " + path.string());
  }
}

void write_png(const std::filesystem::path& path, const Gray8& raster) {
  cv::Mat mat(raster.height, raster.width, CV_8UC1, const_cast<std::uint8_t*>(raster.pixels.data()));
  if (!cv::imwrite(path.string(), mat, kPngParams)) throw IoError("cannot write image: " + path.string());
}

std::vector<std::uint8_t> encode_png(const Rgb8& raster) {
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(".png", to_bgr_mat(raster), bytes, kPngParams)) {
    throw FormatError("png encoding failed");
  }
  return bytes;
}

void draw_text(Rgb8& raster, const std::string& text, int x, int y, double scale) {
  cv::Mat mat(raster.height, raster.width, CV_8UC3, raster.pixels.data());
  cv::putText(mat, text, cv::Point(x, y), cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(20, 20, 20), 1, cv::LINE_AA);
}

}  // namespace attn_distill
