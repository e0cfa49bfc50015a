#include "dnln/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dnln {

namespace {

constexpr double kCubicA = -0.5;

void require_rgb(const char* op, const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) {
    throw std::invalid_argument(std::string(op) + ": expected a (3,H,W) image, got " + shape_str(t.shape()));
  }
}

void clamp01(std::vector<double>& v) {
  for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
}

struct Contribution {
  std::size_t anchor = 0;
  std::vector<std::size_t> index;
  std::vector<double> weight;  // normalised
};

std::vector<Contribution> contributions(std::size_t in_len, std::size_t out_len, double scale) {
  const bool shrink = scale < 1.0;
  const double width = shrink ? 4.0 / scale : 4.0;
  const auto taps = static_cast<std::size_t>(std::ceil(width)) + 2;
  const auto last = static_cast<std::ptrdiff_t>(in_len) - 1;
  std::vector<Contribution> out(out_len);
  for (std::size_t o = 0; o < out_len; ++o) {
    const double u = (static_cast<double>(o) + 0.5) / scale - 0.5;
    const auto left = static_cast<std::ptrdiff_t>(std::floor(u - width / 2.0));
    Contribution& c = out[o];
    double total = 0;
    for (std::size_t j = 0; j < taps; ++j) {
      const auto idx = left + static_cast<std::ptrdiff_t>(j);
      const double d = u - static_cast<double>(idx);
      const double w = shrink ? scale * cubic_weight(scale * d) : cubic_weight(d);
      if (w == 0.0) continue;
      c.index.push_back(static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, last)));
      c.weight.push_back(w);
      total += w;
    }
    for (auto& w : c.weight) w /= total;
    c.anchor = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(std::lround(u), 0, last));
  }
  return out;
}

// Anchored weighted sum: v_a + sum w_j (v_j - v_a). Equal to sum w_j v_j for
// normalised weights, and reproduces constant signals bit-exactly.
inline double resample(const Contribution& c, const double* src, std::size_t stride) {
  const double base = src[c.anchor * stride];
  double acc = 0;
  for (std::size_t j = 0; j < c.index.size(); ++j) acc += c.weight[j] * (src[c.index[j] * stride] - base);
  return base + acc;
}

}  // namespace

Frame make_frame(Tensor pixels) {
  require_rgb("frame", pixels);
  return Frame{std::move(pixels), ColorSpace::RGB};
}

void FrameSequence::validate(std::size_t scale) const {
  if (lr_frames.size() != 2 * radius + 1) {
    throw std::invalid_argument("sequence: expected " + std::to_string(2 * radius + 1) + " LR frames, got " +
                                std::to_string(lr_frames.size()));
  }
  const Shape& s = lr_frames[0].pixels.shape();
  for (const auto& f : lr_frames) {
    if (f.pixels.shape() != s) throw std::invalid_argument("sequence: LR frames differ in shape");
  }
  if (has_target()) {
    const Shape want{s[0], s[1] * scale, s[2] * scale};
    if (hr_target.pixels.shape() != want) {
      throw std::invalid_argument("sequence: HR target " + shape_str(hr_target.pixels.shape()) + " expected " +
                                  shape_str(want));
    }
  }
}

double cubic_weight(double x) {
  const double a = kCubicA;
  const double t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

Tensor cubic_resize_to(const Tensor& img, std::size_t out_h, std::size_t out_w, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("cubic_resize: scale must be positive");
  if (img.rank() != 3) throw std::invalid_argument("cubic_resize: expected (C,H,W), got " + shape_str(img.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("cubic_resize: empty output");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto rows = contributions(H, out_h, scale);
  const auto cols = contributions(W, out_w, scale);
  auto src = img.data();

  // rows first, then columns
  std::vector<double> tmp(C * out_h * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < W; ++x)
        tmp[(c * out_h + y) * W + x] = resample(rows[y], src.data() + c * H * W + x, W);
  clamp01(tmp);

  std::vector<double> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        out[(c * out_h + y) * out_w + x] = resample(cols[x], tmp.data() + (c * out_h + y) * W, 1);
  clamp01(out);
  return Tensor({C, out_h, out_w}, std::move(out));
}

Tensor cubic_resize(const Tensor& img, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("cubic_resize: scale must be positive");
  if (img.rank() != 3) throw std::invalid_argument("cubic_resize: expected (C,H,W), got " + shape_str(img.shape()));
  // tolerate representation error in scale (e.g. 0.25 * 180 == 45 exactly, 1/3 * 9 ~ 3)
  auto extent = [scale](std::size_t n) {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(n) * scale - 1e-9));
  };
  return cubic_resize_to(img, extent(img.dim(1)), extent(img.dim(2)), scale);
}

Frame cubic_resize(const Frame& img, double scale) { return Frame{cubic_resize(img.pixels, scale), img.color}; }

Tensor quantize_8bit(const Tensor& img) {
  std::vector<double> v(img.data().begin(), img.data().end());
  for (auto& x : v) x = std::round(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0;
  return Tensor(img.shape(), std::move(v));
}

Frame degrade(const Frame& hr, std::size_t scale) {
  if (scale == 0) throw std::invalid_argument("degrade: scale must be positive");
  if (hr.height() % scale != 0 || hr.width() % scale != 0) {
    throw std::invalid_argument("degrade: HR extents " + shape_str(hr.pixels.shape()) + " not divisible by " +
                                std::to_string(scale));
  }
  Tensor lr = cubic_resize_to(hr.pixels, hr.height() / scale, hr.width() / scale, 1.0 / static_cast<double>(scale));
  return Frame{quantize_8bit(lr), hr.color};
}

Tensor rgb_to_y(const Frame& img) {
  require_rgb("rgb_to_y", img.pixels);
  const std::size_t H = img.height(), W = img.width(), n = H * W;
  auto p = img.pixels.data();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = 16.0 + 65.481 * p[i] + 128.553 * p[n + i] + 24.966 * p[2 * n + i];
  return Tensor({1, H, W}, std::move(y));
}

Tensor hflip(const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  auto s = img.data();
  std::vector<double> out(s.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = s[(c * H + y) * W + (W - 1 - x)];
  return Tensor(img.shape(), std::move(out));
}

Tensor vflip(const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  auto s = img.data();
  std::vector<double> out(s.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(s.begin() + (c * H + (H - 1 - y)) * W, W, out.begin() + (c * H + y) * W);
  return Tensor(img.shape(), std::move(out));
}

Tensor rot90(const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  auto s = img.data();
  std::vector<double> out(s.size());
  // out has extents (W, H); out(i, j) = in(j, W-1-i)
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < W; ++i)
      for (std::size_t j = 0; j < H; ++j) out[(c * W + i) * H + j] = s[(c * H + j) * W + (W - 1 - i)];
  return Tensor({C, W, H}, std::move(out));
}

Tensor crop(const Tensor& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (w == 0 || h == 0 || x + w > W || y + h > H) {
    throw std::invalid_argument("crop: region (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                std::to_string(w) + "," + std::to_string(h) + ") outside " + shape_str(img.shape()));
  }
  auto s = img.data();
  std::vector<double> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(s.begin() + (c * H + y + r) * W + x, w, out.begin() + (c * h + r) * w);
  return Tensor({C, h, w}, std::move(out));
}

FrameSequence augment(const FrameSequence& seq, const AugmentOp& op) {
  if (seq.lr_frames.empty()) throw std::invalid_argument("augment: empty sequence");
  std::size_t scale = 1;
  if (seq.has_target()) {
    const auto& lr = seq.lr_frames[0];
    scale = seq.hr_target.width() / lr.width();
    if (scale == 0 || seq.hr_target.width() != lr.width() * scale || seq.hr_target.height() != lr.height() * scale) {
      throw std::invalid_argument("augment: HR target is not an integer multiple of the LR frames");
    }
  }
  auto apply = [&](const Tensor& t, std::size_t s) -> Tensor {
    return std::visit(
        [&](const auto& o) -> Tensor {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, HFlip>) return hflip(t);
          else if constexpr (std::is_same_v<T, VFlip>) return vflip(t);
          else if constexpr (std::is_same_v<T, Rot90>) return rot90(t);
          else return crop(t, o.x * s, o.y * s, o.w * s, o.h * s);
        },
        op);
  };
  FrameSequence out;
  out.radius = seq.radius;
  out.motion = seq.motion;
  for (const auto& f : seq.lr_frames) out.lr_frames.push_back(Frame{apply(f.pixels, 1), f.color});
  if (seq.has_target()) out.hr_target = Frame{apply(seq.hr_target.pixels, scale), seq.hr_target.color};
  // keep motion metadata in the transformed frame of reference
  for (auto& m : out.motion) {
    if (std::holds_alternative<HFlip>(op)) m.dx = -m.dx;
    else if (std::holds_alternative<VFlip>(op)) m.dy = -m.dy;
    else if (std::holds_alternative<Rot90>(op)) m = Motion{-m.dx, m.dy};
  }
  return out;
}

std::vector<FrameSequence> window_clip(const std::vector<Frame>& lr, const std::vector<Frame>& hr,
                                       std::size_t radius) {
  if (lr.empty()) throw std::invalid_argument("window_clip: empty clip");
  if (!hr.empty() && hr.size() != lr.size()) throw std::invalid_argument("window_clip: LR/HR frame counts differ");
  const auto last = static_cast<std::ptrdiff_t>(lr.size()) - 1;
  const auto n = static_cast<std::ptrdiff_t>(radius);
  std::vector<FrameSequence> out;
  out.reserve(lr.size());
  for (std::ptrdiff_t t = 0; t <= last; ++t) {
    FrameSequence seq;
    seq.radius = radius;
    for (std::ptrdiff_t d = -n; d <= n; ++d) seq.lr_frames.push_back(lr[std::clamp(t + d, std::ptrdiff_t{0}, last)]);
    if (!hr.empty()) seq.hr_target = hr[t];
    out.push_back(std::move(seq));
  }
  return out;
}

Frame read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  const std::size_t H = image.height, W = image.width, n = H * W;
  std::vector<double> px(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) px[c * n + i] = buf[3 * i + c] / 255.0;
  return Frame{Tensor({3, H, W}, std::move(px)), ColorSpace::RGB};
}

void write_png(const std::filesystem::path& path, const Frame& frame) {
  require_rgb("write_png", frame.pixels);
  const std::size_t H = frame.height(), W = frame.width(), n = H * W;
  auto p = frame.pixels.data();
  std::vector<unsigned char> buf(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      buf[3 * i + c] = static_cast<unsigned char>(std::lround(std::clamp(p[c * n + i], 0.0, 1.0) * 255.0));
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(W);
  image.height = static_cast<png_uint_32>(H);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw IoError("clip directory not found: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no PNG frames in " + dir.string());
  return out;
}

std::vector<Frame> read_clip(const std::filesystem::path& dir) {
  std::vector<Frame> frames;
  for (const auto& p : list_frames(dir)) frames.push_back(read_png(p));
  return frames;
}

}  // namespace dnln
