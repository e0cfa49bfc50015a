#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dnln/tensor.hpp"

namespace dnln {

/// Raised for unreadable or unwritable files; distinct from validation errors.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ColorSpace { RGB, YCbCr };

/// Three-channel image with values in [0,1].
struct Frame {
  Tensor pixels;  // (3, H, W)
  ColorSpace color = ColorSpace::RGB;

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

Frame make_frame(Tensor pixels);

/// Integer translation applied to one frame of a synthetic clip, in HR pixels.
struct Motion {
  int dy = 0;
  int dx = 0;
  bool operator==(const Motion&) const = default;
};

/// 2N+1 consecutive LR frames centred on the reference, plus its HR target.
struct FrameSequence {
  std::vector<Frame> lr_frames;
  Frame hr_target;  // pixels undefined when no ground truth exists
  std::size_t radius = 0;
  std::vector<Motion> motion;  // per LR frame; empty unless known

  std::size_t reference() const { return radius; }
  const Frame& reference_frame() const { return lr_frames.at(radius); }
  bool has_target() const { return hr_target.pixels.defined(); }
  void validate(std::size_t scale) const;
};

// ---------------------------------------------------------------------------
// Cubic resampling (antialiased when shrinking, a = -0.5).

double cubic_weight(double x);

/// Separable cubic resize. Output extents are ceil(in * scale). Shrinking
/// stretches the kernel by 1/scale; weights are renormalised per output pixel
/// and border pixels are replicated.
Frame cubic_resize(const Frame& img, double scale);
Tensor cubic_resize(const Tensor& img, double scale);
Tensor cubic_resize_to(const Tensor& img, std::size_t out_h, std::size_t out_w, double scale);

/// Rounds to the nearest 1/255 level, as a PNG round trip would.
Tensor quantize_8bit(const Tensor& img);

/// HR -> LR bicubic degradation with 8-bit quantisation of the result.
Frame degrade(const Frame& hr, std::size_t scale);

/// BT.601 luma on the 0-255 scale: 16 + 65.481 R + 128.553 G + 24.966 B.
Tensor rgb_to_y(const Frame& img);

// ---------------------------------------------------------------------------
// Augmentation.

struct HFlip {};
struct VFlip {};
struct Rot90 {};  // counter-clockwise
struct Crop {
  std::size_t x = 0, y = 0, w = 0, h = 0;  // LR coordinates
};
using AugmentOp = std::variant<HFlip, VFlip, Rot90, Crop>;

Tensor hflip(const Tensor& img);
Tensor vflip(const Tensor& img);
Tensor rot90(const Tensor& img);
Tensor crop(const Tensor& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h);

/// Applies the same geometric op to every LR frame and to the HR target. Crop
/// coordinates are in LR pixels and are scaled by the SR factor on the HR side.
FrameSequence augment(const FrameSequence& seq, const AugmentOp& op);

/// One sequence centred on every frame; positions past either end repeat the
/// nearest existing frame. `hr` may be empty.
std::vector<FrameSequence> window_clip(const std::vector<Frame>& lr, const std::vector<Frame>& hr,
                                       std::size_t radius);

// ---------------------------------------------------------------------------
// PNG frame I/O.

Frame read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Frame& frame);

/// PNG files of a clip directory in filename order.
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir);
std::vector<Frame> read_clip(const std::filesystem::path& dir);

}  // namespace dnln
