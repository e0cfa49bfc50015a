#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dnln/image.hpp"
#include "dnln/model.hpp"

namespace dnln {

struct EvalProtocol {
  std::size_t exclude = 2;      // frames skipped at each end of a clip
  std::size_t border_crop = 0;  // HR pixels dropped at each image edge
};

/// Half-open range [first, last) of scored frame indices; empty for short clips.
struct FrameRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last > first ? last - first : 0; }
};
FrameRange scored_frames(std::size_t clip_length, const EvalProtocol& proto);

/// PSNR of the Y channel on a 0-255 scale; +inf for identical inputs.
double psnr_y(const Frame& pred, const Frame& gt, const EvalProtocol& proto = {});
/// Mean SSIM of the Y channel: 11x11 Gaussian window (sigma 1.5), valid region.
double ssim_y(const Frame& pred, const Frame& gt, const EvalProtocol& proto = {});

/// Renders "inf" for infinities, fixed precision otherwise.
std::string format_metric(double value, int precision);

/// Produces the HR estimate of a window's centre frame.
class Upscaler {
 public:
  virtual ~Upscaler() = default;
  virtual std::size_t scale() const = 0;
  virtual std::size_t radius() const = 0;
  virtual std::string name() const = 0;
  virtual Frame upscale(const FrameSequence& window) const = 0;
};

/// Cubic upscale of the reference frame alone.
class BicubicUpscaler : public Upscaler {
 public:
  explicit BicubicUpscaler(std::size_t scale, std::size_t radius = 0) : scale_(scale), radius_(radius) {}
  std::size_t scale() const override { return scale_; }
  std::size_t radius() const override { return radius_; }
  std::string name() const override { return "bicubic"; }
  Frame upscale(const FrameSequence& window) const override;

 private:
  std::size_t scale_;
  std::size_t radius_;
};

/// Runs the network without gradient recording. Frames larger than `tile`
/// are processed in overlapping LR tiles (`overlap` pixels of context per side)
/// to bound the non-local attention memory; tile = 0 disables tiling.
class ModelUpscaler : public Upscaler {
 public:
  explicit ModelUpscaler(const DnlnModel& model, std::size_t tile = 48, std::size_t overlap = 8);
  std::size_t scale() const override { return model_.config().scale; }
  std::size_t radius() const override { return model_.config().radius; }
  std::string name() const override { return "dnln"; }
  Frame upscale(const FrameSequence& window) const override;

 private:
  const DnlnModel& model_;
  std::size_t tile_;
  std::size_t overlap_;
};

struct FrameScore {
  std::size_t index = 0;
  std::string file;
  double psnr = 0;
  double ssim = 0;
};

struct ClipReport {
  std::string clip;
  std::size_t frame_count = 0;
  std::vector<FrameScore> frames;  // scored frames only, in index order
  double mean_psnr = 0;
  double mean_ssim = 0;
};

/// Where LR inputs come from: degraded on the fly from the HR frames, or read
/// from a directory of precomputed LR frames with matching file names.
enum class LrSource { Degrade, Precomputed };

/// Crops an HR frame to extents divisible by `scale`.
Frame mod_crop(const Frame& hr, std::size_t scale);

/// Scores one clip of HR ground-truth frames. `lr_dir` is read only for
/// LrSource::Precomputed.
ClipReport eval_clip(const Upscaler& up, const std::filesystem::path& hr_dir, const EvalProtocol& proto,
                     LrSource source = LrSource::Degrade, const std::filesystem::path& lr_dir = {});

/// Writes one SR PNG per LR frame in `lr_dir`, under the same file names.
/// Returns the number of frames written.
std::size_t infer_clip(const Upscaler& up, const std::filesystem::path& lr_dir, const std::filesystem::path& out_dir);

/// `clip,frame,file,psnr,ssim` rows followed by one `clip,average,,psnr,ssim` row per clip.
void write_csv(std::ostream& os, const std::vector<ClipReport>& reports);
/// Clip / PSNR / SSIM table with a final Average row over clips.
void write_summary(std::ostream& os, const std::vector<ClipReport>& reports, const std::string& method);

}  // namespace dnln
