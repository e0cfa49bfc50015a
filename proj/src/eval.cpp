#include "dnln/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

namespace dnln {

namespace fs = std::filesystem;

namespace {

constexpr double kPeak = 255.0;

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
};

Plane y_plane(const Frame& f, std::size_t crop) {
  if (2 * crop >= f.height() || 2 * crop >= f.width()) {
    throw std::invalid_argument("border crop of " + std::to_string(crop) + " px leaves nothing of a " +
                                std::to_string(f.height()) + "x" + std::to_string(f.width()) + " frame");
  }
  Tensor y = rgb_to_y(f);
  Plane p{f.height() - 2 * crop, f.width() - 2 * crop, {}};
  p.v.reserve(p.h * p.w);
  auto d = y.data();
  for (std::size_t r = 0; r < p.h; ++r)
    for (std::size_t c = 0; c < p.w; ++c) p.v.push_back(d[(r + crop) * f.width() + c + crop]);
  return p;
}

void require_same(const char* op, const Frame& a, const Frame& b) {
  if (a.pixels.shape() != b.pixels.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.pixels.shape()) + " vs " +
                                shape_str(b.pixels.shape()));
  }
}

// separable 'valid' filtering with a normalised 1-D Gaussian
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
  const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(oh * w, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t x = 0; x < w; ++x) tmp[y * w + x] += g[i] * src[(y + i) * w + x];
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[y * w + x + i];
      out[y * ow + x] = acc;
    }
  return out;
}

std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  for (auto& x : g) x /= total;
  return g;
}

}  // namespace

FrameRange scored_frames(std::size_t clip_length, const EvalProtocol& proto) {
  if (clip_length <= 2 * proto.exclude) return {0, 0};
  return {proto.exclude, clip_length - proto.exclude};
}

double psnr_y(const Frame& pred, const Frame& gt, const EvalProtocol& proto) {
  require_same("psnr_y", pred, gt);
  const Plane a = y_plane(pred, proto.border_crop), b = y_plane(gt, proto.border_crop);
  double se = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.v.size());
  return 10.0 * std::log10(kPeak * kPeak / mse);
}

double ssim_y(const Frame& pred, const Frame& gt, const EvalProtocol& proto) {
  require_same("ssim_y", pred, gt);
  constexpr std::size_t win = 11;
  const Plane a = y_plane(pred, proto.border_crop), b = y_plane(gt, proto.border_crop);
  if (a.h < win || a.w < win) throw std::invalid_argument("ssim_y: frame smaller than the 11x11 window");
  const double c1 = (0.01 * kPeak) * (0.01 * kPeak), c2 = (0.03 * kPeak) * (0.03 * kPeak);
  const auto g = gaussian_taps(win, 1.5);
  const std::size_t n = a.v.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.v[i] * a.v[i];
    bb[i] = b.v[i] * b.v[i];
    ab[i] = a.v[i] * b.v[i];
  }
  const auto mu_a = filter_valid(a.v, a.h, a.w, g), mu_b = filter_valid(b.v, b.h, b.w, g);
  const auto e_aa = filter_valid(aa, a.h, a.w, g), e_bb = filter_valid(bb, a.h, a.w, g),
             e_ab = filter_valid(ab, a.h, a.w, g);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double saa = e_aa[i] - ma * ma, sbb = e_bb[i] - mb * mb, sab = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

std::string format_metric(double value, int precision) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << value;
  return os.str();
}

Frame BicubicUpscaler::upscale(const FrameSequence& window) const {
  const Frame& ref = window.reference_frame();
  const auto s = static_cast<double>(scale_);
  return Frame{cubic_resize_to(ref.pixels, ref.height() * scale_, ref.width() * scale_, s), ref.color};
}

ModelUpscaler::ModelUpscaler(const DnlnModel& model, std::size_t tile, std::size_t overlap)
    : model_(model), tile_(tile), overlap_(overlap) {
  if (tile_ != 0 && tile_ <= 2 * overlap_) throw std::invalid_argument("tile must exceed twice the overlap");
}

Frame ModelUpscaler::upscale(const FrameSequence& window) const {
  NoGradGuard guard;
  const std::size_t H = window.reference_frame().height(), W = window.reference_frame().width();
  const std::size_t s = scale();
  std::vector<Tensor> frames;
  for (const auto& f : window.lr_frames) frames.push_back(f.pixels);

  auto clamp_frame = [](const Tensor& t) {
    std::vector<double> v(t.data().begin(), t.data().end());
    for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
    return Frame{Tensor(t.shape(), std::move(v))};
  };
  if (tile_ == 0 || (H <= tile_ && W <= tile_)) return clamp_frame(model_.forward(frames));

  const std::size_t core = tile_ - 2 * overlap_;
  std::vector<double> out(3 * H * s * W * s);
  const std::size_t OH = H * s, OW = W * s;
  for (std::size_t cy = 0; cy < H; cy += core) {
    for (std::size_t cx = 0; cx < W; cx += core) {
      const std::size_t ch = std::min(core, H - cy), cw = std::min(core, W - cx);
      const std::size_t y0 = cy > overlap_ ? cy - overlap_ : 0, x0 = cx > overlap_ ? cx - overlap_ : 0;
      const std::size_t y1 = std::min(H, cy + ch + overlap_), x1 = std::min(W, cx + cw + overlap_);
      std::vector<Tensor> tiles;
      for (const auto& f : frames) tiles.push_back(crop(f, x0, y0, x1 - x0, y1 - y0));
      Tensor sr = model_.forward(tiles);
      auto d = sr.data();
      const std::size_t th = (y1 - y0) * s, tw = (x1 - x0) * s;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < ch * s; ++y)
          for (std::size_t x = 0; x < cw * s; ++x) {
            const double v = d[(c * th + (cy - y0) * s + y) * tw + (cx - x0) * s + x];
            out[(c * OH + cy * s + y) * OW + cx * s + x] = std::clamp(v, 0.0, 1.0);
          }
    }
  }
  return Frame{Tensor({3, OH, OW}, std::move(out))};
}

Frame mod_crop(const Frame& hr, std::size_t scale) {
  const std::size_t h = hr.height() - hr.height() % scale, w = hr.width() - hr.width() % scale;
  if (h == 0 || w == 0) throw std::invalid_argument("frame smaller than the scale factor");
  if (h == hr.height() && w == hr.width()) return hr;
  return Frame{crop(hr.pixels, 0, 0, w, h), hr.color};
}

ClipReport eval_clip(const Upscaler& up, const fs::path& hr_dir, const EvalProtocol& proto, LrSource source,
                     const fs::path& lr_dir) {
  const auto files = list_frames(hr_dir);
  std::vector<Frame> hr, lr;
  for (const auto& f : files) hr.push_back(mod_crop(read_png(f), up.scale()));
  if (source == LrSource::Degrade) {
    for (const auto& f : hr) lr.push_back(degrade(f, up.scale()));
  } else {
    const auto lr_files = list_frames(lr_dir);
    if (lr_files.size() != files.size()) {
      throw IoError(lr_dir.string() + ": " + std::to_string(lr_files.size()) + " LR frames for " +
                    std::to_string(files.size()) + " HR frames");
    }
    for (std::size_t i = 0; i < lr_files.size(); ++i) {
      Frame f = read_png(lr_files[i]);
      if (f.height() * up.scale() != hr[i].height() || f.width() * up.scale() != hr[i].width()) {
        throw std::invalid_argument(lr_files[i].string() + ": LR extents do not match " + files[i].string());
      }
      lr.push_back(std::move(f));
    }
  }
  ClipReport rep;
  rep.clip = hr_dir.filename().string();
  if (rep.clip.empty()) rep.clip = hr_dir.parent_path().filename().string();
  rep.frame_count = files.size();
  const FrameRange range = scored_frames(files.size(), proto);
  if (range.size() == 0) {
    throw std::invalid_argument(hr_dir.string() + ": " + std::to_string(files.size()) +
                                " frames leave none to score after excluding " + std::to_string(proto.exclude) +
                                " at each end");
  }
  const auto windows = window_clip(lr, hr, up.radius());
  for (std::size_t t = range.first; t < range.last; ++t) {
    Frame sr = up.upscale(windows[t]);
    rep.frames.push_back({t, files[t].filename().string(), psnr_y(sr, hr[t], proto), ssim_y(sr, hr[t], proto)});
  }
  for (const auto& f : rep.frames) {
    rep.mean_psnr += f.psnr;
    rep.mean_ssim += f.ssim;
  }
  rep.mean_psnr /= static_cast<double>(rep.frames.size());
  rep.mean_ssim /= static_cast<double>(rep.frames.size());
  return rep;
}

std::size_t infer_clip(const Upscaler& up, const fs::path& lr_dir, const fs::path& out_dir) {
  const auto files = list_frames(lr_dir);
  std::vector<Frame> lr;
  for (const auto& f : files) lr.push_back(read_png(f));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto windows = window_clip(lr, {}, up.radius());
  for (std::size_t t = 0; t < windows.size(); ++t) write_png(out_dir / files[t].filename(), up.upscale(windows[t]));
  return windows.size();
}

void write_csv(std::ostream& os, const std::vector<ClipReport>& reports) {
  os << "clip,frame,file,psnr,ssim\n";
  for (const auto& r : reports)
    for (const auto& f : r.frames)
      os << r.clip << ',' << f.index << ',' << f.file << ',' << format_metric(f.psnr, 6) << ','
         << format_metric(f.ssim, 6) << '\n';
  for (const auto& r : reports)
    os << r.clip << ",average,," << format_metric(r.mean_psnr, 6) << ',' << format_metric(r.mean_ssim, 6) << '\n';
}

void write_summary(std::ostream& os, const std::vector<ClipReport>& reports, const std::string& method) {
  std::size_t width = 7;
  for (const auto& r : reports) width = std::max(width, r.clip.size());
  os << std::left << std::setw(static_cast<int>(width)) << "Clip" << "  " << method << " (PSNR/SSIM)\n";
  double p = 0, s = 0;
  for (const auto& r : reports) {
    os << std::setw(static_cast<int>(width)) << r.clip << "  " << format_metric(r.mean_psnr, 2) << '/'
       << format_metric(r.mean_ssim, 4) << '\n';
    p += r.mean_psnr;
    s += r.mean_ssim;
  }
  if (!reports.empty()) {
    const auto n = static_cast<double>(reports.size());
    os << std::setw(static_cast<int>(width)) << "Average" << "  " << format_metric(p / n, 2) << '/'
       << format_metric(s / n, 4) << '\n';
  }
}

}  // namespace dnln
