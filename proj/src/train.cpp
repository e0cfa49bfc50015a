#include "dnln/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace dnln {

LossKind parse_loss(std::string_view name) {
  if (name == "l1") return LossKind::L1;
  if (name == "l2") return LossKind::L2;
  throw std::invalid_argument("unknown loss '" + std::string(name) + "' (expected l1 or l2)");
}

std::string_view loss_name(LossKind kind) { return kind == LossKind::L1 ? "l1" : "l2"; }

Tensor l1_loss(const Tensor& pred, const Tensor& target) { return abs_mean(sub(pred, target)); }

Tensor l2_loss(const Tensor& pred, const Tensor& target) { return sq_mean(sub(pred, target)); }

Tensor loss_value(LossKind kind, const Tensor& pred, const Tensor& target) {
  return kind == LossKind::L1 ? l1_loss(pred, target) : l2_loss(pred, target);
}

double Schedule::lr_at(std::size_t epoch) const {
  if (epoch < drop_start) return base_lr;
  const std::size_t halvings = 1 + (epoch - drop_start) / std::max<std::size_t>(half_every, 1);
  return std::ldexp(base_lr, -static_cast<int>(std::min<std::size_t>(halvings, 1000)));
}

Adam::Adam(const ParameterSet& params) {
  for (const auto& [name, t] : params) {
    state_.m.emplace_back(t.numel(), 0.0);
    state_.v.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(ParameterSet& params, double lr) {
  if (params.size() != state_.m.size()) throw std::invalid_argument("adam: parameter set changed shape");
  std::size_t idx = 0;
  for (const auto& [name, t] : params) {
    if (t.numel() != state_.m[idx].size()) throw std::invalid_argument("adam: moment size mismatch for " + name);
    if (t.has_grad()) {
      for (double g : t.grad()) {
        if (!std::isfinite(g)) throw TrainingError("adam: non-finite gradient in " + name + "; step rejected");
      }
    }
    ++idx;
  }
  auto& s = state_;
  s.step += 1;
  s.lr = lr;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  idx = 0;
  for (auto& [name, t] : params) {
    auto& m = s.m[idx];
    auto& v = s.v[idx];
    ++idx;
    auto p = t.mutable_data();
    const bool has = t.has_grad();
    auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor render_texture(std::size_t height, std::size_t width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = height * width;
  std::vector<double> px(3 * n, 0.0);

  // smooth colour field: random coarse lattice, cubic-interpolated
  constexpr std::size_t cell = 8;
  const std::size_t gh = height / cell + 2, gw = width / cell + 2;
  std::vector<double> grid(3 * gh * gw);
  for (auto& g : grid) g = 0.2 + 0.6 * unit(rng);
  Tensor smooth = cubic_resize_to(Tensor({3, gh, gw}, grid), gh * cell, gw * cell, static_cast<double>(cell));
  auto sm = smooth.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) px[c * n + y * width + x] = sm[(c * gh * cell + y) * gw * cell + x];

  // oriented gratings reaching past the LR Nyquist limit
  const int gratings = 3;
  for (int k = 0; k < gratings; ++k) {
    const double freq = 0.04 + 0.16 * unit(rng);
    const double theta = 3.141592653589793 * unit(rng);
    const double phase = 6.283185307179586 * unit(rng);
    const double amp = 0.05 + 0.1 * unit(rng);
    double tint[3];
    for (auto& t : tint) t = 0.5 + 0.5 * unit(rng);
    const double fy = freq * std::sin(theta), fx = freq * std::cos(theta);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double s = amp * std::sin(6.283185307179586 * (fy * y + fx * x) + phase);
        for (std::size_t c = 0; c < 3; ++c) px[c * n + y * width + x] += tint[c] * s;
      }
  }

  // a few flat shapes with one-pixel soft edges
  const int shapes = 4;
  for (int k = 0; k < shapes; ++k) {
    const double cy = height * unit(rng), cx = width * unit(rng);
    const double r = 3.0 + 0.25 * std::min(height, width) * unit(rng);
    const bool disc = unit(rng) < 0.5;
    double colour[3];
    for (auto& c : colour) c = unit(rng);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double dist = disc ? std::hypot(dy, dx) - r : std::max(std::abs(dy), std::abs(dx)) - r;
        const double alpha = 0.7 * std::clamp(0.5 - dist, 0.0, 1.0);
        if (alpha == 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = px[c * n + y * width + x];
          v = (1.0 - alpha) * v + alpha * colour[c];
        }
      }
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  return Tensor({3, height, width}, std::move(px));
}

std::vector<FrameSequence> synth_dataset(const SynthOptions& opts) {
  if (opts.scale == 0 || opts.lr_size == 0) throw std::invalid_argument("synth_dataset: sizes must be positive");
  if (opts.shift_range < 0) throw std::invalid_argument("synth_dataset: shift_range must be non-negative");
  const std::size_t hr = opts.lr_size * opts.scale;
  const auto n = static_cast<int>(opts.radius);
  const std::size_t margin = static_cast<std::size_t>(opts.shift_range) * opts.radius;
  std::vector<FrameSequence> out;
  out.reserve(opts.count);
  for (std::size_t i = 0; i < opts.count; ++i) {
    std::mt19937_64 rng(derive_seed(opts.seed, i));
    std::uniform_int_distribution<int> vel(-opts.shift_range, opts.shift_range);
    const int vy = vel(rng), vx = vel(rng);
    Tensor canvas = render_texture(hr + 2 * margin, hr + 2 * margin, rng);
    FrameSequence seq;
    seq.radius = opts.radius;
    for (int j = -n; j <= n; ++j) {
      const Motion m{j * vy, j * vx};
      // frame(y, x) = texture(y - dy, x - dx)
      const auto ox = static_cast<std::size_t>(static_cast<int>(margin) - m.dx);
      const auto oy = static_cast<std::size_t>(static_cast<int>(margin) - m.dy);
      Frame hr_frame{crop(canvas, ox, oy, hr, hr)};
      seq.lr_frames.push_back(degrade(hr_frame, opts.scale));
      seq.motion.push_back(m);
      if (j == 0) seq.hr_target = hr_frame;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

Trainer::Trainer(DnlnModel& model, TrainOptions opts)
    : model_(model), opts_(std::move(opts)), adam_(model.parameters()) {
  if (opts_.batch == 0) throw std::invalid_argument("train: batch size must be positive");
}

FrameSequence Trainer::prepare(const FrameSequence& seq, std::mt19937_64& rng) const {
  FrameSequence s = seq;
  const auto& lr = s.lr_frames.at(0);
  if (opts_.patch > 0 && (lr.height() > opts_.patch || lr.width() > opts_.patch)) {
    const std::size_t h = std::min(opts_.patch, lr.height()), w = std::min(opts_.patch, lr.width());
    std::uniform_int_distribution<std::size_t> py(0, lr.height() - h), px(0, lr.width() - w);
    const std::size_t y = py(rng), x = px(rng);
    s = augment(s, Crop{x, y, w, h});
  }
  if (!opts_.augment) return s;
  std::bernoulli_distribution coin(0.5);
  if (coin(rng)) s = augment(s, HFlip{});
  if (coin(rng)) s = augment(s, VFlip{});
  if (coin(rng)) s = augment(s, Rot90{});
  return s;
}

double Trainer::train_step(std::span<const FrameSequence> batch, double lr) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  auto& params = model_.parameters();
  params.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (const auto& seq : batch) {
    if (!seq.has_target()) throw std::invalid_argument("train_step: sample without HR target");
    Tensor pred = model_.forward(seq);
    Tensor loss = loss_value(opts_.loss, pred, seq.hr_target.pixels);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("training diverged at step " + std::to_string(step_ + 1) + ": non-finite loss");
    }
    scale(loss, inv).backward();
    total += value;
  }
  adam_.step(params, lr);
  return total * inv;
}

const std::vector<TraceRow>& Trainer::run(const std::vector<FrameSequence>& data) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  const std::size_t n = data.size(), B = opts_.batch;
  const std::size_t per_epoch = (n + B - 1) / B;
  const std::uint64_t shuffle_stream = derive_seed(opts_.seed, 3);
  const std::uint64_t augment_stream = derive_seed(opts_.seed, 2);

  std::vector<FrameSequence> batch;
  while (epoch_ < opts_.epochs) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(shuffle_stream, epoch_));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const std::size_t first = step_ > epoch_ * per_epoch ? step_ - epoch_ * per_epoch : 0;
    for (std::size_t b = first; b < per_epoch; ++b) {
      if (opts_.max_steps && step_ >= opts_.max_steps) return trace_;
      std::mt19937_64 aug_rng(derive_seed(augment_stream, step_));
      batch.clear();
      for (std::size_t j = 0; j < B; ++j) batch.push_back(prepare(data[order[(b * B + j) % n]], aug_rng));
      const double lr = opts_.schedule.lr_at(epoch_);
      const double loss = train_step(batch, lr);
      ++step_;
      trace_.push_back({step_, epoch_, lr, loss});
      if (opts_.checkpoint_every && opts_.on_checkpoint && step_ % opts_.checkpoint_every == 0) {
        opts_.on_checkpoint(step_);
      }
    }
    ++epoch_;
  }
  return trace_;
}

}  // namespace dnln
