#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "dnln/image.hpp"
#include "dnln/model.hpp"

namespace dnln {

/// Raised when training cannot continue (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossKind { L1, L2 };
LossKind parse_loss(std::string_view name);
std::string_view loss_name(LossKind kind);

Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor l2_loss(const Tensor& pred, const Tensor& target);
Tensor loss_value(LossKind kind, const Tensor& pred, const Tensor& target);

/// Step decay: base until `drop_start`, then halved every `half_every` epochs.
struct Schedule {
  double base_lr = 1e-4;
  std::size_t drop_start = 70;
  std::size_t half_every = 20;

  double lr_at(std::size_t epoch) const;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 0.0;
};

/// Bias-corrected Adam over a ParameterSet, moments indexed in registry order.
class Adam {
 public:
  explicit Adam(const ParameterSet& params);

  /// Applies one update from the accumulated gradients. Throws TrainingError
  /// and leaves parameters and moments untouched if any gradient is non-finite.
  void step(ParameterSet& params, double lr);

  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  AdamState state_;
};

/// splitmix64 mix of a master seed and a stream id.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

struct SynthOptions {
  std::size_t count = 64;
  int shift_range = 2;  // max per-frame velocity component, HR pixels
  std::uint64_t seed = 0;
  std::size_t radius = 1;
  std::size_t scale = 4;
  std::size_t lr_size = 16;
};

/// Random smooth texture of the given extents, channels in [0,1].
Tensor render_texture(std::size_t height, std::size_t width, std::mt19937_64& rng);

/// Translated-texture clips: frame j of a sample is the texture shifted by
/// (j - N) * velocity, degraded to LR by cubic_resize(1/scale). The applied
/// shifts are stored in FrameSequence::motion.
std::vector<FrameSequence> synth_dataset(const SynthOptions& opts);

struct TraceRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch = 8;
  LossKind loss = LossKind::L1;
  std::uint64_t seed = 0;
  Schedule schedule;
  std::size_t patch = 50;  // LR crop size; samples no larger are used whole
  bool augment = true;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t checkpoint_every = 0;
  std::function<void(std::size_t step)> on_checkpoint;
};

/// Minibatch trainer. Gradients of a batch are accumulated sample by sample
/// in batch order; a short final batch is padded from the epoch's start.
/// Shuffling is seeded per epoch and augmentation per step, so a resumed run
/// continues exactly as an uninterrupted one would.
class Trainer {
 public:
  Trainer(DnlnModel& model, TrainOptions opts);

  /// Trains until the epoch budget or step budget is exhausted.
  const std::vector<TraceRow>& run(const std::vector<FrameSequence>& data);

  /// One optimisation step over `batch`; returns the mean sample loss.
  double train_step(std::span<const FrameSequence> batch, double lr);

  void set_loss(LossKind kind) { opts_.loss = kind; }
  LossKind loss() const { return opts_.loss; }
  Adam& optimizer() { return adam_; }
  const Adam& optimizer() const { return adam_; }
  std::size_t steps_done() const { return step_; }
  std::size_t epochs_done() const { return epoch_; }
  void set_progress(std::size_t step, std::size_t epoch) {
    step_ = step;
    epoch_ = epoch;
  }
  const std::vector<TraceRow>& trace() const { return trace_; }

 private:
  FrameSequence prepare(const FrameSequence& seq, std::mt19937_64& rng) const;

  DnlnModel& model_;
  TrainOptions opts_;
  Adam adam_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::vector<TraceRow> trace_;
};

}  // namespace dnln
