#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dnln/deform.hpp"
#include "dnln/image.hpp"
#include "dnln/nonlocal.hpp"
#include "dnln/ops.hpp"

namespace dnln {

enum class Preset { Paper, Desk };
enum class TrunkKind { Rrdb, ResBlock };

/// Architecture hyperparameters. Serialised as `key=value` lines.
struct ModelConfig {
  Preset preset = Preset::Desk;
  std::size_t channels = 8;
  std::size_t n_res = 1;
  std::size_t n_dconv = 2;
  std::size_t n_rrdb = 2;
  std::size_t growth = 8;
  std::size_t radius = 1;  // N; the network reads 2N+1 frames
  std::size_t scale = 4;
  std::size_t align_width = 8;  // predictor width after the channel-reduce conv
  std::size_t hffb_width = 4;   // filters per dilated branch
  std::size_t embed_width = 4;  // non-local embedding width
  bool use_align = true;
  bool use_hffb = true;
  bool use_nonlocal = true;
  TrunkKind trunk = TrunkKind::Rrdb;

  static ModelConfig paper();
  static ModelConfig desk();
  static ModelConfig for_preset(Preset preset);

  std::size_t frames() const { return 2 * radius + 1; }
  void validate() const;

  /// Applies one `key=value` setting; unknown keys and bad values throw.
  void set(std::string_view key, std::string_view value);
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

std::string_view preset_name(Preset preset);
Preset parse_preset(std::string_view name);

/// Ordered name -> tensor registry. Names are unique.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor tensor);
  const Tensor* find(std::string_view name) const;
  Tensor* find(std::string_view name);
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

inline constexpr double kRrdbBeta = 0.2;
inline constexpr double kTrunkSlope = 0.2;

/// Three dense blocks of five convs; conv j of a block sees c + (j-1) g channels.
struct RrdbParams {
  std::array<std::array<ConvKernel, 5>, 3> dense;
  double beta = kRrdbBeta;
};

/// u + beta * conv5([u, x1..x4]) with x_j = lrelu(conv_j([u, x1..x_{j-1}])).
Tensor dense_block_forward(const Tensor& u, const std::array<ConvKernel, 5>& convs, double beta);
/// x + beta * DB3(DB2(DB1(x))).
Tensor rrdb_forward(const Tensor& x, const RrdbParams& p);

struct ResBlock {
  ConvKernel conv1;
  ConvKernel conv2;
};
/// x + conv2(relu(conv1(x))).
Tensor res_block_forward(const Tensor& x, const ResBlock& block);

/// Intermediate values captured by DnlnModel::forward for inspection.
struct ForwardProbe {
  std::vector<Tensor> features;  // F_T for every input frame
  std::vector<Tensor> branches;  // per input frame: attended neighbour, or F_t at the centre
  Tensor fusion;
  Tensor upsampler_input;
};

/// Weight initialisation switches used by tests and ablations.
struct InitOptions {
  std::uint64_t seed = 0;
  bool zero_heads = true;  // zero predictor head convs
};

class DnlnModel {
 public:
  explicit DnlnModel(ModelConfig config, InitOptions init = {});

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  Tensor extract_features(const Tensor& frame) const;

  /// Super-resolves the centre frame of 2N+1 LR frames (each (3,H,W)).
  Tensor forward(const std::vector<Tensor>& lr_frames, ForwardProbe* probe = nullptr) const;
  Tensor forward(const FrameSequence& seq, ForwardProbe* probe = nullptr) const;

  // Sub-blocks exposed for tests and gradient checks.
  const std::vector<AlignStage>& align_stages() const { return align_; }
  const NonLocalWeights& nonlocal_weights() const { return nonlocal_; }
  const std::vector<RrdbParams>& rrdbs() const { return rrdb_; }

 private:
  ConvKernel make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                       std::size_t dilation, double gain);

  ModelConfig config_;
  ParameterSet params_;
  std::mt19937_64 rng_;

  ConvKernel extract_conv_;
  std::vector<ResBlock> extract_res_;
  std::vector<AlignStage> align_;
  NonLocalWeights nonlocal_;
  ConvKernel fusion_;
  std::vector<RrdbParams> rrdb_;
  std::vector<ResBlock> trunk_res_;
  ConvKernel trunk_conv_;
  std::vector<ConvKernel> up_;
  ConvKernel head_;
};

}  // namespace dnln
