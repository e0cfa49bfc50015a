#include "dnln/model.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dnln {

namespace {

std::size_t parse_size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw std::invalid_argument("config: " + std::string(key) + " expects a non-negative integer, got '" +
                                std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw std::invalid_argument("config: " + std::string(key) + " expects 0/1, got '" + std::string(value) + "'");
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = Preset::Paper;
  c.channels = 64;
  c.n_res = 5;
  c.n_dconv = 5;
  c.n_rrdb = 23;
  c.growth = 32;
  c.radius = 3;
  c.scale = 4;
  c.align_width = 64;
  c.hffb_width = 32;
  c.embed_width = 32;
  return c;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::for_preset(Preset preset) { return preset == Preset::Paper ? paper() : desk(); }

std::string_view preset_name(Preset preset) { return preset == Preset::Paper ? "paper" : "desk"; }

Preset parse_preset(std::string_view name) {
  if (name == "paper") return Preset::Paper;
  if (name == "desk") return Preset::Desk;
  throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected paper or desk)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (channels == 0 || growth == 0 || align_width == 0 || hffb_width == 0 || embed_width == 0) {
    fail("widths must be positive");
  }
  if (use_align && n_dconv == 0) fail("n_dconv must be at least 1 when alignment is enabled");
  if (scale < 2 || (scale & (scale - 1)) != 0) fail("scale must be a power of two >= 2");
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "preset") preset = parse_preset(value);
  else if (key == "channels") channels = parse_size(key, value);
  else if (key == "n_res") n_res = parse_size(key, value);
  else if (key == "n_dconv") n_dconv = parse_size(key, value);
  else if (key == "n_rrdb") n_rrdb = parse_size(key, value);
  else if (key == "growth") growth = parse_size(key, value);
  else if (key == "radius") radius = parse_size(key, value);
  else if (key == "scale") scale = parse_size(key, value);
  else if (key == "align_width") align_width = parse_size(key, value);
  else if (key == "hffb_width") hffb_width = parse_size(key, value);
  else if (key == "embed_width") embed_width = parse_size(key, value);
  else if (key == "use_align") use_align = parse_bool(key, value);
  else if (key == "use_hffb") use_hffb = parse_bool(key, value);
  else if (key == "use_nonlocal") use_nonlocal = parse_bool(key, value);
  else if (key == "trunk") {
    if (value == "rrdb") trunk = TrunkKind::Rrdb;
    else if (value == "resblock") trunk = TrunkKind::ResBlock;
    else throw std::invalid_argument("config: trunk expects rrdb or resblock, got '" + std::string(value) + "'");
  } else {
    throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "preset=" << preset_name(preset) << '\n'
     << "channels=" << channels << '\n'
     << "n_res=" << n_res << '\n'
     << "n_dconv=" << n_dconv << '\n'
     << "n_rrdb=" << n_rrdb << '\n'
     << "growth=" << growth << '\n'
     << "radius=" << radius << '\n'
     << "scale=" << scale << '\n'
     << "align_width=" << align_width << '\n'
     << "hffb_width=" << hffb_width << '\n'
     << "embed_width=" << embed_width << '\n'
     << "use_align=" << use_align << '\n'
     << "use_hffb=" << use_hffb << '\n'
     << "use_nonlocal=" << use_nonlocal << '\n'
     << "trunk=" << (trunk == TrunkKind::Rrdb ? "rrdb" : "resblock") << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  // a preset line, when present, resets everything before later overrides
  ModelConfig c;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    auto l = trim(line);
    if (l.empty() || l.front() == '#') continue;
    auto eq = l.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("config: expected key=value, got '" + line + "'");
    auto key = trim(l.substr(0, eq));
    if (key == "preset") c = for_preset(parse_preset(trim(l.substr(eq + 1))));
    else c.set(key, l.substr(eq + 1));
  }
  c.validate();
  return c;
}

Tensor& ParameterSet::add(std::string name, Tensor tensor) {
  if (find(name)) throw std::invalid_argument("parameter '" + name + "' registered twice");
  entries_.emplace_back(std::move(name), std::move(tensor));
  return entries_.back().second;
}

const Tensor* ParameterSet::find(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

Tensor* ParameterSet::find(std::string_view name) {
  for (auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Tensor dense_block_forward(const Tensor& u, const std::array<ConvKernel, 5>& convs, double beta) {
  std::vector<Tensor> feats{u};
  for (std::size_t j = 0; j < 4; ++j) feats.push_back(leaky_relu(conv2d(concat_channels(feats), convs[j]), kTrunkSlope));
  return add(u, scale(conv2d(concat_channels(feats), convs[4]), beta));
}

Tensor rrdb_forward(const Tensor& x, const RrdbParams& p) {
  Tensor h = x;
  for (const auto& block : p.dense) h = dense_block_forward(h, block, p.beta);
  return add(x, scale(h, p.beta));
}

Tensor res_block_forward(const Tensor& x, const ResBlock& block) {
  return add(x, conv2d(relu(conv2d(x, block.conv1)), block.conv2));
}

ConvKernel DnlnModel::make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                                std::size_t dilation, double gain) {
  const double stddev = gain / std::sqrt(static_cast<double>(cin * k * k));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor w({cout, cin, k, k});
  if (gain != 0.0)
    for (auto& v : w.mutable_data()) v = stddev * normal(rng_);
  w.set_requires_grad();
  Tensor b = Tensor::zeros({cout}).set_requires_grad();
  params_.add(name + ".weight", w);
  params_.add(name + ".bias", b);
  return ConvKernel{w, b, dilation};
}

DnlnModel::DnlnModel(ModelConfig config, InitOptions init) : config_(std::move(config)), rng_(init.seed) {
  config_.validate();
  const std::size_t C = config_.channels;
  const double gain = 1.0;
  const double head_gain = init.zero_heads ? 0.0 : 0.01;

  extract_conv_ = make_conv("extract.conv", 3, C, 3, 1, gain);
  for (std::size_t i = 0; i < config_.n_res; ++i) {
    const std::string p = "extract.res" + std::to_string(i);
    extract_res_.push_back({make_conv(p + ".conv1", C, C, 3, 1, gain), make_conv(p + ".conv2", C, C, 3, 1, gain)});
  }

  if (config_.use_align) {
    const std::size_t R = config_.align_width, B = config_.hffb_width, K = 9;
    for (std::size_t s = 0; s < config_.n_dconv; ++s) {
      const std::string p = "align.stage" + std::to_string(s);
      AlignStage st;
      st.reduce = make_conv(p + ".reduce", 2 * C, R, 3, 1, gain);
      if (config_.use_hffb) {
        HffbParams h;
        for (std::size_t r = 1; r <= kHffbBranches; ++r) {
          h.branches.push_back(make_conv(p + ".hffb.branch" + std::to_string(r), R, B, 3, r, gain));
        }
        h.fuse = make_conv(p + ".hffb.fuse", kHffbBranches * B, R, 1, 1, gain);
        st.hffb = std::move(h);
      } else {
        st.plain = make_conv(p + ".plain", R, R, 3, 1, gain);
      }
      st.head = make_conv(p + ".head", R, 3 * K, 3, 1, head_gain);
      st.deform = make_conv(p + ".deform", C, C, 3, 1, gain);
      align_.push_back(std::move(st));
    }
  }

  if (config_.use_nonlocal) {
    const std::size_t E = config_.embed_width;
    nonlocal_.u = make_conv("nonlocal.u", C, E, 1, 1, gain);
    nonlocal_.v = make_conv("nonlocal.v", C, E, 1, 1, gain);
    nonlocal_.g = make_conv("nonlocal.g", C, E, 1, 1, gain);
    nonlocal_.z = make_conv("nonlocal.z", E, C, 1, 1, gain);
  }

  fusion_ = make_conv("fusion", config_.frames() * C, C, 3, 1, gain);

  if (config_.trunk == TrunkKind::Rrdb) {
    const std::size_t G = config_.growth;
    for (std::size_t i = 0; i < config_.n_rrdb; ++i) {
      RrdbParams rp;
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t j = 0; j < 5; ++j) {
          const std::string name = "trunk.rrdb" + std::to_string(i) + ".db" + std::to_string(b) + ".conv" +
                                   std::to_string(j + 1);
          rp.dense[b][j] = make_conv(name, C + j * G, j == 4 ? C : G, 3, 1, 0.1 * gain);
        }
      }
      rrdb_.push_back(std::move(rp));
    }
  } else {
    for (std::size_t i = 0; i < config_.n_rrdb; ++i) {
      const std::string p = "trunk.res" + std::to_string(i);
      trunk_res_.push_back({make_conv(p + ".conv1", C, C, 3, 1, gain), make_conv(p + ".conv2", C, C, 3, 1, 0.1 * gain)});
    }
  }
  trunk_conv_ = make_conv("trunk.conv", C, C, 3, 1, gain);

  for (std::size_t s = 1, i = 0; s < config_.scale; s *= 2, ++i) {
    up_.push_back(make_conv("up." + std::to_string(i), C, 4 * C, 3, 1, gain));
  }
  head_ = make_conv("head", C, 3, 3, 1, gain);
}

Tensor DnlnModel::extract_features(const Tensor& frame) const {
  if (frame.rank() != 3 || frame.dim(0) != 3) {
    throw std::invalid_argument("extract_features: expected a (3,H,W) frame, got " + shape_str(frame.shape()));
  }
  Tensor f = conv2d(frame, extract_conv_);
  for (const auto& block : extract_res_) f = res_block_forward(f, block);
  return f;
}

Tensor DnlnModel::forward(const std::vector<Tensor>& lr_frames, ForwardProbe* probe) const {
  const std::size_t n = config_.radius;
  if (lr_frames.size() != config_.frames()) {
    throw std::invalid_argument("forward: model expects " + std::to_string(config_.frames()) + " frames, got " +
                                std::to_string(lr_frames.size()));
  }
  for (const auto& f : lr_frames) {
    if (f.shape() != lr_frames[0].shape()) throw std::invalid_argument("forward: input frames differ in shape");
  }

  std::vector<Tensor> features;
  features.reserve(lr_frames.size());
  for (const auto& f : lr_frames) features.push_back(extract_features(f));
  const Tensor& ft = features[n];

  std::vector<Tensor> branches;
  branches.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (i == n) {
      branches.push_back(ft);
      continue;
    }
    Tensor a = config_.use_align ? align_cascade(features[i], ft, align_) : features[i];
    if (config_.use_nonlocal) a = nonlocal_forward(a, ft, nonlocal_);
    branches.push_back(a);
  }

  Tensor fused = conv2d(concat_channels(branches), fusion_);
  Tensor t = fused;
  for (const auto& r : rrdb_) t = rrdb_forward(t, r);
  for (const auto& r : trunk_res_) t = res_block_forward(t, r);
  Tensor up_in = add(conv2d(t, trunk_conv_), ft);

  Tensor h = up_in;
  for (const auto& up : up_) h = leaky_relu(pixel_shuffle(conv2d(h, up), 2), kTrunkSlope);
  Tensor out = conv2d(h, head_);

  if (probe) {
    probe->features = features;
    probe->branches = branches;
    probe->fusion = fused;
    probe->upsampler_input = up_in;
  }
  return out;
}

Tensor DnlnModel::forward(const FrameSequence& seq, ForwardProbe* probe) const {
  if (seq.radius != config_.radius) {
    throw std::invalid_argument("forward: sequence radius " + std::to_string(seq.radius) + " but model radius " +
                                std::to_string(config_.radius));
  }
  seq.validate(config_.scale);
  std::vector<Tensor> frames;
  for (const auto& f : seq.lr_frames) frames.push_back(f.pixels);
  return forward(frames, probe);
}

}  // namespace dnln
