// dnln: train, evaluate and run the video super-resolution network.
//
// Exit codes: 0 success, 1 validation failure, 2 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "dnln/checkpoint.hpp"
#include "dnln/eval.hpp"
#include "dnln/gradcheck.hpp"
#include "dnln/image.hpp"
#include "dnln/model.hpp"
#include "dnln/train.hpp"

namespace fs = std::filesystem;
using namespace dnln;

namespace {

constexpr int kValidation = 1;
constexpr int kIo = 2;

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool has_frames(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") return true;
  return false;
}

// A directory of PNG frames is one clip; otherwise each subdirectory is a clip.
std::vector<fs::path> clip_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  if (has_frames(root)) return {root};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no clips under " + root.string());
  return out;
}

fs::path lr_root(fs::path root) {
  while (!root.empty() && root.filename().empty()) root = root.parent_path();
  return root.parent_path() / (root.filename().string() + "_lr");
}

std::vector<FrameSequence> load_training_clips(const fs::path& root, const ModelConfig& cfg) {
  std::vector<FrameSequence> data;
  for (const auto& dir : clip_dirs(root)) {
    std::vector<Frame> hr, lr;
    for (const auto& f : read_clip(dir)) {
      hr.push_back(mod_crop(f, cfg.scale));
      lr.push_back(degrade(hr.back(), cfg.scale));
    }
    for (auto& w : window_clip(lr, hr, cfg.radius)) data.push_back(std::move(w));
  }
  return data;
}

struct TrainArgs {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> overrides;
  std::string data;
  bool synthetic = false;
  std::size_t synth_count = 64;
  std::size_t synth_size = 16;
  int synth_shift = 2;
  std::size_t epochs = 1;
  std::size_t batch = 8;
  std::string loss = "l1";
  std::uint64_t seed = 0;
  std::string resume;
  std::string out;
  double lr = 1e-4;
  std::size_t drop_start = 70;
  std::size_t half_every = 20;
  std::size_t patch = 50;
  bool no_augment = false;
  std::size_t max_steps = 0;
  std::size_t checkpoint_every = 0;
};

int run_train(const TrainArgs& a) {
  ModelConfig cfg = ModelConfig::for_preset(parse_preset(a.preset));
  if (!a.config.empty()) cfg = ModelConfig::from_text(read_text(a.config));
  for (const auto& kv : a.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    cfg = resume->config;
  }

  std::vector<FrameSequence> data;
  if (a.synthetic) {
    SynthOptions so;
    so.count = a.synth_count;
    so.shift_range = a.synth_shift;
    so.seed = derive_seed(a.seed, 1);
    so.radius = cfg.radius;
    so.scale = cfg.scale;
    so.lr_size = a.synth_size;
    data = synth_dataset(so);
  } else {
    data = load_training_clips(a.data, cfg);
  }

  DnlnModel model(cfg, InitOptions{derive_seed(a.seed, 0)});
  const fs::path out = a.out;
  const fs::path ckpt_dir = out / "checkpoint";
  const fs::path trace_path = out / "trace.csv";
  fs::create_directories(out);

  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.batch = a.batch;
  opts.loss = parse_loss(a.loss);
  opts.seed = a.seed;
  opts.schedule = Schedule{a.lr, a.drop_start, a.half_every};
  opts.patch = a.patch;
  opts.augment = !a.no_augment;
  opts.max_steps = a.max_steps;
  opts.checkpoint_every = a.checkpoint_every;

  std::unique_ptr<Trainer> trainer;
  auto save = [&] {
    Checkpoint ck = make_checkpoint(model, &trainer->optimizer(),
                                    {{"step", std::to_string(trainer->steps_done())},
                                     {"epoch", std::to_string(trainer->epochs_done())},
                                     {"seed", std::to_string(a.seed)},
                                     {"loss", std::string(loss_name(trainer->loss()))}});
    save_checkpoint(ckpt_dir, ck);
  };
  opts.on_checkpoint = [&](std::size_t) { save(); };
  trainer = std::make_unique<Trainer>(model, opts);

  std::ios::openmode mode = std::ios::trunc;
  if (resume) {
    restore(model, *resume);
    restore(trainer->optimizer(), model, *resume);
    auto meta_size = [&](const char* key) {
      const std::string* v = resume->meta_value(key);
      return v ? static_cast<std::size_t>(std::stoull(*v)) : std::size_t{0};
    };
    trainer->set_progress(meta_size("step"), meta_size("epoch"));
    if (fs::exists(trace_path)) mode = std::ios::app;
  }

  std::ofstream trace(trace_path, mode);
  if (!trace) throw IoError("cannot write " + trace_path.string());
  if (mode == std::ios::trunc) trace << "step,epoch,lr,loss\n";
  trace.precision(17);

  std::size_t written = 0;
  auto flush_trace = [&] {
    for (; written < trainer->trace().size(); ++written) {
      const auto& r = trainer->trace()[written];
      trace << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    }
    trace.flush();
  };
  try {
    trainer->run(data);
  } catch (const TrainingError&) {
    flush_trace();
    throw;
  }
  flush_trace();
  save();
  const auto& t = trainer->trace();
  std::cout << "trained " << t.size() << " steps on " << data.size() << " sequences";
  if (!t.empty()) std::cout << ", final loss " << t.back().loss;
  std::cout << "\ncheckpoint: " << ckpt_dir.string() << "\ntrace: " << trace_path.string() << '\n';
  return 0;
}

struct UpscalerArgs {
  std::string checkpoint;
  bool bicubic = false;
  std::size_t scale = 4;
  std::size_t tile = 48;
  std::size_t overlap = 8;
};

struct LoadedUpscaler {
  std::unique_ptr<DnlnModel> model;
  std::unique_ptr<Upscaler> up;
};

LoadedUpscaler make_upscaler(const UpscalerArgs& a) {
  LoadedUpscaler l;
  if (a.bicubic) {
    l.up = std::make_unique<BicubicUpscaler>(a.scale);
  } else {
    if (a.checkpoint.empty()) throw std::invalid_argument("either --checkpoint or --bicubic is required");
    l.model = std::make_unique<DnlnModel>(model_from_checkpoint(load_checkpoint(a.checkpoint)));
    l.up = std::make_unique<ModelUpscaler>(*l.model, a.tile, a.overlap);
  }
  return l;
}

void add_upscaler_options(CLI::App* cmd, UpscalerArgs& a) {
  auto* ck = cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint directory");
  auto* bi = cmd->add_flag("--bicubic", a.bicubic, "Use cubic upscaling instead of a model");
  ck->excludes(bi);
  cmd->add_option("--scale", a.scale, "Scale for --bicubic")->capture_default_str();
  cmd->add_option("--tile", a.tile, "LR tile size for model inference (0: whole frame)")->capture_default_str();
  cmd->add_option("--overlap", a.overlap, "LR context pixels per tile side")->capture_default_str();
}

struct EvalArgs {
  UpscalerArgs up;
  std::string data;
  std::string lr_source = "degrade";
  std::size_t exclude = 2;
  std::size_t border_crop = 0;
  std::string csv;
};

int run_eval(const EvalArgs& a) {
  auto l = make_upscaler(a.up);
  EvalProtocol proto{a.exclude, a.border_crop};
  const LrSource src = a.lr_source == "precomputed" ? LrSource::Precomputed : LrSource::Degrade;
  const fs::path root = a.data;
  const auto clips = clip_dirs(root);
  const bool single = clips.size() == 1 && clips.front() == root;
  std::vector<ClipReport> reports;
  for (const auto& c : clips) {
    const fs::path lr = single ? lr_root(root) : lr_root(root) / c.filename();
    reports.push_back(eval_clip(*l.up, c, proto, src, lr));
  }
  if (!a.csv.empty()) {
    std::ofstream os(a.csv);
    if (!os) throw IoError("cannot write " + a.csv);
    write_csv(os, reports);
  }
  write_summary(std::cout, reports, l.up->name());
  return 0;
}

int run_infer(const UpscalerArgs& up, const std::string& input, const std::string& out) {
  auto l = make_upscaler(up);
  const std::size_t n = infer_clip(*l.up, input, out);
  std::cout << "wrote " << n << " frames to " << out << '\n';
  return 0;
}

int run_gradcheck_cmd(const std::string& component, std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_gradcheck(component, seed)) {
    std::cout << (r.pass() ? "PASS " : "FAIL ") << r.name << "  max_rel_err=" << r.max_error
              << " tol=" << r.tolerance << " probes=" << r.checked << " worst=" << r.worst << '\n';
    ok = ok && r.pass();
  }
  return ok ? 0 : kValidation;
}

int run_degrade(const std::string& input, const std::string& out, std::size_t scale) {
  const auto files = list_frames(input);
  fs::create_directories(out);
  for (const auto& f : files) write_png(fs::path(out) / f.filename(), degrade(mod_crop(read_png(f), scale), scale));
  std::cout << "wrote " << files.size() << " frames to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DNLN video super-resolution"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--preset", ta.preset, "paper or desk")->capture_default_str();
  train->add_option("--config", ta.config, "key=value config file (replaces the preset)");
  train->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
  auto* data = train->add_option("--data", ta.data, "Directory of HR clips");
  auto* synth = train->add_flag("--synthetic", ta.synthetic, "Train on synthetic translated textures");
  data->excludes(synth);
  train->add_option("--synthetic-count", ta.synth_count, "Synthetic sequences")->capture_default_str();
  train->add_option("--synthetic-size", ta.synth_size, "Synthetic LR extent")->capture_default_str();
  train->add_option("--synthetic-shift", ta.synth_shift, "Max synthetic velocity (HR px/frame)")->capture_default_str();
  train->add_option("--epochs", ta.epochs, "Epoch budget")->capture_default_str();
  train->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  train->add_option("--loss", ta.loss, "l1 or l2")->capture_default_str();
  train->add_option("--seed", ta.seed, "Master seed")->capture_default_str();
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--lr", ta.lr, "Base learning rate")->capture_default_str();
  train->add_option("--drop-start", ta.drop_start, "Epoch of the first halving")->capture_default_str();
  train->add_option("--half-every", ta.half_every, "Epochs between halvings")->capture_default_str();
  train->add_option("--patch", ta.patch, "LR training crop size")->capture_default_str();
  train->add_flag("--no-augment", ta.no_augment, "Disable flips and rotations");
  train->add_option("--max-steps", ta.max_steps, "Step budget (0: epochs only)")->capture_default_str();
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint cadence in steps")->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score clips with PSNR/SSIM on Y");
  add_upscaler_options(eval, ea.up);
  eval->add_option("--data", ea.data, "Clip directory, or a directory of clip directories")->required();
  eval->add_option("--lr-source", ea.lr_source, "degrade or precomputed (<data>_lr/<clip>)")
      ->check(CLI::IsMember({"degrade", "precomputed"}))
      ->capture_default_str();
  eval->add_option("--exclude", ea.exclude, "Frames skipped at each clip end")->capture_default_str();
  eval->add_option("--border-crop", ea.border_crop, "HR border pixels ignored")->capture_default_str();
  eval->add_option("--csv", ea.csv, "Per-frame CSV report");

  UpscalerArgs ia;
  std::string infer_in, infer_out;
  auto* infer = app.add_subcommand("infer", "Super-resolve a clip of LR frames");
  add_upscaler_options(infer, ia);
  infer->add_option("--input", infer_in, "LR frame directory")->required();
  infer->add_option("--out", infer_out, "Output directory")->required();

  std::string component = "all";
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("component", component, "all, or one of the listed components")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();

  std::string deg_in, deg_out;
  std::size_t deg_scale = 4;
  auto* deg = app.add_subcommand("degrade", "Write cubic-downscaled LR frames");
  deg->add_option("--input", deg_in, "HR frame directory")->required();
  deg->add_option("--out", deg_out, "Output directory")->required();
  deg->add_option("--scale", deg_scale, "Downscale factor")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidation;
  }

  try {
    if (*train) {
      if (!ta.synthetic && ta.data.empty()) throw std::invalid_argument("train needs --data or --synthetic");
      return run_train(ta);
    }
    if (*eval) return run_eval(ea);
    if (*infer) return run_infer(ia, infer_in, infer_out);
    if (*gc) return run_gradcheck_cmd(component, gc_seed);
    if (*deg) return run_degrade(deg_in, deg_out, deg_scale);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return 0;
}
