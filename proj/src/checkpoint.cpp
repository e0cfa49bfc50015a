#include "dnln/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>

#include "dnln/image.hpp"

namespace dnln {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "dnln-checkpoint 1";

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_le(out, std::bit_cast<std::uint64_t>(d)); }
double get_f64(const std::string& in, std::size_t at) { return std::bit_cast<double>(get_le<std::uint64_t>(in, at)); }

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  if (is.bad()) throw IoError("read failed: " + p.string());
  return ss.str();
}

void write_file(const fs::path& p, const std::string& data) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

std::size_t to_size(const std::string& tok, const fs::path& where) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw std::invalid_argument(where.string() + ": expected an integer, got '" + tok + "'");
  }
  return v;
}

void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n=") != std::string::npos) {
    throw std::invalid_argument(std::string("checkpoint: invalid ") + what + " '" + s + "'");
  }
}

}  // namespace

const std::string* Checkpoint::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void Checkpoint::set_meta(std::string key, std::string value) {
  for (auto& [k, v] : meta)
    if (k == key) {
      v = std::move(value);
      return;
    }
  meta.emplace_back(std::move(key), std::move(value));
}

const Tensor* Checkpoint::tensor(std::string_view name) const {
  for (const auto& r : tensors)
    if (r.name == name) return &r.value;
  return nullptr;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::string manifest = std::string(kMagic) + "\n[config]\n" + ckpt.config.to_text() + "[meta]\n";
  for (const auto& [k, v] : ckpt.meta) {
    check_token(k, "meta key");
    if (v.find('\n') != std::string::npos) throw std::invalid_argument("checkpoint: meta value for " + k + " spans lines");
    manifest += k + "=" + v + "\n";
  }
  manifest += "[tensors]\n";
  std::string blob;
  std::set<std::string> seen;
  for (const auto& r : ckpt.tensors) {
    check_token(r.name, "tensor name");
    if (!seen.insert(r.name).second) throw std::invalid_argument("checkpoint: tensor " + r.name + " listed twice");
    manifest += r.name + " " + std::to_string(r.value.rank());
    for (auto e : r.value.shape()) manifest += " " + std::to_string(e);
    manifest += " " + std::to_string(blob.size()) + "\n";
    put_le(blob, static_cast<std::uint32_t>(r.value.rank()));
    for (auto e : r.value.shape()) put_le(blob, static_cast<std::uint32_t>(e));
    for (double d : r.value.data()) put_f64(blob, d);
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  write_file(dir / kTensorFile, blob);
  write_file(dir / kManifestFile, manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
  const fs::path mpath = dir / kManifestFile, bpath = dir / kTensorFile;
  const std::string manifest = read_file(mpath);
  const std::string blob = read_file(bpath);

  std::istringstream is(manifest);
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw std::invalid_argument(mpath.string() + ": not a dnln checkpoint");
  enum { None, Config, Meta, Tensors } section = None;
  std::string config_text;
  Checkpoint ck;
  while (std::getline(is, line)) {
    if (line == "[config]") section = Config;
    else if (line == "[meta]") section = Meta;
    else if (line == "[tensors]") section = Tensors;
    else if (line.empty()) continue;
    else if (section == Config) config_text += line + "\n";
    else if (section == Meta) {
      auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument(mpath.string() + ": bad meta line '" + line + "'");
      ck.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    } else if (section == Tensors) {
      std::istringstream ls(line);
      std::string name, tok;
      std::vector<std::string> toks;
      ls >> name;
      while (ls >> tok) toks.push_back(tok);
      if (toks.size() < 2) throw std::invalid_argument(mpath.string() + ": bad tensor line '" + line + "'");
      const std::size_t rank = to_size(toks[0], mpath);
      if (toks.size() != rank + 2) throw std::invalid_argument(mpath.string() + ": rank mismatch for " + name);
      Shape shape;
      for (std::size_t i = 0; i < rank; ++i) shape.push_back(to_size(toks[1 + i], mpath));
      const std::size_t off = to_size(toks.back(), mpath);
      const std::size_t n = shape_numel(shape);
      const std::size_t header = 4 * (rank + 1);
      if (off + header + 8 * n > blob.size()) throw std::invalid_argument(bpath.string() + ": truncated at " + name);
      if (get_le<std::uint32_t>(blob, off) != rank) throw std::invalid_argument(bpath.string() + ": rank mismatch at " + name);
      for (std::size_t i = 0; i < rank; ++i)
        if (get_le<std::uint32_t>(blob, off + 4 * (i + 1)) != shape[i]) {
          throw std::invalid_argument(bpath.string() + ": extent mismatch at " + name);
        }
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(blob, off + header + 8 * i);
      if (ck.tensor(name)) throw std::invalid_argument(mpath.string() + ": tensor " + name + " listed twice");
      ck.tensors.push_back({name, Tensor(shape, std::move(data))});
    } else {
      throw std::invalid_argument(mpath.string() + ": content before first section");
    }
  }
  try {
    ck.config = ModelConfig::from_text(config_text);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(mpath.string() + ": " + e.what());
  }
  return ck;
}

Checkpoint make_checkpoint(const DnlnModel& model, const Adam* adam,
                           std::vector<std::pair<std::string, std::string>> meta) {
  Checkpoint ck;
  ck.config = model.config();
  ck.meta = std::move(meta);
  for (const auto& [name, t] : model.parameters()) ck.tensors.push_back({name, t.detach()});
  if (adam) {
    const auto& s = adam->state();
    ck.set_meta("adam.step", std::to_string(s.step));
    std::size_t i = 0;
    for (const auto& [name, t] : model.parameters()) {
      ck.tensors.push_back({"adam.m." + name, Tensor(t.shape(), s.m[i])});
      ck.tensors.push_back({"adam.v." + name, Tensor(t.shape(), s.v[i])});
      ++i;
    }
  }
  return ck;
}

void restore(DnlnModel& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config())) throw std::invalid_argument("checkpoint config does not match the model");
  std::set<std::string> seen;
  for (const auto& r : ckpt.tensors) {
    if (!seen.insert(r.name).second) throw std::invalid_argument("checkpoint lists " + r.name + " twice");
    if (r.name.rfind("adam.", 0) != 0 && !model.parameters().find(r.name)) {
      throw std::invalid_argument("checkpoint holds unknown parameter " + r.name);
    }
  }
  // validate everything before touching the model
  for (const auto& [name, t] : model.parameters()) {
    const Tensor* src = ckpt.tensor(name);
    if (!src) throw std::invalid_argument("checkpoint is missing parameter " + name);
    if (src->shape() != t.shape()) {
      throw std::invalid_argument("checkpoint parameter " + name + " has shape " + shape_str(src->shape()) +
                                  ", model expects " + shape_str(t.shape()));
    }
  }
  for (auto& [name, t] : model.parameters()) {
    auto s = ckpt.tensor(name)->data();
    std::copy(s.begin(), s.end(), t.mutable_data().begin());
  }
}

void restore(Adam& adam, const DnlnModel& model, const Checkpoint& ckpt) {
  const std::string* step = ckpt.meta_value("adam.step");
  if (!step) return;
  auto& s = adam.state();
  std::size_t i = 0;
  for (const auto& [name, t] : model.parameters()) {
    const Tensor* m = ckpt.tensor("adam.m." + name);
    const Tensor* v = ckpt.tensor("adam.v." + name);
    if (!m || !v || m->shape() != t.shape() || v->shape() != t.shape()) {
      throw std::invalid_argument("checkpoint optimizer state incomplete at " + name);
    }
    s.m[i].assign(m->data().begin(), m->data().end());
    s.v[i].assign(v->data().begin(), v->data().end());
    ++i;
  }
  s.step = to_size(*step, kManifestFile);
}

DnlnModel model_from_checkpoint(const Checkpoint& ckpt) {
  DnlnModel model(ckpt.config);
  restore(model, ckpt);
  return model;
}

}  // namespace dnln
