#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dnln/model.hpp"
#include "dnln/train.hpp"

namespace dnln {

/// On-disk layout: a directory with `manifest.txt` and `tensors.bin`.
///
/// manifest.txt
///   dnln-checkpoint 1
///   [config]   key=value lines (ModelConfig::to_text)
///   [meta]     key=value lines, kept in insertion order
///   [tensors]  `name rank extents... offset` per record
///
/// Each blob in tensors.bin is a u32 rank, u32 extents, then the values as
/// little-endian f64. Offsets point at the rank word.
struct TensorRecord {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<TensorRecord> tensors;

  const std::string* meta_value(std::string_view key) const;
  void set_meta(std::string key, std::string value);
  const Tensor* tensor(std::string_view name) const;
};

inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kTensorFile = "tensors.bin";

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
/// Throws IoError for unreadable files and std::invalid_argument for
/// malformed content, both naming the offending path.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Parameters under their registry names, plus Adam moments as `adam.m.<name>`
/// and `adam.v.<name>` when an optimizer is given.
Checkpoint make_checkpoint(const DnlnModel& model, const Adam* adam,
                           std::vector<std::pair<std::string, std::string>> meta = {});

/// Copies parameter values into `model`. Every parameter must appear exactly
/// once with a matching shape.
void restore(DnlnModel& model, const Checkpoint& ckpt);
/// Restores moments and the step counter; absent moments leave `adam` alone.
void restore(Adam& adam, const DnlnModel& model, const Checkpoint& ckpt);

DnlnModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dnln
