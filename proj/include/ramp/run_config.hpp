#pragma once
// Merged configuration for one CLI run. The on-disk form is a flat INI file
// with one section per component ([decoder], [ramp], [corpus], [pretrain],
// [finetune], [adam], [eval], [seeds], [paths]); keys are the field names.
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ramp/checkpoint.hpp"
#include "ramp/corpus.hpp"
#include "ramp/decoder.hpp"
#include "ramp/engine.hpp"
#include "ramp/training.hpp"

namespace ramp {

struct Seeds {
  std::uint64_t corpus = 1;
  std::uint64_t init = 7;
  std::uint64_t pretrain = 3;
  std::uint64_t finetune = 11;
  std::uint64_t eval = 99;
};

struct EvalSettings {
  std::vector<std::uint64_t> shuffle_seeds{1, 2, 3};
  std::size_t scale_samples = 3;
  std::size_t scale_reps = 3;
};

struct PathSettings {
  std::string graph;
  std::string split;
  std::string checkpoint;
  std::string out = "out";
};

struct RunConfig {
  DecoderConfig decoder;
  RampConfig ramp;
  CorpusSpec corpus;
  TrainConfig pretrain;
  TrainConfig finetune;
  AdamConfig adam;
  EvalSettings eval;
  Seeds seeds;
  PathSettings paths;

  RunConfig();

  /// Every "section.key" name, in dump order.
  static std::vector<std::string> keys();
  /// Assigns one value from its text form. Unknown keys and malformed values
  /// raise config errors.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  void validate() const;

  /// Canonical INI text: every key, fixed order, round-trip-exact numbers.
  std::string to_ini() const;
  /// Hex FNV-1a of the canonical text without the [paths] section, so the
  /// same experiment run into another directory keeps its fingerprint.
  std::string fingerprint() const;
};

/// Applies "section.key" = value pairs from INI text (later lines win).
void apply_ini(RunConfig& cfg, const std::string& text, const std::string& source = "<memory>");
void apply_ini_file(RunConfig& cfg, const std::filesystem::path& path);

/// Ramp settings as "ramp.*" checkpoint metadata and back.
void put_ramp_config(std::map<std::string, std::string>& meta, const RampConfig& ramp);
RampConfig get_ramp_config(const std::map<std::string, std::string>& meta);

/// Hex 64-bit FNV-1a.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace ramp
