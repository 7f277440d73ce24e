#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qada/domain_generator.hpp"
#include "qada/model.hpp"
#include "qada/pipeline.hpp"

namespace qada {

/// Every knob of a command-line run as one flat key=value namespace.
struct RunConfig {
  ModelConfig model;  // vocab_size is derived from the data, not configured
  AdaptConfig adapt;
  GenConfig gen;
  double dev_fraction = 0.1;
  std::size_t vocab_min_count = 1;
  std::string source, source_dev, target, target_dev, lexicon, data, checkpoint, out_dir;
  std::size_t inspect_examples = 3;
  bool dump_features = false;

  static const std::vector<std::string>& keys();

  /// Throws ConfigError for an unknown key or an unparsable value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Lines of `key = value`; blank lines and '#' comments are ignored;
  /// string values may be double-quoted.
  void apply_text(const std::string& text);
  void apply_file(const std::filesystem::path& path);
  /// QADA_SEED, if set, overrides the seed.
  void apply_env();

  /// Range checks of every numeric field.
  void validate() const;

  /// Resolved config in the file format accepted by apply_text.
  std::string dump() const;
};

}  // namespace qada
