#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsal/datapipe.hpp"
#include "tsal/encoders.hpp"
#include "tsal/model.hpp"
#include "tsal/train.hpp"

namespace tsal {

/// Everything a command needs: model, encoder, pipeline and training
/// settings plus the run seed. Keys are "section.field", e.g.
/// "model.heads" or "encoder.patch"; "seed" stands alone.
struct RunConfig {
  ModelConfig model;
  EncoderConfig encoder;
  PipelineConfig pipeline;
  TrainOptions train;
  std::uint64_t seed = 0;

  /// Throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  /// "key=value" form.
  void set(const std::string& assignment);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  /// Reads key=value lines; '#' starts a comment, blank lines are skipped.
  void apply_file(const std::filesystem::path& path);
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace tsal
