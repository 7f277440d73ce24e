#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "qada/model.hpp"
#include "qada/text.hpp"

namespace qada {

/// Everything needed to resume: model config and parameters, batch-norm
/// running statistics, the vocabulary, and an Rng state string.
struct Checkpoint {
  QaModel model;
  Vocab vocab;
  std::string rng_state;
  nlohmann::json meta = nlohmann::json::object();
};

/// JSON text of a checkpoint. Doubles are written in shortest round-trip
/// form, so loading restores every value bit for bit.
std::string checkpoint_json(const QaModel& model, const Vocab& vocab, const std::string& rng_state,
                            const nlohmann::json& meta = nlohmann::json::object());

void save_checkpoint(const std::filesystem::path& path, const QaModel& model, const Vocab& vocab,
                     const std::string& rng_state, const nlohmann::json& meta = nlohmann::json::object());

/// Throws DataError on unreadable or malformed files.
Checkpoint parse_checkpoint(const std::string& text);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qada
