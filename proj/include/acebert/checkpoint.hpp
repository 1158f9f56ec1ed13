#pragma once

// Binary checkpoint: "ACKP" magic, u32 format version, the EncoderConfig,
// then tagged sections of named float blobs. Section "PARM" holds model
// parameters, "XTRC" the frozen patch feature extractor. All integers and
// floats little-endian.

#include <filesystem>
#include <optional>

#include "acebert/encoder.hpp"
#include "acebert/vision.hpp"

namespace acebert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderConfig config;
  ModelParams<float> params;
  std::optional<vision::PatchFeatureExtractor> extractor;
};

void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config, const ModelParams<float>& params,
                     const vision::PatchFeatureExtractor* extractor = nullptr);

// Throws IoError when the file is missing, FormatError on a bad header,
// truncation, or any parameter whose shape disagrees with the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace acebert
