#pragma once

#include <filesystem>

#include "epiguide/dataio.hpp"
#include "epiguide/minimodel.hpp"

namespace epiguide {

// Archive layout: "config" (u8 tensor holding architecture JSON), then one f32
// tensor per parameter under RerankerParams::tensor_name. Training-only settings
// (loss, lambda, seed) are not stored, so the file depends on the weights and
// architecture alone.
TensorArchive checkpoint_archive(const RerankerParams& params);
RerankerParams params_from_archive(const TensorArchive& archive);

void save_checkpoint(const std::filesystem::path& path, const RerankerParams& params);
RerankerParams load_checkpoint(const std::filesystem::path& path);

// Weights rounded through f32, as they would be after a save/load cycle.
RerankerParams round_to_f32(const RerankerParams& params);

}  // namespace epiguide
