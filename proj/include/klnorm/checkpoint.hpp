#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "klnorm/model.hpp"

namespace klnorm {

// Binary checkpoint container:
//   magic "KLN1", u32 version,
//   spec block (u32 d_in, u32 K, u32 n_hidden, u32 hidden[], u8 norm_kind,
//               u32 groups, u32 n_classes),
//   encoder then classifier parameter arrays (f64, little-endian, weight
//   before bias, declaration order),
//   norm state block (per-kind parameters, then moving statistics and
//   f64 alpha/eps where the layer tracks them).
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace klnorm
