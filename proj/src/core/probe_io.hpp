#pragma once

// TrainedProbe files: "SSCP" magic, u64 little-endian JSON length, the JSON
// header (dims, config, training log, codelength components), then the
// parameters as little-endian f32 in the order mix_logits, weight_mean,
// weight_logvar (row-major dim x classes), scale_mean, scale_logvar.

#include <filesystem>

#include "probe.hpp"

namespace ssch::probe {

inline constexpr int kProbeSchemaVersion = 1;

void save_probe(const TrainedProbe& probe, const std::filesystem::path& path);
TrainedProbe load_probe(const std::filesystem::path& path);

// Rounds every parameter through f32, the precision of saved probes.
void round_to_storage(ProbeParams& params);

}  // namespace ssch::probe
