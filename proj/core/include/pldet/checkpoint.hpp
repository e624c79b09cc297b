#pragma once

#include <string>

#include "pldet/trainer.hpp"

namespace pldet {

// Checkpoint layout: 8-byte magic, u64 LE header length, JSON header (configs,
// hyperparams, counters, RNG state, parameter names/shapes), then raw 64-bit
// little-endian parameter data in header order. save(load(f)) is byte-exact.
// Momentum buffers and the FSWA ring are not part of the format.
void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

}  // namespace pldet
