#pragma once

// Checkpoint layout:
//
//   nfpf-ckpt v1
//   <parameter count>
//   <name> <rank> <extent_0> ... <extent_{rank-1}>     (one line per parameter)
//   data <total value count>
//   <raw float64 values, little-endian, parameters concatenated in manifest order>

#include <filesystem>
#include <string>
#include <vector>

#include "nfpf/autodiff.hpp"
#include "nfpf/mlp.hpp"

namespace nfpf {

struct ManifestEntry {
    std::string name;
    ad::Shape shape;
};

struct Checkpoint {
    std::vector<ManifestEntry> manifest;
    std::vector<double> values;
};

Checkpoint snapshot(const ParamList& params);
void save_checkpoint(const std::filesystem::path& path, const ParamList& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params`. Names and shapes must match the
/// manifest exactly, in order; mismatches raise DataError.
void load_checkpoint(const Checkpoint& checkpoint, const ParamList& params);
void load_checkpoint(const std::filesystem::path& path, const ParamList& params);

}  // namespace nfpf
