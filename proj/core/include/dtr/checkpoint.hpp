#pragma once

// Versioned binary tensor archive shared by every model checkpoint.
//
// Layout: "DTRCKPT\0" | u32 version | u64 header length | header JSON |
// for each tensor listed in the header: rows*cols little-endian doubles |
// u64 FNV-1a checksum of all preceding bytes.
// A `<file>.json` manifest with the header is written next to the archive.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "dtr/autograd.hpp"

namespace dtr::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorArchive {
  std::string kind;
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
/// Throws std::runtime_error on missing files, bad magic, version mismatch
/// (naming both versions), truncation or checksum failure.
TensorArchive read_archive(const std::filesystem::path& path);

void store_parameters(TensorArchive& archive, const ParameterStore& params, const std::string& prefix = "param/");
/// Requires an exact name/shape match between archive and store.
void restore_parameters(const TensorArchive& archive, ParameterStore& params, const std::string& prefix = "param/");

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace dtr::nn
