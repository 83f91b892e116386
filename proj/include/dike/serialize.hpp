#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dike/tensor.hpp"

namespace dike {

// Versioned binary tensor container: magic bytes, little-endian shape header,
// little-endian IEEE-754 64-bit payload. Checkpoints store a named bundle.

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_bundle(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_bundle(const std::filesystem::path& path);

/// FNV-1a over raw bytes; used for config and parameter fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t length, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_str(const std::string& s);
std::uint64_t tensor_fingerprint(const Tensor& t, std::uint64_t seed);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace dike
