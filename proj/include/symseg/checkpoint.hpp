#pragma once

#include <string>

#include <json.hpp>

#include "symseg/nn.hpp"

namespace symseg::ckpt {

/// Single-file archive: 8-byte magic "SYMSEGCK", u32 version, u64 header
/// length, JSON header (tensor table with offsets), then raw float32
/// little-endian payloads.
void save(const std::string& path, const nn::Module& module, nlohmann::json header);

nlohmann::json read_header(const std::string& path);

/// Fills the module's parameters from the archive; names and shapes must
/// match exactly.
void load_into(const std::string& path, nn::Module& module);

}  // namespace symseg::ckpt
