#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <utility>
#include <vector>

#include "advcloak/tensor.hpp"

namespace advcloak {

using NamedTensorRefs = std::vector<std::pair<std::string, Tensor*>>;
using NamedTensorViews = std::vector<std::pair<std::string, const Tensor*>>;

// Content hash over names, dims and raw payloads, order-sensitive.
std::uint64_t tensors_hash(const NamedTensorViews& tensors);

// Binary archive: magic "ACAR", version, kind tag, JSON metadata, named
// tensor payloads, trailing content hash verified on load.
void save_archive(const std::string& path, const std::string& kind, const nlohmann::json& meta,
                  const NamedTensorViews& tensors);

// Fills `tensors` by name (all must be present, shapes must match).
// Throws IoError on wrong magic/kind/version or payload corruption.
nlohmann::json load_archive(const std::string& path, const std::string& expected_kind,
                            const NamedTensorRefs& tensors);

// Reads just the metadata block (for provenance checks).
nlohmann::json peek_archive(const std::string& path, std::string* kind_out = nullptr);

std::uint64_t file_hash(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace advcloak
