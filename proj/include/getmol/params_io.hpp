#pragma once

#include <map>
#include <string>

#include "getmol/model.hpp"

namespace getmol {

/// Binary checkpoint container: 8-byte magic, a little-endian u64 JSON index
/// length, the JSON index (model config plus per-record name/shape/offset),
/// then the concatenated little-endian f64 payload. See docs/formats.md.
/// `meta` lands in the index under "meta" (e.g. target standardization).
void save_model(const GetModel& model, const std::string& path,
                const std::map<std::string, double>& meta = {});

/// Rebuilds the model skeleton from the stored config and fills every
/// tensor by name. Missing or shape-mismatched records are errors.
GetModel load_model(const std::string& path, std::map<std::string, double>* meta = nullptr);

/// Writes `contents` to `path` via a temporary file and atomic rename.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

}  // namespace getmol
