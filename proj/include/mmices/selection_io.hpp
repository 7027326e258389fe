#pragma once

#include "mmices/selectors.hpp"

#include <filesystem>

namespace mmices {

/// Selection JSONL, one result per line:
/// {"query_id", "method", "shots", "prefilter"?, "seed"?, "demo_ids",
///  "stage1_scores"?, "stage2_scores"?}
/// prefilter appears for two-stage methods, seed for random.
void write_selections(const std::vector<SelectionResult>& results, const SelectionConfig& cfg,
                      const std::filesystem::path& path);

std::vector<SelectionResult> load_selections(const std::filesystem::path& path);

} // namespace mmices
