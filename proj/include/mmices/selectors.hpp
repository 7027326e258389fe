#pragma once

#include "mmices/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mmices {

enum class SelectionMethod { random, rices, text_only, text_image, mmices };

const char* to_string(SelectionMethod m);
SelectionMethod selection_method_from_string(const std::string& s);

struct SelectionConfig {
    SelectionMethod method = SelectionMethod::mmices;
    std::size_t shots = 4;       // N demonstrations per query
    std::size_t prefilter = 200; // K, first-stage candidate count (mmices / text_image)
    std::uint64_t seed = 0;      // random method only
    bool exclude_self = true;    // never select the query's own record
};

/// Ordered demonstrations for one query. Score lists, when present, are
/// aligned to demo_ids; stage2 is the stage that produced the final ranking.
struct SelectionResult {
    std::string query_id;
    SelectionMethod method = SelectionMethod::random;
    std::vector<std::string> demo_ids;
    std::vector<double> stage1_scores; // empty when not applicable
    std::vector<double> stage2_scores;
};

/// Uniform sampling without replacement from a PRNG derived from
/// (cfg.seed, query id), so each query's draw is reproducible and
/// independent of batch composition.
SelectionResult select_random(const Record& q, const BoundSet& support,
                              const SelectionConfig& cfg);

/// Visual top-N (image-similarity retrieval).
SelectionResult select_rices(const Record& q, const BoundSet& support, const SelectionConfig& cfg);

/// Textual top-N.
SelectionResult select_text_only(const Record& q, const BoundSet& support,
                                 const SelectionConfig& cfg);

/// Visual top-K prefilter, then textual top-N rerank within the candidates.
SelectionResult select_mmices(const Record& q, const BoundSet& support, const SelectionConfig& cfg);

/// Textual top-K prefilter, then visual top-N rerank.
SelectionResult select_text_image(const Record& q, const BoundSet& support,
                                  const SelectionConfig& cfg);

/// Dispatch on cfg.method. The query's embeddings are resolved by ID from
/// the support set's matrices.
SelectionResult select_one(const Record& q, const BoundSet& support, const SelectionConfig& cfg);

/// One result per query, in query order, identical to per-query calls.
/// Fans out across queries with OpenMP; output is independent of thread
/// count. Per-query failures are aggregated into one error naming each
/// failing query. Query embeddings come from `queries`' matrices.
std::vector<SelectionResult> select_batch(const BoundSet& queries, const BoundSet& support,
                                          const SelectionConfig& cfg);

} // namespace mmices
