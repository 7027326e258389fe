#pragma once

#include "mmices/embedding_store.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace mmices {

struct ScoredIndex {
    std::size_t index = 0;
    double score = 0.0;
};

/// Cosine similarity with float64 accumulation in fixed left-to-right order,
/// so results do not depend on platform reassociation. Throws on length
/// mismatch or an all-zero operand.
double cosine(std::span<const float> a, std::span<const float> b);
double cosine(std::span<const double> a, std::span<const double> b);

/// Scores `query` against every candidate row (all rows when `candidates` is
/// empty). Output order matches candidate order and `index` carries the
/// matrix row. OpenMP-parallel across rows; per-row arithmetic is serial, so
/// results are identical for any thread count.
std::vector<ScoredIndex> score_all(std::span<const float> query, const EmbeddingMatrix& m,
                                   std::span<const std::size_t> candidates = {});

/// Serial reference for score_all, kept for tests and the benchmark.
std::vector<ScoredIndex> score_all_serial(std::span<const float> query, const EmbeddingMatrix& m,
                                          std::span<const std::size_t> candidates = {});

/// Exactly k items sorted by (score desc, index asc); deterministic,
/// equivalent to taking the first k of a stable full sort. Throws when
/// k > |scores|.
std::vector<ScoredIndex> top_k(std::span<const ScoredIndex> scores, std::size_t k);

} // namespace mmices
