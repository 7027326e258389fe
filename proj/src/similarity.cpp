#include "mmices/similarity.hpp"
#include "mmices/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmices {

namespace {

template <typename T>
double cosine_impl(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) {
        std::ostringstream os;
        os << "cosine: length mismatch (" << a.size() << " vs " << b.size() << ")";
        throw Error(os.str());
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    if (na == 0.0 || nb == 0.0)
        throw Error("cosine: zero vector");
    // rounding may push |result| a few ulps past 1; the contract is [-1, 1]
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline bool ranks_before(const ScoredIndex& a, const ScoredIndex& b) {
    if (a.score != b.score)
        return a.score > b.score;
    return a.index < b.index;
}

std::vector<ScoredIndex> score_rows(std::span<const float> query, const EmbeddingMatrix& m,
                                    std::span<const std::size_t> candidates, bool parallel) {
    if (query.size() != m.dim) {
        std::ostringstream os;
        os << "score_all: query dim " << query.size() << " != matrix dim " << m.dim;
        throw Error(os.str());
    }
    for (std::size_t row : candidates) {
        if (row >= m.n_rows)
            throw Error("score_all: candidate row out of range");
    }
    const std::size_t n = candidates.empty() ? m.n_rows : candidates.size();
    std::vector<ScoredIndex> out(n);
    std::vector<std::string> errors(n);

    // Each slot is written by exactly one iteration; per-row math is serial,
    // so the result is identical for any thread count. Exceptions must not
    // escape the parallel region; they are collected and rethrown in index
    // order below.
    auto body = [&](std::size_t i) {
        std::size_t row = candidates.empty() ? i : candidates[i];
        try {
            out[i] = ScoredIndex{row, cosine(query, m.row(row))};
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    };

    if (parallel) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < (long long)n; ++i)
            body(std::size_t(i));
    } else {
        for (std::size_t i = 0; i < n; ++i)
            body(i);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!errors[i].empty())
            throw Error("score_all: row " + std::to_string(candidates.empty() ? i : candidates[i]) +
                        ": " + errors[i]);
    }
    return out;
}

} // namespace

double cosine(std::span<const float> a, std::span<const float> b) {
    return cosine_impl(a, b);
}

double cosine(std::span<const double> a, std::span<const double> b) {
    return cosine_impl(a, b);
}

std::vector<ScoredIndex> score_all(std::span<const float> query, const EmbeddingMatrix& m,
                                   std::span<const std::size_t> candidates) {
    return score_rows(query, m, candidates, true);
}

std::vector<ScoredIndex> score_all_serial(std::span<const float> query, const EmbeddingMatrix& m,
                                          std::span<const std::size_t> candidates) {
    return score_rows(query, m, candidates, false);
}

std::vector<ScoredIndex> top_k(std::span<const ScoredIndex> scores, std::size_t k) {
    if (k > scores.size()) {
        std::ostringstream os;
        os << "top_k: k=" << k << " exceeds " << scores.size() << " scored candidates";
        throw Error(os.str());
    }
    std::vector<ScoredIndex> out(scores.begin(), scores.end());
    std::partial_sort(out.begin(), out.begin() + std::ptrdiff_t(k), out.end(), ranks_before);
    out.resize(k);
    return out;
}

} // namespace mmices
