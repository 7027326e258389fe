#include "mmices/selectors.hpp"
#include "mmices/error.hpp"
#include "mmices/rng.hpp"
#include "mmices/similarity.hpp"

#include <algorithm>
#include <optional>
#include <sstream>

namespace mmices {

const char* to_string(SelectionMethod m) {
    switch (m) {
    case SelectionMethod::random: return "random";
    case SelectionMethod::rices: return "rices";
    case SelectionMethod::text_only: return "text_only";
    case SelectionMethod::text_image: return "text_image";
    case SelectionMethod::mmices: return "mmices";
    }
    return "?";
}

SelectionMethod selection_method_from_string(const std::string& s) {
    if (s == "random") return SelectionMethod::random;
    if (s == "rices") return SelectionMethod::rices;
    if (s == "text_only" || s == "text") return SelectionMethod::text_only;
    if (s == "text_image" || s == "text-image") return SelectionMethod::text_image;
    if (s == "mmices") return SelectionMethod::mmices;
    throw Error("unknown selection method: \"" + s + "\"");
}

namespace {

enum class Modality { visual, textual };

// Support-record indices eligible as demonstrations for q.
std::vector<std::size_t> eligible_indices(const Record& q, const BoundSet& support,
                                          const SelectionConfig& cfg) {
    std::vector<std::size_t> out;
    out.reserve(support.size());
    for (std::size_t i = 0; i < support.size(); ++i) {
        if (cfg.exclude_self && support.records[i].id == q.id)
            continue;
        out.push_back(i);
    }
    return out;
}

// The query's embedding for one modality. The textual side of a captioning
// query is the embedding of its proxy text (produced upstream), so the
// record must carry proxy_text for text-stage selection to be meaningful.
std::span<const float> query_vec(const Record& q, const BoundSet& embeddings, Modality mod) {
    const EmbeddingMatrix& m = mod == Modality::visual ? embeddings.visual : embeddings.textual;
    if (mod == Modality::textual && embeddings.task_kind == TaskKind::captioning &&
        !q.proxy_text)
        throw Error("captioning query \"" + q.id + "\" lacks proxy_text for text similarity");
    auto row = m.find(q.id);
    if (!row)
        throw Error(std::string("missing query ") +
                    (mod == Modality::visual ? "visual" : "textual") + " embedding for \"" +
                    q.id + "\"");
    return m.row(*row);
}

// Scores eligible record indices against q; ScoredIndex.index is the support
// RECORD index (ascending input order), so top_k's tie rule resolves to the
// lowest support index.
std::vector<ScoredIndex> score_records(std::span<const float> qv, const BoundSet& support,
                                       Modality mod, const std::vector<std::size_t>& record_idx) {
    const EmbeddingMatrix& m = mod == Modality::visual ? support.visual : support.textual;
    const auto& rows = mod == Modality::visual ? support.visual_rows : support.textual_rows;
    std::vector<std::size_t> matrix_rows(record_idx.size());
    for (std::size_t i = 0; i < record_idx.size(); ++i)
        matrix_rows[i] = rows[record_idx[i]];
    auto scored = score_all(qv, m, matrix_rows);
    for (std::size_t i = 0; i < scored.size(); ++i)
        scored[i].index = record_idx[i];
    return scored;
}

SelectionResult make_result(const Record& q, SelectionMethod method, const BoundSet& support,
                            const std::vector<ScoredIndex>& final_ranked,
                            const std::vector<ScoredIndex>* stage1_by_record) {
    SelectionResult res;
    res.query_id = q.id;
    res.method = method;
    res.demo_ids.reserve(final_ranked.size());
    for (const auto& si : final_ranked)
        res.demo_ids.push_back(support.records[si.index].id);

    if (stage1_by_record) {
        // two-stage method: stage1 score looked up per chosen demo
        res.stage1_scores.reserve(final_ranked.size());
        res.stage2_scores.reserve(final_ranked.size());
        for (const auto& si : final_ranked) {
            auto it = std::find_if(stage1_by_record->begin(), stage1_by_record->end(),
                                   [&](const ScoredIndex& s) { return s.index == si.index; });
            res.stage1_scores.push_back(it->score);
            res.stage2_scores.push_back(si.score);
        }
    } else {
        for (const auto& si : final_ranked)
            res.stage1_scores.push_back(si.score);
    }
    return res;
}

void require_support(const Record& q, std::size_t eligible, std::size_t n) {
    if (eligible < n) {
        std::ostringstream os;
        os << "query \"" << q.id << "\": support too small (" << eligible
           << " eligible demonstrations, " << n << " requested)";
        throw Error(os.str());
    }
}

SelectionResult select_single_stage(const Record& q, std::span<const float> qv,
                                    const BoundSet& support, const SelectionConfig& cfg,
                                    Modality mod, SelectionMethod method) {
    auto eligible = eligible_indices(q, support, cfg);
    require_support(q, eligible.size(), cfg.shots);
    auto scored = score_records(qv, support, mod, eligible);
    auto picked = top_k(scored, cfg.shots);
    return make_result(q, method, support, picked, nullptr);
}

SelectionResult select_two_stage(const Record& q, std::span<const float> qv_stage1,
                                 std::span<const float> qv_stage2, const BoundSet& support,
                                 const SelectionConfig& cfg, Modality stage1_mod,
                                 SelectionMethod method) {
    if (cfg.prefilter < cfg.shots) {
        std::ostringstream os;
        os << "prefilter K=" << cfg.prefilter << " must be >= shots N=" << cfg.shots;
        throw Error(os.str());
    }
    auto eligible = eligible_indices(q, support, cfg);
    require_support(q, eligible.size(), cfg.shots);

    // Stage 1 becomes a no-op when K covers the whole eligible pool.
    std::size_t k = std::min(cfg.prefilter, eligible.size());
    auto stage1_scores = score_records(qv_stage1, support, stage1_mod, eligible);
    auto candidates = top_k(stage1_scores, k);

    // Stage 2 receives candidates in ascending record order so the tie rule
    // stays "lowest support index wins".
    std::vector<std::size_t> candidate_idx;
    candidate_idx.reserve(candidates.size());
    for (const auto& si : candidates)
        candidate_idx.push_back(si.index);
    std::sort(candidate_idx.begin(), candidate_idx.end());

    Modality stage2_mod = stage1_mod == Modality::visual ? Modality::textual : Modality::visual;
    auto stage2_scores = score_records(qv_stage2, support, stage2_mod, candidate_idx);
    auto picked = top_k(stage2_scores, cfg.shots);
    return make_result(q, method, support, picked, &candidates);
}

// Core shared by the per-query API (query embeddings resolved from the
// support matrices) and select_batch (resolved from the query set's own).
SelectionResult select_with(const Record& q, const BoundSet& embedding_source,
                            const BoundSet& support, const SelectionConfig& cfg) {
    switch (cfg.method) {
    case SelectionMethod::random:
        return select_random(q, support, cfg);
    case SelectionMethod::rices:
        return select_single_stage(q, query_vec(q, embedding_source, Modality::visual), support,
                                   cfg, Modality::visual, SelectionMethod::rices);
    case SelectionMethod::text_only:
        return select_single_stage(q, query_vec(q, embedding_source, Modality::textual), support,
                                   cfg, Modality::textual, SelectionMethod::text_only);
    case SelectionMethod::mmices:
        return select_two_stage(q, query_vec(q, embedding_source, Modality::visual),
                                query_vec(q, embedding_source, Modality::textual), support, cfg,
                                Modality::visual, SelectionMethod::mmices);
    case SelectionMethod::text_image:
        return select_two_stage(q, query_vec(q, embedding_source, Modality::textual),
                                query_vec(q, embedding_source, Modality::visual), support, cfg,
                                Modality::textual, SelectionMethod::text_image);
    }
    throw Error("unhandled selection method");
}

} // namespace

SelectionResult select_random(const Record& q, const BoundSet& support,
                              const SelectionConfig& cfg) {
    auto eligible = eligible_indices(q, support, cfg);
    require_support(q, eligible.size(), cfg.shots);

    std::mt19937_64 rng(cfg.seed ^ fnv1a64(q.id));
    // partial Fisher-Yates: first N slots become the sample, in draw order
    for (std::size_t i = 0; i < cfg.shots; ++i) {
        std::size_t j = i + std::size_t(bounded(rng, eligible.size() - i));
        std::swap(eligible[i], eligible[j]);
    }

    SelectionResult res;
    res.query_id = q.id;
    res.method = SelectionMethod::random;
    for (std::size_t i = 0; i < cfg.shots; ++i)
        res.demo_ids.push_back(support.records[eligible[i]].id);
    return res;
}

SelectionResult select_rices(const Record& q, const BoundSet& support, const SelectionConfig& cfg) {
    return select_single_stage(q, query_vec(q, support, Modality::visual), support, cfg,
                               Modality::visual, SelectionMethod::rices);
}

SelectionResult select_text_only(const Record& q, const BoundSet& support,
                                 const SelectionConfig& cfg) {
    return select_single_stage(q, query_vec(q, support, Modality::textual), support, cfg,
                               Modality::textual, SelectionMethod::text_only);
}

SelectionResult select_mmices(const Record& q, const BoundSet& support,
                              const SelectionConfig& cfg) {
    return select_two_stage(q, query_vec(q, support, Modality::visual),
                            query_vec(q, support, Modality::textual), support, cfg,
                            Modality::visual, SelectionMethod::mmices);
}

SelectionResult select_text_image(const Record& q, const BoundSet& support,
                                  const SelectionConfig& cfg) {
    return select_two_stage(q, query_vec(q, support, Modality::textual),
                            query_vec(q, support, Modality::visual), support, cfg,
                            Modality::textual, SelectionMethod::text_image);
}

SelectionResult select_one(const Record& q, const BoundSet& support, const SelectionConfig& cfg) {
    return select_with(q, support, support, cfg);
}

std::vector<SelectionResult> select_batch(const BoundSet& queries, const BoundSet& support,
                                          const SelectionConfig& cfg) {
    if (cfg.method != SelectionMethod::random) {
        if (queries.visual.dim != support.visual.dim) {
            std::ostringstream os;
            os << "visual dim mismatch: support " << support.visual.dim << " vs query "
               << queries.visual.dim;
            throw Error(os.str());
        }
        if (queries.textual.dim != support.textual.dim) {
            std::ostringstream os;
            os << "textual dim mismatch: support " << support.textual.dim << " vs query "
               << queries.textual.dim;
            throw Error(os.str());
        }
    }

    const std::size_t n = queries.size();
    std::vector<SelectionResult> out(n);
    std::vector<std::string> errors(n);

#pragma omp parallel for schedule(static)
    for (long long i = 0; i < (long long)n; ++i) {
        try {
            out[std::size_t(i)] = select_with(queries.records[std::size_t(i)], queries, support, cfg);
        } catch (const std::exception& e) {
            errors[std::size_t(i)] = e.what();
        }
    }

    std::ostringstream failures;
    std::size_t n_failed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (errors[i].empty())
            continue;
        ++n_failed;
        failures << "\n  [" << queries.records[i].id << "] " << errors[i];
    }
    if (n_failed > 0) {
        std::ostringstream os;
        os << "selection failed for " << n_failed << " of " << n << " queries:" << failures.str();
        throw Error(os.str());
    }
    return out;
}

} // namespace mmices
