#pragma once

#include "mmices/dataset.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mmices {

/// Canonicalizes a free-form answer the way the official VQA evaluation
/// does: punctuation handling, lowercasing, digit words to digits, article
/// removal, contraction repair, whitespace collapse.
std::string normalize_answer(std::string_view s);

/// Leave-one-out VQA accuracy over n human answers: fold f omits answer f
/// and scores min(matches/3, 1); the result is the fold mean. Inputs are
/// normalized before matching.
double vqa_accuracy(std::string_view pred, const std::vector<std::string>& human_answers);

/// Dataset-facing dispatch: the 10-answer VQA-style list uses the fold
/// formula; shorter lists score exact match (1 if the normalized prediction
/// appears among the normalized answers).
double answers_accuracy(std::string_view pred, const std::vector<std::string>& answers);

struct ScoreReport {
    std::string metric; // "vqa_accuracy" | "cider"
    std::map<std::string, double> per_query;
    double mean = 0.0;
    std::vector<double> runs;   // one entry per evaluation seed
    double mean_of_runs = 0.0;
    double std_of_runs = 0.0;   // population std over runs

    std::string to_json() const;
    static ScoreReport from_json_file(const std::filesystem::path& path);
    void write(const std::filesystem::path& path) const;
};

/// CIDEr-D: TF-IDF weighted n-gram similarity (n=1..4) with reference-count
/// clipping and a Gaussian length penalty (sigma=6), averaged over n and
/// scaled by 10. IDF comes from the reference sets only; df counts images
/// whose reference set contains the gram. Tokenization is lowercase +
/// whitespace split (captions are expected pre-tokenized upstream).
ScoreReport cider(const std::map<std::string, std::string>& candidates,
                  const std::map<std::string, std::vector<std::string>>& references,
                  std::vector<std::string>* warnings = nullptr);

/// VQA-style accuracy over response/record pairs; every response id must
/// resolve to a record carrying gold answers.
ScoreReport score_vqa(const std::map<std::string, std::string>& responses,
                      const std::vector<Record>& records);

/// CIDEr over responses against the records' captions.
ScoreReport score_cider(const std::map<std::string, std::string>& responses,
                        const std::vector<Record>& records,
                        std::vector<std::string>* warnings = nullptr);

/// Collapses per-seed reports (same metric, same query set) into one report
/// with mean/std over the per-seed means.
ScoreReport aggregate_runs(const std::vector<ScoreReport>& per_seed_reports);

/// Responses JSONL: {"query_id": str, "response": str}; ids must be unique.
std::map<std::string, std::string> load_responses(const std::filesystem::path& path);

} // namespace mmices
