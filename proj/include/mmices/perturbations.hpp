#pragma once

#include "mmices/dataset.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mmices {

enum class PerturbationKind {
    standard,
    demo_no_images,
    demo_blank_images,
    no_query_image,
    diff_answer_same_question,
    random_question,
    random_words_labels,
};

const char* to_string(PerturbationKind k);
PerturbationKind perturbation_kind_from_string(const std::string& s);

struct PerturbationSetting {
    PerturbationKind kind = PerturbationKind::standard;
    std::uint64_t seed = 0;              // randomized kinds
    std::vector<std::string> word_pool;  // random_words_labels
};

/// A record plus its prompt-time flags. include_image=false means no image
/// token is emitted for this item downstream; the record's image_ref is left
/// untouched so field diffs stay honest.
struct PromptRecord {
    Record record;
    bool include_image = true;
    PerturbationKind applied = PerturbationKind::standard;
};

struct DonorEntry {
    std::string id;
    std::string answer;
};

/// Exact-string question grouping over a support set; groups of size one
/// have no usable donor for their own member.
struct DonorIndex {
    std::map<std::string, std::vector<DonorEntry>> groups;

    bool has_donor_for(const std::string& question, const std::string& record_id) const;
};

DonorIndex build_donor_index(const BoundSet& support);

struct PerturbationContext {
    const BoundSet* support = nullptr;        // random_question donor pool
    const DonorIndex* donors = nullptr;       // diff_answer_same_question
    std::optional<std::string> blank_image_id;
};

/// Applies exactly one perturbation to a (demos, query) pair. Every kind
/// touches only the fields its definition names; standard is the identity.
/// Stacking two non-standard kinds is rejected (one factor at a time).
std::pair<std::vector<PromptRecord>, PromptRecord>
apply(const PerturbationSetting& setting, std::vector<PromptRecord> demos, PromptRecord query,
      const PerturbationContext& ctx = {});

} // namespace mmices
