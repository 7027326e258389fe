#include "mmices/perturbations.hpp"
#include "mmices/error.hpp"
#include "mmices/rng.hpp"

#include <algorithm>
#include <sstream>

namespace mmices {

const char* to_string(PerturbationKind k) {
    switch (k) {
    case PerturbationKind::standard: return "standard";
    case PerturbationKind::demo_no_images: return "demo_no_images";
    case PerturbationKind::demo_blank_images: return "demo_blank_images";
    case PerturbationKind::no_query_image: return "no_query_image";
    case PerturbationKind::diff_answer_same_question: return "diff_answer_same_question";
    case PerturbationKind::random_question: return "random_question";
    case PerturbationKind::random_words_labels: return "random_words_labels";
    }
    return "?";
}

PerturbationKind perturbation_kind_from_string(const std::string& s) {
    for (auto k : {PerturbationKind::standard, PerturbationKind::demo_no_images,
                   PerturbationKind::demo_blank_images, PerturbationKind::no_query_image,
                   PerturbationKind::diff_answer_same_question, PerturbationKind::random_question,
                   PerturbationKind::random_words_labels}) {
        if (s == to_string(k))
            return k;
    }
    throw Error("unknown perturbation kind: \"" + s + "\"");
}

bool DonorIndex::has_donor_for(const std::string& question, const std::string& record_id) const {
    auto it = groups.find(question);
    if (it == groups.end())
        return false;
    for (const auto& d : it->second) {
        if (d.id != record_id)
            return true;
    }
    return false;
}

DonorIndex build_donor_index(const BoundSet& support) {
    DonorIndex idx;
    for (const auto& r : support.records) {
        if (!r.question || r.answers.empty())
            continue;
        idx.groups[*r.question].push_back(DonorEntry{r.id, r.answers.front()});
    }
    return idx;
}

namespace {

std::size_t word_count(const std::string& s) {
    std::istringstream is(s);
    std::string w;
    std::size_t n = 0;
    while (is >> w)
        ++n;
    return n;
}

// The rendered demonstration response: first answer for VQA, first caption
// for captioning.
std::string& label_field(Record& r) {
    if (!r.answers.empty())
        return r.answers.front();
    if (!r.captions.empty())
        return r.captions.front();
    throw Error("demonstration \"" + r.id + "\" has no answer or caption to perturb");
}

void perturb_labels_random_words(const PerturbationSetting& setting,
                                 std::vector<PromptRecord>& demos, std::mt19937_64& rng) {
    if (setting.word_pool.empty())
        throw Error("random_words_labels requires a non-empty word pool");
    for (auto& d : demos) {
        std::string& label = label_field(d.record);
        std::size_t k = word_count(label);
        std::string repl;
        for (std::size_t i = 0; i < k; ++i) {
            if (i > 0)
                repl += ' ';
            repl += setting.word_pool[bounded(rng, setting.word_pool.size())];
        }
        if (!d.record.answers.empty())
            d.record.answers = {repl};
        else
            d.record.captions = {repl};
    }
}

void perturb_diff_answer(std::vector<PromptRecord>& demos, const PerturbationContext& ctx,
                         std::mt19937_64& rng) {
    if (!ctx.donors)
        throw Error("diff_answer_same_question requires a donor index");
    std::vector<std::string> no_donor;
    for (auto& d : demos) {
        if (!d.record.question) {
            no_donor.push_back(d.record.id);
            continue;
        }
        auto it = ctx.donors->groups.find(*d.record.question);
        std::vector<const DonorEntry*> candidates;
        if (it != ctx.donors->groups.end()) {
            for (const auto& entry : it->second) {
                if (entry.id != d.record.id)
                    candidates.push_back(&entry);
            }
        }
        if (candidates.empty()) {
            no_donor.push_back(d.record.id);
            continue;
        }
        const DonorEntry* pick = candidates[bounded(rng, candidates.size())];
        d.record.answers = {pick->answer};
    }
    if (!no_donor.empty()) {
        std::ostringstream os;
        os << "diff_answer_same_question: no same-question donor for demo(s):";
        for (const auto& id : no_donor)
            os << " " << id;
        throw Error(os.str());
    }
}

void perturb_random_question(std::vector<PromptRecord>& demos, const PerturbationContext& ctx,
                             std::mt19937_64& rng) {
    if (!ctx.support)
        throw Error("random_question requires the support set as a question pool");
    for (auto& d : demos) {
        // prefer questions with different content; fall back to any other
        // record only when no alternative exists
        std::vector<const std::string*> different, same;
        for (const auto& r : ctx.support->records) {
            if (!r.question || r.id == d.record.id)
                continue;
            if (!d.record.question || *r.question != *d.record.question)
                different.push_back(&*r.question);
            else
                same.push_back(&*r.question);
        }
        const auto& pool = !different.empty() ? different : same;
        if (pool.empty())
            throw Error("random_question: no donor questions available for demo \"" +
                        d.record.id + "\"");
        d.record.question = *pool[bounded(rng, pool.size())];
    }
}

} // namespace

std::pair<std::vector<PromptRecord>, PromptRecord>
apply(const PerturbationSetting& setting, std::vector<PromptRecord> demos, PromptRecord query,
      const PerturbationContext& ctx) {
    if (setting.kind == PerturbationKind::standard)
        return {std::move(demos), std::move(query)};

    auto already = [](const PromptRecord& p) {
        return p.applied != PerturbationKind::standard;
    };
    if (already(query) || std::any_of(demos.begin(), demos.end(), already))
        throw Error("perturbations do not compose: input already carries a non-standard kind");

    std::mt19937_64 rng(setting.seed ^ fnv1a64(query.record.id));

    switch (setting.kind) {
    case PerturbationKind::demo_no_images:
        for (auto& d : demos)
            d.include_image = false;
        break;
    case PerturbationKind::demo_blank_images:
        if (!ctx.blank_image_id)
            throw Error("demo_blank_images requires blank_image_id in the store manifest");
        for (auto& d : demos)
            d.record.image_ref = *ctx.blank_image_id;
        break;
    case PerturbationKind::no_query_image:
        query.include_image = false;
        break;
    case PerturbationKind::diff_answer_same_question:
        perturb_diff_answer(demos, ctx, rng);
        break;
    case PerturbationKind::random_question:
        perturb_random_question(demos, ctx, rng);
        break;
    case PerturbationKind::random_words_labels:
        perturb_labels_random_words(setting, demos, rng);
        break;
    case PerturbationKind::standard:
        break;
    }

    for (auto& d : demos)
        d.applied = setting.kind;
    query.applied = setting.kind;
    return {std::move(demos), std::move(query)};
}

} // namespace mmices
