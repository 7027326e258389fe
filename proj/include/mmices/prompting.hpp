#pragma once

#include "mmices/perturbations.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mmices {

enum class SegmentRole { demo, query };

struct Segment {
    std::optional<std::string> image_ref; // absent = no image token emitted
    std::string text;
    SegmentRole role = SegmentRole::demo;

    bool operator==(const Segment&) const = default;
};

struct PromptMeta {
    std::string method;
    std::size_t shots = 0;
    std::string perturbation = "standard";

    bool operator==(const PromptMeta&) const = default;
};

/// Ordered interleaved segments: demonstrations first, the query last. The
/// query segment's text stops at the answer cue.
struct PromptSpec {
    std::string query_id;
    PromptMeta meta;
    std::vector<Segment> segments;

    bool operator==(const PromptSpec&) const = default;
};

/// Render templates. Placeholders: {question}, {answer}, {caption}. Query
/// templates must not reference {answer}/{caption}.
struct TemplateSet {
    std::string vqa_demo = "Question: {question} Short answer: {answer}";
    std::string vqa_query = "Question: {question} Short answer:";
    std::string caption_demo = "Output: {caption}";
    std::string caption_query = "Output:";

    static TemplateSet load(const std::filesystem::path& path);
};

enum class DemoOrderPolicy { ascending_similarity, given };

DemoOrderPolicy order_policy_from_string(const std::string& s);

/// A selected demonstration on its way into a prompt.
struct OrderedDemo {
    PromptRecord item;
    std::optional<double> score;  // final-stage selection score
    std::size_t support_index = 0;
};

/// ascending_similarity sorts by (score asc, support index asc) so the most
/// similar demo lands adjacent to the query; `given` keeps input order.
std::vector<OrderedDemo> order_demos(std::vector<OrderedDemo> demos, DemoOrderPolicy policy);

PromptSpec build_prompt(const PromptRecord& query, const std::vector<PromptRecord>& demos,
                        TaskKind task_kind, const TemplateSet& templates, PromptMeta meta);

void emit_prompts(const std::vector<PromptSpec>& specs, const std::filesystem::path& path);
std::vector<PromptSpec> load_prompts(const std::filesystem::path& path);

} // namespace mmices
