#include "mmices/prompting.hpp"
#include "mmices/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mmices {

namespace {

std::string substitute(const std::string& tmpl, const std::string& key, const std::string& value) {
    std::string out = tmpl;
    const std::string token = "{" + key + "}";
    std::size_t pos = 0;
    while ((pos = out.find(token, pos)) != std::string::npos) {
        out.replace(pos, token.size(), value);
        pos += value.size();
    }
    return out;
}

bool mentions(const std::string& tmpl, const std::string& key) {
    return tmpl.find("{" + key + "}") != std::string::npos;
}

std::string render_demo(const Record& r, TaskKind task, const TemplateSet& t) {
    if (task == TaskKind::vqa) {
        if (!r.question)
            throw Error("demo \"" + r.id + "\" lacks a question required by the vqa template");
        if (r.answers.empty())
            throw Error("demo \"" + r.id + "\" lacks an answer required by the vqa template");
        return substitute(substitute(t.vqa_demo, "question", *r.question), "answer",
                          r.answers.front());
    }
    if (r.captions.empty())
        throw Error("demo \"" + r.id + "\" lacks a caption required by the captioning template");
    return substitute(t.caption_demo, "caption", r.captions.front());
}

std::string render_query(const Record& r, TaskKind task, const TemplateSet& t) {
    const std::string& tmpl = task == TaskKind::vqa ? t.vqa_query : t.caption_query;
    if (mentions(tmpl, "answer") || mentions(tmpl, "caption"))
        throw Error("query template must not reference the answer");
    if (task == TaskKind::vqa) {
        if (!r.question)
            throw Error("query \"" + r.id + "\" lacks a question required by the vqa template");
        return substitute(tmpl, "question", *r.question);
    }
    return tmpl;
}

nlohmann::json segment_to_json(const Segment& s) {
    nlohmann::json j;
    if (s.image_ref)
        j["image_ref"] = *s.image_ref;
    j["text"] = s.text;
    j["role"] = s.role == SegmentRole::demo ? "demo" : "query";
    return j;
}

Segment segment_from_json(const nlohmann::json& j, const std::string& where) {
    Segment s;
    if (j.contains("image_ref"))
        s.image_ref = j.at("image_ref").get<std::string>();
    s.text = j.at("text").get<std::string>();
    const auto role = j.at("role").get<std::string>();
    if (role == "demo")
        s.role = SegmentRole::demo;
    else if (role == "query")
        s.role = SegmentRole::query;
    else
        throw Error(where + ": unknown segment role \"" + role + "\"");
    return s;
}

} // namespace

TemplateSet TemplateSet::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open template set: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("template set " + path.string() + ": " + e.what());
    }
    TemplateSet t;
    for (const char* key : {"vqa_demo", "vqa_query", "caption_demo", "caption_query"}) {
        if (!j.contains(key) || !j.at(key).is_string())
            throw Error("template set " + path.string() + ": missing string key \"" + key + "\"");
    }
    t.vqa_demo = j.at("vqa_demo").get<std::string>();
    t.vqa_query = j.at("vqa_query").get<std::string>();
    t.caption_demo = j.at("caption_demo").get<std::string>();
    t.caption_query = j.at("caption_query").get<std::string>();
    return t;
}

DemoOrderPolicy order_policy_from_string(const std::string& s) {
    if (s == "ascending_similarity" || s == "ascending")
        return DemoOrderPolicy::ascending_similarity;
    if (s == "given")
        return DemoOrderPolicy::given;
    throw Error("unknown demo order policy: \"" + s + "\"");
}

std::vector<OrderedDemo> order_demos(std::vector<OrderedDemo> demos, DemoOrderPolicy policy) {
    if (policy == DemoOrderPolicy::given)
        return demos;
    for (const auto& d : demos) {
        if (!d.score)
            throw Error("ascending_similarity ordering needs a score for demo \"" +
                        d.item.record.id + "\"");
    }
    std::sort(demos.begin(), demos.end(), [](const OrderedDemo& a, const OrderedDemo& b) {
        if (*a.score != *b.score)
            return *a.score < *b.score;
        return a.support_index < b.support_index;
    });
    return demos;
}

PromptSpec build_prompt(const PromptRecord& query, const std::vector<PromptRecord>& demos,
                        TaskKind task_kind, const TemplateSet& templates, PromptMeta meta) {
    PromptSpec spec;
    spec.query_id = query.record.id;
    spec.meta = std::move(meta);
    spec.segments.reserve(demos.size() + 1);

    for (const auto& d : demos) {
        Segment s;
        if (d.include_image)
            s.image_ref = d.record.image_ref;
        s.text = render_demo(d.record, task_kind, templates);
        s.role = SegmentRole::demo;
        spec.segments.push_back(std::move(s));
    }

    Segment q;
    if (query.include_image)
        q.image_ref = query.record.image_ref;
    q.text = render_query(query.record, task_kind, templates);
    q.role = SegmentRole::query;
    spec.segments.push_back(std::move(q));
    return spec;
}

void emit_prompts(const std::vector<PromptSpec>& specs, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error("cannot open for writing: " + path.string());
    for (const auto& spec : specs) {
        nlohmann::json j;
        j["query_id"] = spec.query_id;
        j["meta"] = {{"method", spec.meta.method},
                     {"shots", spec.meta.shots},
                     {"perturbation", spec.meta.perturbation}};
        auto segs = nlohmann::json::array();
        for (const auto& s : spec.segments)
            segs.push_back(segment_to_json(s));
        j["segments"] = std::move(segs);
        out << j.dump() << "\n";
    }
    if (!out)
        throw Error("write failed: " + path.string());
}

std::vector<PromptSpec> load_prompts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open prompts file: " + path.string());
    std::vector<PromptSpec> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::ostringstream where;
        where << path.string() << ":" << line_no;
        try {
            auto j = nlohmann::json::parse(line);
            PromptSpec spec;
            spec.query_id = j.at("query_id").get<std::string>();
            spec.meta.method = j.at("meta").at("method").get<std::string>();
            spec.meta.shots = j.at("meta").at("shots").get<std::size_t>();
            spec.meta.perturbation = j.at("meta").at("perturbation").get<std::string>();
            for (const auto& sj : j.at("segments"))
                spec.segments.push_back(segment_from_json(sj, where.str()));
            out.push_back(std::move(spec));
        } catch (const nlohmann::json::exception& e) {
            throw Error(where.str() + ": " + e.what());
        }
    }
    return out;
}

} // namespace mmices
