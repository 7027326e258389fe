#include "mmices/dataset.hpp"
#include "mmices/error.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace mmices {

const char* to_string(TaskKind t) {
    return t == TaskKind::vqa ? "vqa" : "captioning";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "vqa")
        return TaskKind::vqa;
    if (s == "captioning")
        return TaskKind::captioning;
    throw Error("unknown task kind: \"" + s + "\" (expected vqa or captioning)");
}

namespace {

Record parse_record(const nlohmann::json& j, TaskKind task_kind, const std::string& where) {
    if (!j.is_object())
        throw Error(where + ": record must be a JSON object");

    Record r;
    auto require_string = [&](const char* key) {
        if (!j.contains(key) || !j.at(key).is_string())
            throw Error(where + ": missing required string field \"" + key + "\"");
        return j.at(key).get<std::string>();
    };
    r.id = require_string("id");
    r.image_ref = require_string("image_ref");

    if (j.contains("question")) {
        if (!j.at("question").is_string())
            throw Error(where + ": \"question\" must be a string");
        r.question = j.at("question").get<std::string>();
    }
    auto read_list = [&](const char* key, std::vector<std::string>& out) {
        if (!j.contains(key))
            return;
        if (!j.at(key).is_array())
            throw Error(where + ": \"" + key + "\" must be an array of strings");
        for (const auto& e : j.at(key)) {
            if (!e.is_string())
                throw Error(where + ": \"" + key + "\" must be an array of strings");
            out.push_back(e.get<std::string>());
        }
    };
    read_list("answers", r.answers);
    read_list("captions", r.captions);
    if (j.contains("proxy_text")) {
        if (!j.at("proxy_text").is_string())
            throw Error(where + ": \"proxy_text\" must be a string");
        r.proxy_text = j.at("proxy_text").get<std::string>();
    }

    if (!r.question && r.captions.empty())
        throw Error(where + ": record needs a question or at least one caption");
    if (task_kind == TaskKind::vqa && !r.question)
        throw Error(where + ": vqa record missing \"question\"");
    if (task_kind == TaskKind::captioning && r.captions.empty())
        throw Error(where + ": captioning record missing \"captions\"");
    return r;
}

} // namespace

std::vector<Record> load_records(const std::filesystem::path& path, TaskKind task_kind) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open records file: " + path.string());

    std::vector<Record> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::ostringstream where;
        where << path.string() << ":" << line_no;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(where.str() + ": malformed JSON: " + e.what());
        }
        out.push_back(parse_record(j, task_kind, where.str()));
    }
    return out;
}

BoundSet bind(std::vector<Record> records, EmbeddingMatrix visual, EmbeddingMatrix textual,
              TaskKind task_kind) {
    BoundSet b;
    b.task_kind = task_kind;
    b.visual_rows.reserve(records.size());
    b.textual_rows.reserve(records.size());

    std::vector<std::string> missing;
    for (const auto& r : records) {
        auto v = visual.find(r.id);
        auto t = textual.find(r.id);
        if (!v || !t) {
            missing.push_back(r.id + (!v && !t ? " (both)" : !v ? " (visual)" : " (textual)"));
            continue;
        }
        b.visual_rows.push_back(*v);
        b.textual_rows.push_back(*t);
    }
    if (!missing.empty()) {
        std::ostringstream os;
        os << missing.size() << " record ID(s) missing from embedding matrices:";
        for (const auto& id : missing)
            os << " " << id;
        throw Error(os.str());
    }

    b.index_.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto [it, inserted] = b.index_.emplace(records[i].id, i);
        if (!inserted)
            throw Error("duplicate record ID in dataset: \"" + records[i].id + "\"");
    }

    b.records = std::move(records);
    b.visual = std::move(visual);
    b.textual = std::move(textual);
    return b;
}

} // namespace mmices
