#include "mmices/selection_io.hpp"
#include "mmices/error.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace mmices {

void write_selections(const std::vector<SelectionResult>& results, const SelectionConfig& cfg,
                      const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error("cannot open for writing: " + path.string());
    const bool two_stage =
        cfg.method == SelectionMethod::mmices || cfg.method == SelectionMethod::text_image;
    for (const auto& r : results) {
        nlohmann::json j;
        j["query_id"] = r.query_id;
        j["method"] = to_string(r.method);
        j["shots"] = cfg.shots;
        if (two_stage)
            j["prefilter"] = cfg.prefilter;
        if (cfg.method == SelectionMethod::random)
            j["seed"] = cfg.seed;
        j["demo_ids"] = r.demo_ids;
        if (!r.stage1_scores.empty())
            j["stage1_scores"] = r.stage1_scores;
        if (!r.stage2_scores.empty())
            j["stage2_scores"] = r.stage2_scores;
        out << j.dump() << "\n";
    }
    if (!out)
        throw Error("write failed: " + path.string());
}

std::vector<SelectionResult> load_selections(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open selections file: " + path.string());
    std::vector<SelectionResult> out;
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
            SelectionResult r;
            r.query_id = j.at("query_id").get<std::string>();
            r.method = selection_method_from_string(j.at("method").get<std::string>());
            r.demo_ids = j.at("demo_ids").get<std::vector<std::string>>();
            if (j.contains("stage1_scores"))
                r.stage1_scores = j.at("stage1_scores").get<std::vector<double>>();
            if (j.contains("stage2_scores"))
                r.stage2_scores = j.at("stage2_scores").get<std::vector<double>>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw Error(where.str() + ": " + e.what());
        }
    }
    return out;
}

} // namespace mmices
