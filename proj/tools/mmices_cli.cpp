// Pipeline driver: ingest -> select -> build-prompts -> (external VLM) ->
// score, plus the masked cross-attention probe. Every subcommand is
// deterministic given its flags; all randomness is seed-derived.

#include "mmices/attention_probe.hpp"
#include "mmices/dataset.hpp"
#include "mmices/embedding_store.hpp"
#include "mmices/error.hpp"
#include "mmices/metrics.hpp"
#include "mmices/perturbations.hpp"
#include "mmices/prompting.hpp"
#include "mmices/selection_io.hpp"
#include "mmices/selectors.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
    if (path.empty())
        return json::object();
    std::ifstream in(path);
    if (!in)
        throw mmices::Error("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw mmices::Error("config " + path + ": " + e.what());
    }
    if (!j.is_object())
        throw mmices::Error("config " + path + ": top level must be a JSON object");
    return j;
}

// config file + flag overrides, flags win
template <typename T>
void overlay(const json& cfg, const CLI::Option* opt, const char* key, T& value) {
    if (opt->count() == 0 && cfg.contains(key)) {
        try {
            value = cfg.at(key).get<T>();
        } catch (const json::exception& e) {
            throw mmices::Error(std::string("config key \"") + key + "\": " + e.what());
        }
    }
}

void require(const std::string& value, const char* flag) {
    if (value.empty())
        throw mmices::Error(std::string("missing required option ") + flag);
}

void set_threads(int threads) {
    if (threads > 0)
        omp_set_num_threads(threads);
}

struct Pipeline {
    mmices::StoreManifest manifest;
    mmices::BoundSet support;
    mmices::BoundSet query;
};

// Matrices are L2-normalized at ingest so cosine ranking is scale-free
// regardless of how the upstream encoders scaled their outputs.
mmices::EmbeddingMatrix load_normalized(const fs::path& path) {
    auto m = mmices::load_matrix(path);
    return m.normalized ? std::move(m) : mmices::normalize(m);
}

Pipeline load_pipeline(const std::string& manifest_path, const std::string& support_path,
                       const std::string& query_path, const std::string& task) {
    require(manifest_path, "--manifest");
    require(support_path, "--support");
    require(query_path, "--query");

    Pipeline p;
    auto task_kind = mmices::task_kind_from_string(task);
    p.manifest = mmices::StoreManifest::load(manifest_path);

    auto visual = load_normalized(p.manifest.visual_path);
    auto textual = load_normalized(p.manifest.textual_path);
    if (p.manifest.blank_image_id && !visual.find(*p.manifest.blank_image_id))
        throw mmices::Error("manifest blank_image_id \"" + *p.manifest.blank_image_id +
                            "\" does not resolve in the visual matrix");

    auto q_visual = p.manifest.query_visual_path ? load_normalized(*p.manifest.query_visual_path)
                                                 : visual;
    auto q_textual = p.manifest.query_textual_path
                         ? load_normalized(*p.manifest.query_textual_path)
                         : textual;

    auto support_records = mmices::load_records(support_path, task_kind);
    auto query_records = mmices::load_records(query_path, task_kind);
    p.support = mmices::bind(std::move(support_records), std::move(visual), std::move(textual),
                             task_kind);
    p.query = mmices::bind(std::move(query_records), std::move(q_visual), std::move(q_textual),
                           task_kind);

    if (p.query.visual.dim != p.support.visual.dim)
        throw mmices::Error("dim mismatch: support visual " + std::to_string(p.support.visual.dim) +
                            " vs query visual " + std::to_string(p.query.visual.dim));
    if (p.query.textual.dim != p.support.textual.dim)
        throw mmices::Error("dim mismatch: support textual " +
                            std::to_string(p.support.textual.dim) + " vs query textual " +
                            std::to_string(p.query.textual.dim));
    return p;
}

fs::path per_method_path(const fs::path& out, const std::string& method) {
    fs::path p = out;
    auto ext = p.extension();
    p.replace_extension();
    p += "." + method;
    p += ext;
    return p;
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
    fs::path pat(pattern);
    fs::path dir = pat.parent_path().empty() ? fs::path(".") : pat.parent_path();
    std::string name = pat.filename().string();

    auto matches = [](const std::string& text, const std::string& glob) {
        // greedy '*' matcher, sufficient for run-file patterns
        std::function<bool(std::size_t, std::size_t)> rec = [&](std::size_t t,
                                                                std::size_t g) -> bool {
            while (g < glob.size() && glob[g] != '*') {
                if (t >= text.size() || text[t] != glob[g])
                    return false;
                ++t, ++g;
            }
            if (g == glob.size())
                return t == text.size();
            for (std::size_t skip = t; skip <= text.size(); ++skip) {
                if (rec(skip, g + 1))
                    return true;
            }
            return false;
        };
        return rec(0, 0);
    };

    std::vector<fs::path> out;
    if (!fs::is_directory(dir))
        throw mmices::Error("--runs: no such directory: " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && matches(entry.path().filename().string(), name))
            out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty())
        throw mmices::Error("--runs: no files match " + pattern);
    return out;
}

// ---- subcommands -------------------------------------------------------

int cmd_ingest(const std::string& config, const std::string& manifest,
               const std::string& support, const std::string& query, const std::string& task,
               bool as_json) {
    auto p = load_pipeline(manifest, support, query, task);
    json summary = {
        {"n_support", p.support.size()},
        {"n_query", p.query.size()},
        {"visual_dim", p.support.visual.dim},
        {"textual_dim", p.support.textual.dim},
        {"task", task},
        {"blank_image_id", p.manifest.blank_image_id ? json(*p.manifest.blank_image_id) : json()},
    };
    (void)config;
    if (as_json) {
        std::cout << summary.dump() << "\n";
    } else {
        std::cout << "ingest ok: " << p.support.size() << " support / " << p.query.size()
                  << " query records, visual dim " << p.support.visual.dim << ", textual dim "
                  << p.support.textual.dim << "\n";
    }
    return 0;
}

int cmd_select(const std::string& manifest, const std::string& support, const std::string& query,
               const std::string& task, const std::string& method, std::size_t shots,
               std::size_t prefilter, std::uint64_t seed, bool seed_given, bool include_self,
               const std::string& out, bool as_json) {
    require(out, "--out");
    auto p = load_pipeline(manifest, support, query, task);

    std::vector<mmices::SelectionMethod> methods;
    if (method == "all") {
        methods = {mmices::SelectionMethod::random, mmices::SelectionMethod::rices,
                   mmices::SelectionMethod::text_only, mmices::SelectionMethod::text_image,
                   mmices::SelectionMethod::mmices};
    } else {
        methods = {mmices::selection_method_from_string(method)};
    }

    json written = json::array();
    for (auto m : methods) {
        mmices::SelectionConfig cfg;
        cfg.method = m;
        cfg.shots = shots;
        cfg.prefilter = prefilter;
        cfg.exclude_self = !include_self;
        if (m == mmices::SelectionMethod::random) {
            if (!seed_given)
                throw mmices::Error("--seed is required for random selection");
            cfg.seed = seed;
        }
        auto results = mmices::select_batch(p.query, p.support, cfg);
        fs::path path = methods.size() > 1 ? per_method_path(out, to_string(m)) : fs::path(out);
        mmices::write_selections(results, cfg, path);
        written.push_back(path.string());
    }

    if (as_json)
        std::cout << json{{"written", written}, {"queries", p.query.size()}}.dump() << "\n";
    else
        std::cout << "selected demonstrations for " << p.query.size() << " queries -> "
                  << written.dump() << "\n";
    return 0;
}

int cmd_build_prompts(const std::string& manifest, const std::string& support,
                      const std::string& query, const std::string& task,
                      const std::string& selections_path, const std::string& templates_path,
                      const std::string& perturb, std::uint64_t perturb_seed,
                      const std::string& word_pool_path, const std::string& order,
                      const std::string& out, bool as_json) {
    require(selections_path, "--selections");
    require(out, "--out");
    auto p = load_pipeline(manifest, support, query, task);
    auto task_kind = p.support.task_kind;

    mmices::TemplateSet templates;
    if (!templates_path.empty())
        templates = mmices::TemplateSet::load(templates_path);

    mmices::PerturbationSetting setting;
    setting.kind = mmices::perturbation_kind_from_string(perturb);
    setting.seed = perturb_seed;
    if (!word_pool_path.empty()) {
        std::ifstream in(word_pool_path);
        if (!in)
            throw mmices::Error("cannot open word pool: " + word_pool_path);
        std::string w;
        while (std::getline(in, w)) {
            if (!w.empty())
                setting.word_pool.push_back(w);
        }
    }

    mmices::DonorIndex donors;
    mmices::PerturbationContext ctx;
    ctx.support = &p.support;
    ctx.blank_image_id = p.manifest.blank_image_id;
    if (setting.kind == mmices::PerturbationKind::diff_answer_same_question) {
        donors = mmices::build_donor_index(p.support);
        ctx.donors = &donors;
    }

    auto selections = mmices::load_selections(selections_path);
    std::vector<mmices::PromptSpec> specs;
    specs.reserve(selections.size());
    for (const auto& sel : selections) {
        auto qi = p.query.index_of(sel.query_id);
        if (!qi)
            throw mmices::Error("selection references unknown query \"" + sel.query_id + "\"");

        std::vector<mmices::OrderedDemo> demos;
        demos.reserve(sel.demo_ids.size());
        for (std::size_t d = 0; d < sel.demo_ids.size(); ++d) {
            auto si = p.support.index_of(sel.demo_ids[d]);
            if (!si)
                throw mmices::Error("selection references unknown support record \"" +
                                    sel.demo_ids[d] + "\"");
            mmices::OrderedDemo od;
            od.item.record = p.support.records[*si];
            od.support_index = *si;
            // rank by the stage that produced the final ordering
            const auto& ranking =
                !sel.stage2_scores.empty() ? sel.stage2_scores : sel.stage1_scores;
            if (!ranking.empty())
                od.score = ranking[d];
            demos.push_back(std::move(od));
        }

        auto policy = mmices::DemoOrderPolicy::given;
        if (order == "auto")
            policy = demos.empty() || !demos.front().score
                         ? mmices::DemoOrderPolicy::given
                         : mmices::DemoOrderPolicy::ascending_similarity;
        else
            policy = mmices::order_policy_from_string(order);
        demos = mmices::order_demos(std::move(demos), policy);

        std::vector<mmices::PromptRecord> demo_records;
        demo_records.reserve(demos.size());
        for (auto& d : demos)
            demo_records.push_back(std::move(d.item));
        mmices::PromptRecord query_record;
        query_record.record = p.query.records[*qi];

        auto [pd, pq] = mmices::apply(setting, std::move(demo_records), std::move(query_record),
                                      ctx);

        mmices::PromptMeta meta;
        meta.method = to_string(sel.method);
        meta.shots = sel.demo_ids.size();
        meta.perturbation = to_string(setting.kind);
        specs.push_back(mmices::build_prompt(pq, pd, task_kind, templates, std::move(meta)));
    }

    mmices::emit_prompts(specs, out);
    if (as_json)
        std::cout << json{{"written", out}, {"prompts", specs.size()}}.dump() << "\n";
    else
        std::cout << "built " << specs.size() << " prompts -> " << out << "\n";
    return 0;
}

int cmd_score(const std::string& metric, const std::string& responses_path,
              const std::string& records_path, const std::string& runs_glob,
              const std::string& out, bool as_json) {
    require(records_path, "--records");
    if (metric != "vqa" && metric != "cider")
        throw mmices::Error("--metric must be vqa or cider");
    auto task_kind = metric == "vqa" ? mmices::TaskKind::vqa : mmices::TaskKind::captioning;
    auto records = mmices::load_records(records_path, task_kind);

    std::vector<fs::path> run_files;
    if (!runs_glob.empty()) {
        if (!responses_path.empty())
            throw mmices::Error("give either --responses or --runs, not both");
        run_files = expand_glob(runs_glob);
    } else {
        require(responses_path, "--responses");
        run_files = {responses_path};
    }

    std::vector<std::string> warnings;
    std::vector<mmices::ScoreReport> reports;
    for (const auto& f : run_files) {
        auto responses = mmices::load_responses(f);
        reports.push_back(metric == "vqa" ? mmices::score_vqa(responses, records)
                                          : mmices::score_cider(responses, records, &warnings));
    }
    mmices::ScoreReport report = reports.size() == 1 ? reports.front()
                                                     : mmices::aggregate_runs(reports);
    for (const auto& w : warnings)
        std::cerr << "warning: " << w << "\n";

    if (!out.empty())
        report.write(out);
    if (as_json)
        std::cout << report.to_json();
    else
        std::cout << report.metric << " mean " << report.mean << " over "
                  << report.per_query.size() << " queries (runs: " << report.runs.size()
                  << ", mean_of_runs " << report.mean_of_runs << ", std " << report.std_of_runs
                  << ")\n";
    return 0;
}

int cmd_probe(const std::string& segments, std::size_t dim, std::size_t seeds,
              std::uint64_t base_seed, std::size_t blocks, const std::string& out, bool as_json) {
    auto layout = mmices::probe::InterleaveLayout::parse(segments);
    auto report = mmices::probe::run_probe(layout, seeds, dim, base_seed, blocks);
    if (!out.empty())
        report.write(out);
    if (as_json)
        std::cout << report.to_json();
    else
        std::cout << "probe over " << seeds << " seeds (dim " << dim << "): "
                  << "cos_hidden_mask_demo " << report.cos_hidden_mask_demo
                  << ", cos_hidden_mask_query " << report.cos_hidden_mask_query << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixed-modality in-context demonstration selection toolkit"};
    app.require_subcommand(1);

    // shared state; each subcommand overlays config values for flags the
    // user did not pass, so flags always win
    std::string config, manifest, support, query, out;
    std::string task = "vqa";
    bool as_json = false;
    int threads = 0;

    auto add_shared = [&](CLI::App* cmd) {
        cmd->add_option("--config", config, "JSON config file; flags override its values");
        cmd->add_flag("--json", as_json, "machine-readable JSON summary on stdout");
        cmd->add_option("--threads", threads, "OpenMP thread count (0 = runtime default)");
    };
    auto add_dataset = [&](CLI::App* cmd) {
        cmd->add_option("--manifest", manifest, "store manifest JSON");
        cmd->add_option("--support", support, "support records JSONL");
        cmd->add_option("--query", query, "query records JSONL");
        cmd->add_option("--task", task, "vqa | captioning");
    };

    auto* ingest = app.add_subcommand("ingest", "validate manifest, records, and embeddings");
    add_shared(ingest);
    add_dataset(ingest);

    std::string method = "mmices";
    std::size_t shots = 4, prefilter = 200;
    std::uint64_t seed = 0;
    bool include_self = false;
    auto* select = app.add_subcommand("select", "select demonstrations per query");
    add_shared(select);
    add_dataset(select);
    select->add_option("--method", method,
                       "random | rices | text | text-image | mmices | all (one file per method)");
    select->add_option("--shots", shots, "demonstrations per query (N)");
    select->add_option("--prefilter", prefilter, "first-stage candidates (K)");
    auto* seed_opt = select->add_option("--seed", seed, "PRNG seed (random method)");
    select->add_flag("--include-self", include_self,
                     "allow a query to select its own support record");
    select->add_option("--out", out, "output selection JSONL");

    std::string selections, templates_path, perturb = "standard", word_pool, order = "auto";
    std::uint64_t perturb_seed = 0;
    auto* build = app.add_subcommand("build-prompts", "assemble interleaved prompts");
    add_shared(build);
    add_dataset(build);
    build->add_option("--selections", selections, "selection JSONL from `select`");
    build->add_option("--templates", templates_path, "template set JSON");
    build->add_option("--perturb", perturb, "perturbation kind (default standard)");
    build->add_option("--perturb-seed", perturb_seed, "seed for randomized perturbations");
    build->add_option("--word-pool", word_pool, "word list, one per line (random_words_labels)");
    build->add_option("--order", order, "demo order: ascending | given | auto");
    build->add_option("--out", out, "output prompt JSONL");

    std::string metric = "vqa", responses, records_path, runs_glob;
    auto* score = app.add_subcommand("score", "score model responses");
    add_shared(score);
    score->add_option("--metric", metric, "vqa | cider");
    score->add_option("--responses", responses, "responses JSONL");
    score->add_option("--records", records_path, "query records JSONL with gold answers");
    score->add_option("--runs", runs_glob, "glob of per-seed response files to aggregate");
    score->add_option("--out", out, "write full report JSON here");

    std::string segments = "1x2,1x2,1x1";
    std::size_t dim = 32, n_seeds = 100, blocks = 1;
    std::uint64_t probe_base_seed = 0;
    auto* probe = app.add_subcommand("probe", "masked cross-attention information-flow probe");
    add_shared(probe);
    probe->add_option("--segments", segments, "per-segment IMGxTXT token counts, e.g. 1x2,1x2,1x1");
    probe->add_option("--dim", dim, "embedding dimension");
    probe->add_option("--seeds", n_seeds, "number of random seeds to average");
    probe->add_option("--seed", probe_base_seed, "base seed");
    probe->add_option("--blocks", blocks, "transformer blocks");
    probe->add_option("--out", out, "write report JSON here");

    try {
        app.parse(argc, argv);

        CLI::App* active = app.get_subcommands().front();
        json cfg = load_config(config);
        auto over_str = [&](const char* flag, const char* key, std::string& v) {
            if (auto* opt = active->get_option_no_throw(flag))
                overlay(cfg, opt, key, v);
        };
        auto over = [&]<typename T>(const char* flag, const char* key, T& v) {
            if (auto* opt = active->get_option_no_throw(flag))
                overlay(cfg, opt, key, v);
        };
        over_str("--manifest", "manifest", manifest);
        over_str("--support", "support", support);
        over_str("--query", "query", query);
        over_str("--task", "task", task);
        over_str("--out", "out", out);
        over("--threads", "threads", threads);
        set_threads(threads);

        if (active == ingest)
            return cmd_ingest(config, manifest, support, query, task, as_json);
        if (active == select) {
            over_str("--method", "method", method);
            over("--shots", "shots", shots);
            over("--prefilter", "prefilter", prefilter);
            over("--seed", "seed", seed);
            bool seed_given = seed_opt->count() > 0 || cfg.contains("seed");
            over("--include-self", "include_self", include_self);
            return cmd_select(manifest, support, query, task, method, shots, prefilter, seed,
                              seed_given, include_self, out, as_json);
        }
        if (active == build) {
            over_str("--selections", "selections", selections);
            over_str("--templates", "templates", templates_path);
            over_str("--perturb", "perturb", perturb);
            over("--perturb-seed", "perturb_seed", perturb_seed);
            over_str("--word-pool", "word_pool", word_pool);
            over_str("--order", "order", order);
            return cmd_build_prompts(manifest, support, query, task, selections, templates_path,
                                     perturb, perturb_seed, word_pool, order, out, as_json);
        }
        if (active == score) {
            over_str("--metric", "metric", metric);
            over_str("--responses", "responses", responses);
            over_str("--records", "records", records_path);
            over_str("--runs", "runs", runs_glob);
            return cmd_score(metric, responses, records_path, runs_glob, out, as_json);
        }
        if (active == probe) {
            over_str("--segments", "segments", segments);
            over("--dim", "dim", dim);
            over("--seeds", "seeds", n_seeds);
            over("--seed", "seed", probe_base_seed);
            over("--blocks", "blocks", blocks);
            return cmd_probe(segments, dim, n_seeds, probe_base_seed, blocks, out, as_json);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e);
        app.exit(e);
        return 2;
    } catch (const mmices::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
