#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmices/embedding_store.hpp"
#include "mmices/selection_io.hpp"
#include "test_support.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mmices;
using namespace testsup;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code;
    std::string out;
    std::string err;
};

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "mmices_cli_tests";
    fs::create_directories(dir);
    return dir;
}

RunResult run_cli(const std::string& args) {
    auto dir = work_dir();
    auto out_path = dir / "stdout.txt";
    auto err_path = dir / "stderr.txt";
    std::string cmd = std::string(MMICES_CLI_BIN) + " " + args + " > " + out_path.string() +
                      " 2> " + err_path.string();
    int status = std::system(cmd.c_str());
    int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    return {code, slurp(out_path), slurp(err_path)};
}

std::string slurp_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_records_file(const fs::path& path, const std::vector<Record>& records) {
    std::ofstream out(path, std::ios::trunc);
    for (const auto& r : records) {
        json j{{"id", r.id}, {"image_ref", r.image_ref}};
        if (r.question)
            j["question"] = *r.question;
        if (!r.answers.empty())
            j["answers"] = r.answers;
        if (!r.captions.empty())
            j["captions"] = r.captions;
        out << j.dump() << "\n";
    }
}

// 6-record world written to disk with pre-normalized matrices so the
// in-memory oracle sees exactly the floats the CLI loads
struct DiskWorld {
    fs::path dir;
    World world;       // support bound over normalized matrices
    fs::path manifest, support, query;
};

DiskWorld make_disk_world(const char* name, std::size_t n_support, std::uint64_t seed,
                          WorldOptions opts = {}) {
    DiskWorld dw;
    dw.dir = work_dir() / name;
    fs::create_directories(dw.dir);

    auto raw = make_world(n_support, 4, seed, opts);
    auto visual = normalize(raw.support.visual);
    auto textual = normalize(raw.support.textual);
    dw.world.support = bind(raw.support.records, visual, textual, TaskKind::vqa);
    dw.world.queries = raw.queries;

    write_matrix(visual, dw.dir / "visual.mmeb");
    write_matrix(textual, dw.dir / "textual.mmeb");
    dw.manifest = dw.dir / "manifest.json";
    {
        std::ofstream out(dw.manifest, std::ios::trunc);
        out << json{{"visual_path", "visual.mmeb"}, {"textual_path", "textual.mmeb"}}.dump();
    }
    dw.support = dw.dir / "support.jsonl";
    dw.query = dw.dir / "query.jsonl";
    write_records_file(dw.support, dw.world.support.records);
    write_records_file(dw.query, dw.world.queries);
    return dw;
}

std::string dataset_args(const DiskWorld& dw) {
    return " --manifest " + dw.manifest.string() + " --support " + dw.support.string() +
           " --query " + dw.query.string() + " --task vqa ";
}

} // namespace

TEST_CASE("ingest: valid fixture exits 0 with a binding summary") {
    auto dw = make_disk_world("ingest_ok", 6, 11);
    auto res = run_cli("ingest" + dataset_args(dw) + "--json");
    CHECK(res.exit_code == 0);
    auto j = json::parse(res.out);
    CHECK(j.at("n_support") == 6);
    CHECK(j.at("n_query") == 1);
    CHECK(j.at("visual_dim") == 4);
}

TEST_CASE("ingest: missing textual matrix exits 2 naming the path") {
    auto dw = make_disk_world("ingest_missing", 4, 12);
    fs::remove(dw.dir / "textual.mmeb");
    auto res = run_cli("ingest" + dataset_args(dw));
    CHECK(res.exit_code == 2);
    CHECK(res.err.find("textual.mmeb") != std::string::npos);
}

TEST_CASE("ingest: query/support dim mismatch exits 2") {
    auto dw = make_disk_world("ingest_dims", 4, 13);
    // separate query matrices with a different dim
    auto q = make_world(2, 6, 14);
    write_matrix(normalize(q.support.visual), dw.dir / "qvisual.mmeb");
    write_matrix(normalize(q.support.textual), dw.dir / "qtextual.mmeb");
    {
        std::ofstream out(dw.manifest, std::ios::trunc);
        out << json{{"visual_path", "visual.mmeb"},
                    {"textual_path", "textual.mmeb"},
                    {"query_visual_path", "qvisual.mmeb"},
                    {"query_textual_path", "qtextual.mmeb"}}
                   .dump();
    }
    // queries must resolve in the query-side matrices
    write_records_file(dw.query, {q.support.records[0]});
    auto res = run_cli("ingest" + dataset_args(dw));
    CHECK(res.exit_code == 2);
    CHECK(res.err.find("dim mismatch") != std::string::npos);
}

TEST_CASE("select: mmices K=4 N=2 on the 6-record fixture matches the oracle") {
    auto dw = make_disk_world("select_oracle", 6, 15);
    auto out = dw.dir / "sel.jsonl";
    auto res = run_cli("select" + dataset_args(dw) +
                       "--method mmices --shots 2 --prefilter 4 --out " + out.string());
    REQUIRE(res.exit_code == 0);

    auto selections = load_selections(out);
    REQUIRE(selections.size() == 1);
    CHECK(selections[0].query_id == dw.world.queries[0].id);
    CHECK(selections[0].demo_ids ==
          oracle_two_stage(dw.world.support, dw.world.queries[0], true, 4, 2));
    CHECK(selections[0].stage1_scores.size() == 2);
    CHECK(selections[0].stage2_scores.size() == 2);
}

TEST_CASE("select: random with the same seed produces identical files") {
    auto dw = make_disk_world("select_random", 8, 16);
    auto out1 = dw.dir / "r1.jsonl";
    auto out2 = dw.dir / "r2.jsonl";
    auto base = "select" + dataset_args(dw) + "--method random --shots 3 --seed 7 --out ";
    REQUIRE(run_cli(base + out1.string()).exit_code == 0);
    REQUIRE(run_cli(base + out2.string()).exit_code == 0);
    CHECK(slurp_file(out1) == slurp_file(out2));
    CHECK(!slurp_file(out1).empty());
}

TEST_CASE("select: random without --seed exits 2") {
    auto dw = make_disk_world("select_noseed", 6, 17);
    auto res = run_cli("select" + dataset_args(dw) + "--method random --shots 2 --out " +
                       (dw.dir / "x.jsonl").string());
    CHECK(res.exit_code == 2);
    CHECK(res.err.find("seed") != std::string::npos);
}

TEST_CASE("select: N larger than the support set exits 2 with an actionable message") {
    auto dw = make_disk_world("select_toobig", 3, 18);
    auto res = run_cli("select" + dataset_args(dw) + "--method rices --shots 9 --out " +
                       (dw.dir / "x.jsonl").string());
    CHECK(res.exit_code == 2);
    CHECK(res.err.find("support too small") != std::string::npos);
    CHECK(res.err.find("9") != std::string::npos);
}

TEST_CASE("select: --method all writes one file per method") {
    auto dw = make_disk_world("select_all", 8, 19);
    auto out = dw.dir / "sweep.jsonl";
    auto res = run_cli("select" + dataset_args(dw) +
                       "--method all --shots 2 --prefilter 4 --seed 5 --out " + out.string());
    REQUIRE(res.exit_code == 0);
    for (const char* m : {"random", "rices", "text_only", "text_image", "mmices"})
        CHECK(fs::exists(dw.dir / (std::string("sweep.") + m + ".jsonl")));
}

TEST_CASE("build-prompts is byte-stable across runs") {
    auto dw = make_disk_world("prompts_stable", 8, 20);
    auto sel = dw.dir / "sel.jsonl";
    REQUIRE(run_cli("select" + dataset_args(dw) +
                    "--method mmices --shots 3 --prefilter 5 --out " + sel.string())
                .exit_code == 0);
    auto p1 = dw.dir / "p1.jsonl";
    auto p2 = dw.dir / "p2.jsonl";
    auto base = "build-prompts" + dataset_args(dw) + "--selections " + sel.string() +
                " --perturb standard --out ";
    REQUIRE(run_cli(base + p1.string()).exit_code == 0);
    REQUIRE(run_cli(base + p2.string()).exit_code == 0);
    CHECK(slurp_file(p1) == slurp_file(p2));

    // prompt text ends at the answer cue for the query segment
    auto line = slurp_file(p1);
    CHECK(line.find("Short answer:\"") != std::string::npos);
}

TEST_CASE("score: three-question fixture reproduces the hand-computed mean") {
    auto dir = work_dir() / "score_fixture";
    fs::create_directories(dir);

    std::vector<Record> records(3);
    records[0] = make_record("q0");
    records[0].answers = std::vector<std::string>(10, "yes");
    records[1] = make_record("q1");
    records[1].answers = std::vector<std::string>(10, "right");
    for (int i = 0; i < 3; ++i)
        records[1].answers[std::size_t(i)] = "left";
    records[2] = make_record("q2");
    records[2].answers = std::vector<std::string>(10, "no");
    write_records_file(dir / "records.jsonl", records);
    {
        std::ofstream out(dir / "responses.jsonl", std::ios::trunc);
        out << json{{"query_id", "q0"}, {"response", "yes"}}.dump() << "\n";   // 1.0
        out << json{{"query_id", "q1"}, {"response", "left"}}.dump() << "\n";  // 0.9
        out << json{{"query_id", "q2"}, {"response", "maybe"}}.dump() << "\n"; // 0.0
    }

    auto report_path = dir / "report.json";
    auto res = run_cli("score --metric vqa --responses " + (dir / "responses.jsonl").string() +
                       " --records " + (dir / "records.jsonl").string() + " --out " +
                       report_path.string() + " --json");
    REQUIRE(res.exit_code == 0);
    auto rep = json::parse(res.out);
    const double hand_mean = (1.0 + 0.9 + 0.0) / 3.0;
    CHECK(rep.at("mean").get<double>() == doctest::Approx(hand_mean).epsilon(1e-9));
    CHECK(json::parse(slurp_file(report_path)).at("mean").get<double>() ==
          doctest::Approx(hand_mean).epsilon(1e-9));
}

TEST_CASE("score: --runs glob aggregates per-seed response files") {
    auto dir = work_dir() / "score_runs";
    fs::create_directories(dir);
    std::vector<Record> records(1);
    records[0] = make_record("q0");
    records[0].answers = std::vector<std::string>(10, "yes");
    write_records_file(dir / "records.jsonl", records);
    {
        std::ofstream a(dir / "resp_seed0.jsonl", std::ios::trunc);
        a << json{{"query_id", "q0"}, {"response", "yes"}}.dump() << "\n";
        std::ofstream b(dir / "resp_seed1.jsonl", std::ios::trunc);
        b << json{{"query_id", "q0"}, {"response", "no"}}.dump() << "\n";
    }
    auto res = run_cli("score --metric vqa --records " + (dir / "records.jsonl").string() +
                       " --runs '" + (dir / "resp_seed*.jsonl").string() + "' --json");
    REQUIRE(res.exit_code == 0);
    auto rep = json::parse(res.out);
    CHECK(rep.at("runs").size() == 2);
    CHECK(rep.at("mean_of_runs").get<double>() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(rep.at("std_of_runs").get<double>() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("probe: fixed seed emits identical reports") {
    auto dir = work_dir() / "probe_fixed";
    fs::create_directories(dir);
    auto r1 = dir / "r1.json";
    auto r2 = dir / "r2.json";
    auto base = std::string("probe --segments 1x2,1x2,1x1 --dim 16 --seeds 20 --seed 3 --out ");
    REQUIRE(run_cli(base + r1.string()).exit_code == 0);
    REQUIRE(run_cli(base + r2.string()).exit_code == 0);
    CHECK(slurp_file(r1) == slurp_file(r2));
    auto rep = json::parse(slurp_file(r1));
    CHECK(rep.at("seeds_used").size() == 20);
}

TEST_CASE("select output is identical across --threads 1/4/16") {
    WorldOptions opts;
    opts.n_queries = 6;
    auto dw = make_disk_world("select_threads", 20, 21, opts);
    std::vector<std::string> outputs;
    for (int threads : {1, 4, 16}) {
        auto out = dw.dir / ("t" + std::to_string(threads) + ".jsonl");
        auto res = run_cli("select" + dataset_args(dw) +
                           "--method mmices --shots 3 --prefilter 8 --threads " +
                           std::to_string(threads) + " --out " + out.string());
        REQUIRE(res.exit_code == 0);
        outputs.push_back(slurp_file(out));
    }
    CHECK(outputs[0] == outputs[1]);
    CHECK(outputs[0] == outputs[2]);
}

TEST_CASE("config file values apply where flags are absent, flags win") {
    auto dw = make_disk_world("config_overlay", 8, 22);
    auto cfg_path = dw.dir / "run.json";
    {
        std::ofstream out(cfg_path, std::ios::trunc);
        out << json{{"manifest", dw.manifest.string()},
                    {"support", dw.support.string()},
                    {"query", dw.query.string()},
                    {"task", "vqa"},
                    {"method", "rices"},
                    {"shots", 2},
                    {"out", (dw.dir / "from_config.jsonl").string()}}
                   .dump();
    }
    auto res = run_cli("select --config " + cfg_path.string());
    REQUIRE(res.exit_code == 0);
    CHECK(fs::exists(dw.dir / "from_config.jsonl"));
    auto sel = load_selections(dw.dir / "from_config.jsonl");
    CHECK(sel[0].demo_ids.size() == 2);

    // flag overrides the config's shots
    auto res2 = run_cli("select --config " + cfg_path.string() + " --shots 3 --out " +
                        (dw.dir / "flag_wins.jsonl").string());
    REQUIRE(res2.exit_code == 0);
    CHECK(load_selections(dw.dir / "flag_wins.jsonl")[0].demo_ids.size() == 3);
}

TEST_CASE("unknown subcommand or bad flags exit 2") {
    CHECK(run_cli("frobnicate").exit_code == 2);
    CHECK(run_cli("select --no-such-flag").exit_code == 2);
    auto dw = make_disk_world("bad_method", 4, 23);
    auto res = run_cli("select" + dataset_args(dw) + "--method nope --out x.jsonl");
    CHECK(res.exit_code == 2);
}
