// Regenerates the committed end-to-end fixture: 20 support records, 5
// queries, deterministic embeddings, a manifest, canned responses, and the
// template/word-pool files. Golden outputs are produced by running the CLI
// on these inputs (see tests/fixtures/e2e/README).

#include "mmices/embedding_store.hpp"
#include "mmices/rng.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <vector>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Item {
    std::string id;
    std::string question;
    std::string answer;      // dominant human answer
    std::string alt;         // minority answer, mixed into the 10
};

const std::vector<Item> kSupport = {
    {"s00", "What sign is this?", "turn left", "left turn"},
    {"s01", "What sign is this?", "no entry", "do not enter"},
    {"s02", "What sign is this?", "stop", "stop sign"},
    {"s03", "What color is the bus?", "red", "dark red"},
    {"s04", "What color is the bus?", "yellow", "orange"},
    {"s05", "What animal is shown?", "dog", "puppy"},
    {"s06", "What animal is shown?", "cat", "kitten"},
    {"s07", "What animal is shown?", "elephant", "baby elephant"},
    {"s08", "How many people are there?", "2", "two"},
    {"s09", "How many people are there?", "5", "five"},
    {"s10", "What is the man holding?", "umbrella", "red umbrella"},
    {"s11", "What is the man holding?", "guitar", "acoustic guitar"},
    {"s12", "What food is this?", "pizza", "cheese pizza"},
    {"s13", "What food is this?", "donut", "doughnut"},
    {"s14", "What sport is being played?", "tennis", "singles tennis"},
    {"s15", "What sport is being played?", "baseball", "softball"},
    {"s16", "Where was this photo taken?", "beach", "seaside"},
    {"s17", "Where was this photo taken?", "kitchen", "home kitchen"},
    {"s18", "What is on the table?", "laptop", "computer"},
    {"s19", "What is on the table?", "flowers", "vase of flowers"},
};

const std::vector<Item> kQueries = {
    {"q0", "What sign is this?", "no parking", "parking"},
    {"q1", "What color is the bus?", "blue", "light blue"},
    {"q2", "What animal is shown?", "horse", "pony"},
    {"q3", "What food is this?", "sandwich", "sub"},
    {"q4", "What sport is being played?", "soccer", "football"},
};

json record_json(const Item& it) {
    // 7 dominant + 3 minority answers: matching the dominant answer scores
    // 1.0 under the leave-one-out rule, the minority answer scores 0.9
    json answers = json::array();
    for (int i = 0; i < 7; ++i)
        answers.push_back(it.answer);
    for (int i = 0; i < 3; ++i)
        answers.push_back(it.alt);
    return json{{"id", it.id},
                {"image_ref", "img_" + it.id},
                {"question", it.question},
                {"answers", answers}};
}

void write_records(const fs::path& path, const std::vector<Item>& items) {
    std::ofstream out(path, std::ios::trunc);
    for (const auto& it : items)
        out << record_json(it).dump() << "\n";
}

mmices::EmbeddingMatrix make_matrix(const std::vector<std::string>& ids, std::size_t dim,
                                    std::uint64_t seed) {
    std::vector<float> data(ids.size() * dim);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        std::mt19937_64 rng(mmices::mix_seed(seed, mmices::fnv1a64(ids[r])));
        for (std::size_t c = 0; c < dim; ++c)
            data[r * dim + c] = float(mmices::gaussian(rng));
    }
    return mmices::normalize(
        mmices::EmbeddingMatrix::create(ids, dim, std::move(data), false));
}

} // namespace

int main(int argc, char** argv) {
    std::string out_dir = ".";
    std::size_t dim = 8;
    CLI::App app{"regenerate the end-to-end test fixture"};
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--dim", dim, "embedding dimension");
    CLI11_PARSE(app, argc, argv);

    fs::create_directories(out_dir);
    fs::path dir(out_dir);

    write_records(dir / "support.jsonl", kSupport);
    write_records(dir / "query.jsonl", kQueries);

    std::vector<std::string> ids;
    for (const auto& it : kSupport)
        ids.push_back(it.id);
    for (const auto& it : kQueries)
        ids.push_back(it.id);
    std::vector<std::string> visual_ids = ids;
    visual_ids.push_back("blank255");

    write_matrix(make_matrix(visual_ids, dim, 0x815a1ull), dir / "visual.mmeb");
    write_matrix(make_matrix(ids, dim, 0x7e87a1ull), dir / "textual.mmeb");

    std::ofstream man(dir / "manifest.json", std::ios::trunc);
    man << json{{"visual_path", "visual.mmeb"},
                {"textual_path", "textual.mmeb"},
                {"blank_image_id", "blank255"}}
               .dump(2)
        << "\n";

    // canned model responses: q0/q1 hit the dominant answer, q2 hits the
    // minority one, q3/q4 miss
    std::ofstream resp(dir / "responses.jsonl", std::ios::trunc);
    resp << json{{"query_id", "q0"}, {"response", "No Parking."}}.dump() << "\n";
    resp << json{{"query_id", "q1"}, {"response", "blue"}}.dump() << "\n";
    resp << json{{"query_id", "q2"}, {"response", "a pony"}}.dump() << "\n";
    resp << json{{"query_id", "q3"}, {"response", "hot dog"}}.dump() << "\n";
    resp << json{{"query_id", "q4"}, {"response", "hockey"}}.dump() << "\n";

    std::ofstream tmpl(dir / "templates.json", std::ios::trunc);
    tmpl << json{{"vqa_demo", "Question: {question} Short answer: {answer}"},
                 {"vqa_query", "Question: {question} Short answer:"},
                 {"caption_demo", "Output: {caption}"},
                 {"caption_query", "Output:"}}
                .dump(2)
         << "\n";

    std::ofstream pool(dir / "word_pool.txt", std::ios::trunc);
    for (const char* w : {"apple", "breeze", "copper", "dune", "ember", "fjord", "glint",
                          "harbor", "iris", "jolt"})
        pool << w << "\n";

    std::cout << "fixture written to " << dir.string() << "\n";
    return 0;
}
