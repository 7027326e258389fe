#include "mmices/metrics.hpp"
#include "mmices/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mmices {

namespace {

// Tables from the official VQA evaluation code. Keys are lowercase because
// words are lowercased before the contraction pass.
const std::unordered_map<std::string, std::string>& contraction_map() {
    static const std::unordered_map<std::string, std::string> m = {
        {"aint", "ain't"}, {"arent", "aren't"}, {"cant", "can't"}, {"couldve", "could've"},
        {"couldnt", "couldn't"}, {"couldn'tve", "couldn't've"}, {"couldnt've", "couldn't've"},
        {"didnt", "didn't"}, {"doesnt", "doesn't"}, {"dont", "don't"}, {"hadnt", "hadn't"},
        {"hadnt've", "hadn't've"}, {"hadn'tve", "hadn't've"}, {"hasnt", "hasn't"},
        {"havent", "haven't"}, {"hed", "he'd"}, {"hed've", "he'd've"}, {"he'dve", "he'd've"},
        {"hes", "he's"}, {"howd", "how'd"}, {"howll", "how'll"}, {"hows", "how's"},
        {"id've", "i'd've"}, {"i'dve", "i'd've"}, {"im", "i'm"}, {"ive", "i've"},
        {"isnt", "isn't"}, {"itd", "it'd"}, {"itd've", "it'd've"}, {"it'dve", "it'd've"},
        {"itll", "it'll"}, {"let's", "let's"}, {"maam", "ma'am"}, {"mightnt", "mightn't"},
        {"mightnt've", "mightn't've"}, {"mightn'tve", "mightn't've"}, {"mightve", "might've"},
        {"mustnt", "mustn't"}, {"mustve", "must've"}, {"neednt", "needn't"},
        {"notve", "not've"}, {"oclock", "o'clock"}, {"oughtnt", "oughtn't"},
        {"ow's'at", "'ow's'at"}, {"'ows'at", "'ow's'at"}, {"'ow'sat", "'ow's'at"},
        {"shant", "shan't"}, {"shed've", "she'd've"}, {"she'dve", "she'd've"},
        {"she's", "she's"}, {"shouldve", "should've"}, {"shouldnt", "shouldn't"},
        {"shouldnt've", "shouldn't've"}, {"shouldn'tve", "shouldn't've"},
        {"somebody'd", "somebodyd"}, {"somebodyd've", "somebody'd've"},
        {"somebody'dve", "somebody'd've"}, {"somebodyll", "somebody'll"},
        {"somebodys", "somebody's"}, {"someoned", "someone'd"},
        {"someoned've", "someone'd've"}, {"someone'dve", "someone'd've"},
        {"someonell", "someone'll"}, {"someones", "someone's"}, {"somethingd", "something'd"},
        {"somethingd've", "something'd've"}, {"something'dve", "something'd've"},
        {"somethingll", "something'll"}, {"thats", "that's"}, {"thered", "there'd"},
        {"thered've", "there'd've"}, {"there'dve", "there'd've"}, {"therere", "there're"},
        {"theres", "there's"}, {"theyd", "they'd"}, {"theyd've", "they'd've"},
        {"they'dve", "they'd've"}, {"theyll", "they'll"}, {"theyre", "they're"},
        {"theyve", "they've"}, {"twas", "'twas"}, {"wasnt", "wasn't"},
        {"wed've", "we'd've"}, {"we'dve", "we'd've"}, {"weve", "we've"},
        {"werent", "weren't"}, {"whatll", "what'll"}, {"whatre", "what're"},
        {"whats", "what's"}, {"whatve", "what've"}, {"whens", "when's"},
        {"whered", "where'd"}, {"wheres", "where's"}, {"whereve", "where've"},
        {"whod", "who'd"}, {"whod've", "who'd've"}, {"who'dve", "who'd've"},
        {"wholl", "who'll"}, {"whos", "who's"}, {"whove", "who've"}, {"whyll", "why'll"},
        {"whyre", "why're"}, {"whys", "why's"}, {"wont", "won't"}, {"wouldve", "would've"},
        {"wouldnt", "wouldn't"}, {"wouldnt've", "wouldn't've"}, {"wouldn'tve", "wouldn't've"},
        {"yall", "y'all"}, {"yall'll", "y'all'll"}, {"y'allll", "y'all'll"},
        {"yall'd've", "y'all'd've"}, {"y'alld've", "y'all'd've"}, {"y'all'dve", "y'all'd've"},
        {"youd", "you'd"}, {"youd've", "you'd've"}, {"you'dve", "you'd've"},
        {"youll", "you'll"}, {"youre", "you're"}, {"youve", "you've"},
    };
    return m;
}

const std::unordered_map<std::string, std::string>& digit_map() {
    static const std::unordered_map<std::string, std::string> m = {
        {"none", "0"}, {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"},
        {"four", "4"}, {"five", "5"}, {"six", "6"}, {"seven", "7"}, {"eight", "8"},
        {"nine", "9"}, {"ten", "10"},
    };
    return m;
}

constexpr std::array<char, 21> kPunct = {';', '/', '[', ']', '"', '{', '}', '(', ')', '=', '+',
                                         '\\', '_', '-', '>', '<', '@', '`', ',', '?', '!'};

bool comma_between_digits(const std::string& s) {
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        if (s[i] == ',' && std::isdigit(static_cast<unsigned char>(s[i - 1])) &&
            std::isdigit(static_cast<unsigned char>(s[i + 1])))
            return true;
    }
    return false;
}

// Official punctuation pass: a punctuation mark adjacent to a space (or any
// comma sitting between digits) is deleted outright, otherwise it becomes a
// space. Periods are then removed unless they start a decimal.
std::string process_punctuation(const std::string& in) {
    std::string out = in;
    const bool digit_comma = comma_between_digits(in);
    for (char p : kPunct) {
        const std::string with_space_after{p, ' '};
        const std::string with_space_before{' ', p};
        bool remove = digit_comma || in.find(with_space_after) != std::string::npos ||
                      in.find(with_space_before) != std::string::npos;
        std::string repl = remove ? "" : " ";
        std::string next;
        next.reserve(out.size());
        for (char c : out) {
            if (c == p)
                next += repl;
            else
                next += c;
        }
        out = std::move(next);
    }
    std::string no_period;
    no_period.reserve(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] == '.' &&
            !(i + 1 < out.size() && std::isdigit(static_cast<unsigned char>(out[i + 1]))))
            continue;
        no_period += out[i];
    }
    return no_period;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w)
        out.push_back(std::move(w));
    return out;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs)
        acc += x;
    return xs.empty() ? 0.0 : acc / double(xs.size());
}

double pop_std(const std::vector<double>& xs, double mean) {
    if (xs.empty())
        return 0.0;
    double acc = 0.0;
    for (double x : xs)
        acc += (x - mean) * (x - mean);
    return std::sqrt(acc / double(xs.size()));
}

ScoreReport finalize_report(std::string metric, std::map<std::string, double> per_query) {
    ScoreReport rep;
    rep.metric = std::move(metric);
    rep.per_query = std::move(per_query);
    std::vector<double> vals;
    vals.reserve(rep.per_query.size());
    for (const auto& [id, v] : rep.per_query)
        vals.push_back(v);
    rep.mean = mean_of(vals);
    rep.runs = {rep.mean};
    rep.mean_of_runs = rep.mean;
    rep.std_of_runs = 0.0;
    return rep;
}

// ---- CIDEr-D ----------------------------------------------------------

constexpr int kMaxN = 4;
constexpr double kSigma = 6.0;

using GramCounts = std::unordered_map<std::string, double>;

std::vector<std::string> tokenize_caption(const std::string& s) {
    return split_ws(lower(s));
}

// n-gram multiset per order; grams are the tokens joined with '\x1f'
std::array<GramCounts, kMaxN> count_ngrams(const std::vector<std::string>& toks) {
    std::array<GramCounts, kMaxN> out;
    for (int n = 1; n <= kMaxN; ++n) {
        if (toks.size() < std::size_t(n))
            break;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key = toks[i];
            for (int j = 1; j < n; ++j) {
                key += '\x1f';
                key += toks[i + j];
            }
            out[n - 1][key] += 1.0;
        }
    }
    return out;
}

struct TfIdfVec {
    std::array<GramCounts, kMaxN> weights;
    std::array<double, kMaxN> norm{}; // L2 norms per order
    std::size_t length = 0;           // token count
};

TfIdfVec to_tfidf(const std::vector<std::string>& toks,
                  const std::array<GramCounts, kMaxN>& df, double log_corpus) {
    TfIdfVec v;
    v.length = toks.size();
    auto counts = count_ngrams(toks);
    for (int n = 0; n < kMaxN; ++n) {
        double norm_sq = 0.0;
        for (const auto& [gram, tf] : counts[n]) {
            double d = 1.0;
            auto it = df[n].find(gram);
            if (it != df[n].end())
                d = std::max(1.0, it->second);
            double w = tf * (log_corpus - std::log(d));
            v.weights[n][gram] = w;
            norm_sq += w * w;
        }
        v.norm[n] = std::sqrt(norm_sq);
    }
    return v;
}

double image_cider(const TfIdfVec& cand, const std::vector<TfIdfVec>& refs) {
    std::array<double, kMaxN> acc{};
    for (const auto& ref : refs) {
        double delta = double(cand.length) - double(ref.length);
        double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
        for (int n = 0; n < kMaxN; ++n) {
            double dot = 0.0;
            for (const auto& [gram, cw] : cand.weights[n]) {
                auto it = ref.weights[n].find(gram);
                if (it != ref.weights[n].end())
                    dot += std::min(cw, it->second) * it->second;
            }
            if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0)
                dot /= cand.norm[n] * ref.norm[n];
            acc[n] += dot * penalty;
        }
    }
    double score = 0.0;
    for (int n = 0; n < kMaxN; ++n)
        score += acc[n] / double(refs.size());
    return score / double(kMaxN) * 10.0;
}

} // namespace

std::string normalize_answer(std::string_view s) {
    std::string text(s);
    for (char& c : text) {
        if (c == '\n' || c == '\t')
            c = ' ';
    }
    text = process_punctuation(text);

    std::vector<std::string> words = split_ws(lower(text));
    std::vector<std::string> kept;
    kept.reserve(words.size());
    for (auto& w : words) {
        auto dit = digit_map().find(w);
        if (dit != digit_map().end())
            w = dit->second;
        if (w == "a" || w == "an" || w == "the")
            continue;
        kept.push_back(std::move(w));
    }
    for (auto& w : kept) {
        auto cit = contraction_map().find(w);
        if (cit != contraction_map().end())
            w = cit->second;
    }

    std::string out;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        if (i > 0)
            out += ' ';
        out += kept[i];
    }
    return out;
}

double vqa_accuracy(std::string_view pred, const std::vector<std::string>& human_answers) {
    if (human_answers.empty())
        throw Error("vqa_accuracy: empty human answer list");
    const std::string p = normalize_answer(pred);
    std::size_t m = 0;
    for (const auto& a : human_answers)
        m += normalize_answer(a) == p ? 1 : 0;
    // Every fold omitting a match scores min((m-1)/3, 1); every other fold
    // scores min(m/3, 1). Folding over counts keeps the mean bit-exactly
    // invariant to answer order.
    const std::size_t n = human_answers.size();
    double keep = std::min(double(m) / 3.0, 1.0);
    double drop = m > 0 ? std::min(double(m - 1) / 3.0, 1.0) : 0.0;
    return (double(n - m) * keep + double(m) * drop) / double(n);
}

double answers_accuracy(std::string_view pred, const std::vector<std::string>& answers) {
    if (answers.empty())
        throw Error("answers_accuracy: empty answer list");
    if (answers.size() == 10)
        return vqa_accuracy(pred, answers);
    const std::string p = normalize_answer(pred);
    for (const auto& a : answers) {
        if (normalize_answer(a) == p)
            return 1.0;
    }
    return 0.0;
}

ScoreReport cider(const std::map<std::string, std::string>& candidates,
                  const std::map<std::string, std::vector<std::string>>& references,
                  std::vector<std::string>* warnings) {
    if (candidates.empty())
        throw Error("cider: empty candidate set");
    for (const auto& [id, cand] : candidates) {
        auto it = references.find(id);
        if (it == references.end() || it->second.empty())
            throw Error("cider: candidate \"" + id + "\" has no references");
    }

    // document frequency: one count per image whose reference set contains
    // the gram, computed over the scored images only
    std::array<GramCounts, kMaxN> df;
    for (const auto& [id, cand] : candidates) {
        std::array<std::unordered_set<std::string>, kMaxN> seen;
        for (const auto& ref : references.at(id)) {
            auto counts = count_ngrams(tokenize_caption(ref));
            for (int n = 0; n < kMaxN; ++n) {
                for (const auto& [gram, tf] : counts[n])
                    seen[n].insert(gram);
            }
        }
        for (int n = 0; n < kMaxN; ++n) {
            for (const auto& gram : seen[n])
                df[n][gram] += 1.0;
        }
    }
    const double log_corpus = std::log(double(candidates.size()));

    std::vector<std::pair<std::string, const std::string*>> items;
    items.reserve(candidates.size());
    for (const auto& [id, cand] : candidates)
        items.emplace_back(id, &cand);

    std::vector<double> scores(items.size());
    std::vector<std::string> empties(items.size());

    // per-image scoring is independent; the df table is read-only here
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < (long long)items.size(); ++i) {
        const auto& [id, cand] = items[std::size_t(i)];
        auto cand_toks = tokenize_caption(*cand);
        if (cand_toks.empty())
            empties[std::size_t(i)] = id;
        auto cand_vec = to_tfidf(cand_toks, df, log_corpus);
        std::vector<TfIdfVec> ref_vecs;
        for (const auto& ref : references.at(id))
            ref_vecs.push_back(to_tfidf(tokenize_caption(ref), df, log_corpus));
        scores[std::size_t(i)] = image_cider(cand_vec, ref_vecs);
    }

    std::map<std::string, double> per_query;
    for (std::size_t i = 0; i < items.size(); ++i) {
        per_query[items[i].first] = scores[i];
        if (warnings && !empties[i].empty())
            warnings->push_back("empty candidate caption for \"" + empties[i] + "\" scores 0");
    }
    return finalize_report("cider", std::move(per_query));
}

ScoreReport score_vqa(const std::map<std::string, std::string>& responses,
                      const std::vector<Record>& records) {
    std::unordered_map<std::string, const Record*> by_id;
    for (const auto& r : records)
        by_id.emplace(r.id, &r);

    std::map<std::string, double> per_query;
    for (const auto& [id, resp] : responses) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw Error("response for unknown query \"" + id + "\"");
        if (it->second->answers.empty())
            throw Error("query \"" + id + "\" has no gold answers to score against");
        per_query[id] = answers_accuracy(resp, it->second->answers);
    }
    if (per_query.empty())
        throw Error("no responses to score");
    return finalize_report("vqa_accuracy", std::move(per_query));
}

ScoreReport score_cider(const std::map<std::string, std::string>& responses,
                        const std::vector<Record>& records, std::vector<std::string>* warnings) {
    std::map<std::string, std::vector<std::string>> references;
    std::unordered_map<std::string, const Record*> by_id;
    for (const auto& r : records)
        by_id.emplace(r.id, &r);
    for (const auto& [id, resp] : responses) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw Error("response for unknown query \"" + id + "\"");
        references[id] = it->second->captions;
    }
    return cider(responses, references, warnings);
}

ScoreReport aggregate_runs(const std::vector<ScoreReport>& per_seed_reports) {
    if (per_seed_reports.empty())
        throw Error("aggregate_runs: no reports");
    const std::string& metric = per_seed_reports.front().metric;
    for (const auto& rep : per_seed_reports) {
        if (rep.metric != metric)
            throw Error("aggregate_runs: metric mismatch (" + metric + " vs " + rep.metric + ")");
        if (rep.per_query.size() != per_seed_reports.front().per_query.size())
            throw Error("aggregate_runs: reports cover different query sets");
    }

    ScoreReport out;
    out.metric = metric;
    for (const auto& rep : per_seed_reports)
        out.runs.push_back(rep.mean);
    out.mean_of_runs = mean_of(out.runs);
    out.std_of_runs = pop_std(out.runs, out.mean_of_runs);

    // element-wise mean per query; all reports must name the same queries
    for (const auto& [id, v] : per_seed_reports.front().per_query) {
        double acc = 0.0;
        for (const auto& rep : per_seed_reports) {
            auto it = rep.per_query.find(id);
            if (it == rep.per_query.end())
                throw Error("aggregate_runs: query \"" + id + "\" missing from a run");
            acc += it->second;
        }
        out.per_query[id] = acc / double(per_seed_reports.size());
    }
    std::vector<double> vals;
    for (const auto& [id, v] : out.per_query)
        vals.push_back(v);
    out.mean = mean_of(vals);
    return out;
}

std::string ScoreReport::to_json() const {
    nlohmann::json j;
    j["metric"] = metric;
    j["per_query"] = per_query;
    j["mean"] = mean;
    j["runs"] = runs;
    j["mean_of_runs"] = mean_of_runs;
    j["std_of_runs"] = std_of_runs;
    return j.dump(2) + "\n";
}

ScoreReport ScoreReport::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open report: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("report " + path.string() + ": " + e.what());
    }
    ScoreReport rep;
    rep.metric = j.at("metric").get<std::string>();
    rep.per_query = j.at("per_query").get<std::map<std::string, double>>();
    rep.mean = j.at("mean").get<double>();
    rep.runs = j.at("runs").get<std::vector<double>>();
    rep.mean_of_runs = j.at("mean_of_runs").get<double>();
    rep.std_of_runs = j.at("std_of_runs").get<double>();
    return rep;
}

void ScoreReport::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error("cannot open for writing: " + path.string());
    out << to_json();
    if (!out)
        throw Error("write failed: " + path.string());
}

std::map<std::string, std::string> load_responses(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open responses file: " + path.string());
    std::map<std::string, std::string> out;
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
            auto id = j.at("query_id").get<std::string>();
            auto resp = j.at("response").get<std::string>();
            if (!out.emplace(std::move(id), std::move(resp)).second)
                throw Error(where.str() + ": duplicate query_id");
        } catch (const nlohmann::json::exception& e) {
            throw Error(where.str() + ": " + e.what());
        }
    }
    return out;
}

} // namespace mmices
