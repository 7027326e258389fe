#include "mmices/attention_probe.hpp"
#include "mmices/error.hpp"
#include "mmices/rng.hpp"
#include "mmices/similarity.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mmices::probe {

std::size_t InterleaveLayout::total_image_tokens() const {
    std::size_t n = 0;
    for (const auto& s : segments)
        n += s.image_tokens;
    return n;
}

std::size_t InterleaveLayout::total_text_tokens() const {
    std::size_t n = 0;
    for (const auto& s : segments)
        n += s.text_tokens;
    return n;
}

std::vector<std::size_t> InterleaveLayout::text_segment_of() const {
    std::vector<std::size_t> out;
    out.reserve(total_text_tokens());
    for (std::size_t s = 0; s < segments.size(); ++s) {
        for (std::size_t i = 0; i < segments[s].text_tokens; ++i)
            out.push_back(s);
    }
    return out;
}

std::vector<std::size_t> InterleaveLayout::image_segment_of() const {
    std::vector<std::size_t> out;
    out.reserve(total_image_tokens());
    for (std::size_t s = 0; s < segments.size(); ++s) {
        for (std::size_t i = 0; i < segments[s].image_tokens; ++i)
            out.push_back(s);
    }
    return out;
}

void InterleaveLayout::validate() const {
    if (segments.empty())
        throw Error("layout needs at least one segment");
    for (std::size_t s = 0; s < segments.size(); ++s) {
        if (segments[s].text_tokens == 0)
            throw Error("layout segment " + std::to_string(s) + " needs at least one text token");
    }
}

InterleaveLayout InterleaveLayout::parse(const std::string& spec) {
    InterleaveLayout layout;
    std::istringstream is(spec);
    std::string part;
    while (std::getline(is, part, ',')) {
        auto x = part.find('x');
        if (x == std::string::npos)
            throw Error("bad segment spec \"" + part + "\" (expected IMGxTXT, e.g. 1x2)");
        try {
            SegmentTokens st;
            st.image_tokens = std::stoul(part.substr(0, x));
            st.text_tokens = std::stoul(part.substr(x + 1));
            layout.segments.push_back(st);
        } catch (const std::exception&) {
            throw Error("bad segment spec \"" + part + "\" (expected IMGxTXT, e.g. 1x2)");
        }
    }
    layout.validate();
    return layout;
}

CrossMask build_cross_mask(const InterleaveLayout& layout) {
    layout.validate();
    CrossMask mask;
    mask.n_text = layout.total_text_tokens();
    mask.n_image = layout.total_image_tokens();
    mask.allow.assign(mask.n_text * mask.n_image, 0);

    auto text_seg = layout.text_segment_of();
    auto image_seg = layout.image_segment_of();
    for (std::size_t t = 0; t < mask.n_text; ++t) {
        for (std::size_t v = 0; v < mask.n_image; ++v) {
            if (text_seg[t] == image_seg[v])
                mask.allow[t * mask.n_image + v] = 1;
        }
    }
    return mask;
}

namespace {

Mat draw_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale) {
    Mat m(rows, cols);
    for (auto& x : m.v)
        x = gaussian(rng) * scale;
    return m;
}

// out = a (r x d) * b (d x d)
Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            double aik = a.at(i, k);
            for (std::size_t j = 0; j < b.cols; ++j)
                out.at(i, j) += aik * b.at(k, j);
        }
    }
    return out;
}

} // namespace

ProbeWeights ProbeWeights::make(std::uint64_t seed, std::size_t dim, std::size_t n_blocks) {
    if (dim == 0)
        throw Error("probe dim must be > 0");
    if (n_blocks == 0)
        throw Error("probe needs at least one block");
    ProbeWeights w;
    w.dim = dim;
    w.seed = seed;
    const double scale = 1.0 / std::sqrt(double(dim));
    for (std::size_t b = 0; b < n_blocks; ++b) {
        std::mt19937_64 rng(mix_seed(seed, 0x5eed0000 + b));
        BlockWeights bw;
        bw.wq_cross = draw_matrix(rng, dim, dim, scale);
        bw.wk_cross = draw_matrix(rng, dim, dim, scale);
        bw.wv_cross = draw_matrix(rng, dim, dim, scale);
        bw.wq_self = draw_matrix(rng, dim, dim, scale);
        bw.wk_self = draw_matrix(rng, dim, dim, scale);
        bw.wv_self = draw_matrix(rng, dim, dim, scale);
        w.blocks.push_back(std::move(bw));
    }
    return w;
}

Mat draw_embeddings(std::uint64_t seed, std::size_t rows, std::size_t dim) {
    std::mt19937_64 rng(seed);
    return draw_matrix(rng, rows, dim, 1.0 / std::sqrt(double(dim)));
}

ForwardResult forward(const InterleaveLayout& layout, const ProbeWeights& weights,
                      const Mat& image_embs, const Mat& text_embs, VisualMask mask_kind) {
    layout.validate();
    const std::size_t d = weights.dim;
    const std::size_t n_img = layout.total_image_tokens();
    const std::size_t n_txt = layout.total_text_tokens();
    if (image_embs.rows != n_img || (n_img > 0 && image_embs.cols != d))
        throw Error("image embedding shape does not match layout/dim");
    if (text_embs.rows != n_txt || text_embs.cols != d)
        throw Error("text embedding shape does not match layout/dim");

    // Visual masking zeroes embeddings before any attention, mirroring
    // "setting the corresponding weights to 0" at the input level.
    Mat images = image_embs;
    const std::size_t query_seg = layout.segments.size() - 1;
    auto image_seg = layout.image_segment_of();
    for (std::size_t v = 0; v < n_img; ++v) {
        bool is_query = image_seg[v] == query_seg;
        bool zero = (mask_kind == VisualMask::mask_demo_visual && !is_query) ||
                    (mask_kind == VisualMask::mask_query_visual && is_query);
        if (zero) {
            for (std::size_t c = 0; c < d; ++c)
                images.at(v, c) = 0.0;
        }
    }

    const CrossMask mask = build_cross_mask(layout);
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

    Mat h = text_embs;
    ForwardResult res;
    for (const auto& blk : weights.blocks) {
        // masked cross-attention: text queries, image keys/values. Masked
        // columns are skipped outright, never multiplied by zero, so the
        // query rows' arithmetic is untouched by what demo embeddings hold.
        Mat q = matmul(h, blk.wq_cross);
        Mat k(n_img, d), v(n_img, d);
        if (n_img > 0) {
            k = matmul(images, blk.wk_cross);
            v = matmul(images, blk.wv_cross);
        }
        Mat cross = h; // residual
        Mat cross_attn(n_txt, n_img);
        for (std::size_t t = 0; t < n_txt; ++t) {
            std::vector<std::size_t> allowed;
            for (std::size_t c = 0; c < n_img; ++c) {
                if (mask.at(t, c))
                    allowed.push_back(c);
            }
            if (allowed.empty())
                continue; // no preceding image in this segment: identity residual
            std::vector<double> scores(allowed.size());
            double max_s = -HUGE_VAL;
            for (std::size_t a = 0; a < allowed.size(); ++a) {
                double s = 0.0;
                for (std::size_t cdim = 0; cdim < d; ++cdim)
                    s += q.at(t, cdim) * k.at(allowed[a], cdim);
                scores[a] = s * inv_sqrt_d;
                max_s = std::max(max_s, scores[a]);
            }
            double denom = 0.0;
            for (auto& s : scores) {
                s = std::exp(s - max_s);
                denom += s;
            }
            for (std::size_t a = 0; a < allowed.size(); ++a) {
                double w = scores[a] / denom;
                cross_attn.at(t, allowed[a]) = w;
                for (std::size_t cdim = 0; cdim < d; ++cdim)
                    cross.at(t, cdim) += w * v.at(allowed[a], cdim);
            }
        }

        // causal self-attention over text tokens
        Mat qs = matmul(cross, blk.wq_self);
        Mat ks = matmul(cross, blk.wk_self);
        Mat vs = matmul(cross, blk.wv_self);
        Mat attn(n_txt, n_txt);
        Mat out = cross; // residual
        for (std::size_t t = 0; t < n_txt; ++t) {
            std::vector<double> scores(t + 1);
            double max_s = -HUGE_VAL;
            for (std::size_t u = 0; u <= t; ++u) {
                double s = 0.0;
                for (std::size_t cdim = 0; cdim < d; ++cdim)
                    s += qs.at(t, cdim) * ks.at(u, cdim);
                scores[u] = s * inv_sqrt_d;
                max_s = std::max(max_s, scores[u]);
            }
            double denom = 0.0;
            for (auto& s : scores) {
                s = std::exp(s - max_s);
                denom += s;
            }
            for (std::size_t u = 0; u <= t; ++u) {
                double w = scores[u] / denom;
                attn.at(t, u) = w;
                for (std::size_t cdim = 0; cdim < d; ++cdim)
                    out.at(t, cdim) += w * vs.at(u, cdim);
            }
        }

        res.cross_attn = std::move(cross_attn);
        res.cross_out = std::move(cross);
        res.self_attn = std::move(attn);
        h = std::move(out);
    }
    res.hidden = std::move(h);
    return res;
}

PerSeedCosines probe_cosines(const InterleaveLayout& layout, const ProbeWeights& weights,
                             const Mat& image_embs, const Mat& text_embs) {
    auto standard = forward(layout, weights, image_embs, text_embs, VisualMask::none);
    auto no_demo = forward(layout, weights, image_embs, text_embs, VisualMask::mask_demo_visual);
    auto no_query = forward(layout, weights, image_embs, text_embs, VisualMask::mask_query_visual);

    const std::size_t last = layout.total_text_tokens() - 1;
    PerSeedCosines out;
    out.hidden_mask_demo = cosine(standard.hidden.row(last), no_demo.hidden.row(last));
    out.hidden_mask_query = cosine(standard.hidden.row(last), no_query.hidden.row(last));
    out.attn_mask_demo = cosine(standard.self_attn.row(last), no_demo.self_attn.row(last));
    out.attn_mask_query = cosine(standard.self_attn.row(last), no_query.self_attn.row(last));
    return out;
}

ProbeReport run_probe(const InterleaveLayout& layout, std::size_t n_seeds, std::size_t dim,
                      std::uint64_t base_seed, std::size_t n_blocks) {
    layout.validate();
    if (n_seeds == 0)
        throw Error("probe needs at least one seed");

    const std::size_t n_img = layout.total_image_tokens();
    const std::size_t n_txt = layout.total_text_tokens();

    std::vector<PerSeedCosines> per_seed(n_seeds);
    std::vector<std::string> errors(n_seeds);

#pragma omp parallel for schedule(static)
    for (long long i = 0; i < (long long)n_seeds; ++i) {
        try {
            const std::uint64_t seed = base_seed + std::uint64_t(i);
            auto weights = ProbeWeights::make(mix_seed(seed, 0x77eaf), dim, n_blocks);
            auto images = draw_embeddings(mix_seed(seed, 0x11a6e), n_img, dim);
            auto texts = draw_embeddings(mix_seed(seed, 0x7e47), n_txt, dim);
            per_seed[std::size_t(i)] = probe_cosines(layout, weights, images, texts);
        } catch (const std::exception& e) {
            errors[std::size_t(i)] = e.what();
        }
    }
    for (std::size_t i = 0; i < n_seeds; ++i) {
        if (!errors[i].empty())
            throw Error("probe seed " + std::to_string(base_seed + i) + ": " + errors[i]);
    }

    ProbeReport rep;
    for (std::size_t i = 0; i < n_seeds; ++i) {
        rep.cos_hidden_mask_demo += per_seed[i].hidden_mask_demo;
        rep.cos_hidden_mask_query += per_seed[i].hidden_mask_query;
        rep.cos_attn_mask_demo += per_seed[i].attn_mask_demo;
        rep.cos_attn_mask_query += per_seed[i].attn_mask_query;
        rep.seeds_used.push_back(base_seed + i);
    }
    rep.cos_hidden_mask_demo /= double(n_seeds);
    rep.cos_hidden_mask_query /= double(n_seeds);
    rep.cos_attn_mask_demo /= double(n_seeds);
    rep.cos_attn_mask_query /= double(n_seeds);
    return rep;
}

std::string ProbeReport::to_json() const {
    nlohmann::json j;
    j["cos_hidden_mask_demo"] = cos_hidden_mask_demo;
    j["cos_hidden_mask_query"] = cos_hidden_mask_query;
    j["cos_attn_mask_demo"] = cos_attn_mask_demo;
    j["cos_attn_mask_query"] = cos_attn_mask_query;
    j["seeds_used"] = seeds_used;
    return j.dump(2) + "\n";
}

void ProbeReport::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error("cannot open for writing: " + path.string());
    out << to_json();
    if (!out)
        throw Error("write failed: " + path.string());
}

} // namespace mmices::probe
