#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmices/attention_probe.hpp"
#include "mmices/error.hpp"
#include "mmices/rng.hpp"

#include <cmath>
#include <random>

using namespace mmices;
using namespace mmices::probe;

namespace {

// Rule-by-rule reference: walk the interleaved token stream; a text token
// may attend to the image-token group of the nearest image at or before it,
// and only when that image sits in the text token's own segment.
std::vector<std::vector<bool>> enumerator_mask(const InterleaveLayout& layout) {
    struct Token {
        bool is_image;
        std::size_t segment;
        std::size_t index_within_kind;
    };
    std::vector<Token> stream;
    std::size_t img_idx = 0, txt_idx = 0;
    for (std::size_t s = 0; s < layout.segments.size(); ++s) {
        for (std::size_t i = 0; i < layout.segments[s].image_tokens; ++i)
            stream.push_back({true, s, img_idx++});
        for (std::size_t i = 0; i < layout.segments[s].text_tokens; ++i)
            stream.push_back({false, s, txt_idx++});
    }

    std::vector<std::vector<bool>> allow(txt_idx, std::vector<bool>(img_idx, false));
    for (std::size_t p = 0; p < stream.size(); ++p) {
        if (stream[p].is_image)
            continue;
        // nearest preceding image token
        for (std::size_t back = p; back-- > 0;) {
            if (!stream[back].is_image)
                continue;
            if (stream[back].segment == stream[p].segment) {
                for (const auto& tok : stream) {
                    if (tok.is_image && tok.segment == stream[back].segment)
                        allow[stream[p].index_within_kind][tok.index_within_kind] = true;
                }
            }
            break; // an image from another segment blocks nothing further
        }
    }
    return allow;
}

Mat zeros(std::size_t r, std::size_t c) {
    return Mat(r, c);
}

// independent dense forward pass: full score matrices, additive -inf
// masking, exp over every column
ForwardResult reference_forward(const InterleaveLayout& layout, const ProbeWeights& w,
                                Mat images, const Mat& texts, VisualMask mask_kind) {
    const std::size_t d = w.dim;
    const std::size_t n_img = images.rows;
    const std::size_t n_txt = texts.rows;
    const auto image_seg = layout.image_segment_of();
    const std::size_t query_seg = layout.segments.size() - 1;

    for (std::size_t vtok = 0; vtok < n_img; ++vtok) {
        bool is_query = image_seg[vtok] == query_seg;
        if ((mask_kind == VisualMask::mask_demo_visual && !is_query) ||
            (mask_kind == VisualMask::mask_query_visual && is_query)) {
            for (std::size_t c = 0; c < d; ++c)
                images.at(vtok, c) = 0.0;
        }
    }

    auto mm = [d](const Mat& a, const Mat& b) {
        Mat out(a.rows, d);
        for (std::size_t i = 0; i < a.rows; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0;
                for (std::size_t k = 0; k < d; ++k)
                    acc += a.at(i, k) * b.at(k, j);
                out.at(i, j) = acc;
            }
        return out;
    };

    const auto& blk = w.blocks.front();
    auto mask = build_cross_mask(layout);
    Mat q = mm(texts, blk.wq_cross), k = mm(images, blk.wk_cross), v = mm(images, blk.wv_cross);
    Mat scores(n_txt, n_img);
    for (std::size_t t = 0; t < n_txt; ++t)
        for (std::size_t c = 0; c < n_img; ++c) {
            double acc = 0;
            for (std::size_t j = 0; j < d; ++j)
                acc += q.at(t, j) * k.at(c, j);
            scores.at(t, c) = mask.at(t, c) ? acc / std::sqrt(double(d)) : -HUGE_VAL;
        }
    Mat cross = texts;
    for (std::size_t t = 0; t < n_txt; ++t) {
        double mx = -HUGE_VAL;
        for (std::size_t c = 0; c < n_img; ++c)
            mx = std::max(mx, scores.at(t, c));
        if (mx == -HUGE_VAL)
            continue;
        double denom = 0;
        for (std::size_t c = 0; c < n_img; ++c)
            denom += std::exp(scores.at(t, c) - mx);
        for (std::size_t c = 0; c < n_img; ++c) {
            double wgt = std::exp(scores.at(t, c) - mx) / denom;
            for (std::size_t j = 0; j < d; ++j)
                cross.at(t, j) += wgt * v.at(c, j);
        }
    }

    Mat qs = mm(cross, blk.wq_self), ks = mm(cross, blk.wk_self), vs = mm(cross, blk.wv_self);
    Mat attn(n_txt, n_txt);
    Mat hidden = cross;
    for (std::size_t t = 0; t < n_txt; ++t) {
        double mx = -HUGE_VAL;
        std::vector<double> sc(n_txt, -HUGE_VAL);
        for (std::size_t u = 0; u <= t; ++u) {
            double acc = 0;
            for (std::size_t j = 0; j < d; ++j)
                acc += qs.at(t, j) * ks.at(u, j);
            sc[u] = acc / std::sqrt(double(d));
            mx = std::max(mx, sc[u]);
        }
        double denom = 0;
        for (std::size_t u = 0; u < n_txt; ++u)
            denom += std::exp(sc[u] - mx);
        for (std::size_t u = 0; u < n_txt; ++u) {
            double wgt = std::exp(sc[u] - mx) / denom;
            attn.at(t, u) = wgt;
            for (std::size_t j = 0; j < d; ++j)
                hidden.at(t, j) += wgt * vs.at(u, j);
        }
    }

    ForwardResult res;
    res.hidden = std::move(hidden);
    res.self_attn = std::move(attn);
    res.cross_out = std::move(cross);
    return res;
}

InterleaveLayout layout_of(std::initializer_list<SegmentTokens> segs) {
    InterleaveLayout l;
    l.segments = segs;
    return l;
}

} // namespace

TEST_CASE("two demos + query: each text row sees only its own segment's image") {
    auto layout = layout_of({{1, 2}, {1, 2}, {1, 1}});
    auto mask = build_cross_mask(layout);
    REQUIRE(mask.n_text == 5);
    REQUIRE(mask.n_image == 3);
    // query text (row 4) attends only to image 3 (col 2)
    CHECK(!mask.at(4, 0));
    CHECK(!mask.at(4, 1));
    CHECK(mask.at(4, 2));
    // first segment's text rows attend only to image 1
    for (std::size_t t : {0u, 1u}) {
        CHECK(mask.at(t, 0));
        CHECK(!mask.at(t, 1));
        CHECK(!mask.at(t, 2));
    }
}

TEST_CASE("single segment yields an all-true mask") {
    auto mask = build_cross_mask(layout_of({{2, 3}}));
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t v = 0; v < 2; ++v)
            CHECK(mask.at(t, v));
}

TEST_CASE("exhaustive small layouts match the rule enumerator") {
    std::vector<SegmentTokens> options;
    for (std::size_t img = 0; img <= 2; ++img)
        for (std::size_t txt = 1; txt <= 2; ++txt)
            options.push_back({img, txt});

    std::size_t checked = 0;
    for (std::size_t nseg = 1; nseg <= 3; ++nseg) {
        std::vector<std::size_t> pick(nseg, 0);
        while (true) {
            InterleaveLayout layout;
            for (auto p : pick)
                layout.segments.push_back(options[p]);
            auto mask = build_cross_mask(layout);
            auto ref = enumerator_mask(layout);
            for (std::size_t t = 0; t < mask.n_text; ++t)
                for (std::size_t v = 0; v < mask.n_image; ++v)
                    CHECK(mask.at(t, v) == ref[t][v]);
            ++checked;

            std::size_t i = 0;
            while (i < nseg && ++pick[i] == options.size()) {
                pick[i] = 0;
                ++i;
            }
            if (i == nseg)
                break;
        }
    }
    CHECK(checked == 6 + 36 + 216);
}

TEST_CASE("mask rows partition by segment (locality invariant)") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        InterleaveLayout layout;
        std::size_t nseg = 1 + bounded(rng, 4);
        for (std::size_t s = 0; s < nseg; ++s)
            layout.segments.push_back({bounded(rng, 3), 1 + bounded(rng, 3)});
        auto mask = build_cross_mask(layout);
        auto text_seg = layout.text_segment_of();
        auto image_seg = layout.image_segment_of();
        for (std::size_t t = 0; t < mask.n_text; ++t)
            for (std::size_t v = 0; v < mask.n_image; ++v)
                CHECK(mask.at(t, v) == (text_seg[t] == image_seg[v]));
    }
}

TEST_CASE("forward matches the independent dense reference within 1e-6") {
    std::mt19937_64 rng(57);
    for (int trial = 0; trial < 25; ++trial) {
        InterleaveLayout layout;
        std::size_t nseg = 1 + bounded(rng, 3);
        for (std::size_t s = 0; s < nseg; ++s)
            layout.segments.push_back({bounded(rng, 3), 1 + bounded(rng, 3)});
        std::size_t d = 4 + bounded(rng, 12);
        auto weights = ProbeWeights::make(trial * 31 + 7, d);
        auto images = draw_embeddings(trial * 17 + 3, layout.total_image_tokens(), d);
        auto texts = draw_embeddings(trial * 13 + 1, layout.total_text_tokens(), d);

        for (auto mask_kind : {VisualMask::none, VisualMask::mask_demo_visual,
                               VisualMask::mask_query_visual}) {
            auto got = forward(layout, weights, images, texts, mask_kind);
            auto ref = reference_forward(layout, weights, images, texts, mask_kind);
            REQUIRE(got.hidden.v.size() == ref.hidden.v.size());
            for (std::size_t i = 0; i < got.hidden.v.size(); ++i)
                CHECK(got.hidden.v[i] == doctest::Approx(ref.hidden.v[i]).epsilon(1e-6));
            for (std::size_t i = 0; i < got.self_attn.v.size(); ++i)
                CHECK(got.self_attn.v[i] == doctest::Approx(ref.self_attn.v[i]).epsilon(1e-6));
            for (std::size_t i = 0; i < got.cross_out.v.size(); ++i)
                CHECK(got.cross_out.v[i] == doctest::Approx(ref.cross_out.v[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("mask_demo_visual leaves query-row cross-attention bit-identical") {
    std::mt19937_64 rng(71);
    for (int trial = 0; trial < 60; ++trial) {
        InterleaveLayout layout;
        std::size_t ndemo = 1 + bounded(rng, 3);
        for (std::size_t s = 0; s < ndemo; ++s)
            layout.segments.push_back({1 + bounded(rng, 2), 1 + bounded(rng, 2)});
        layout.segments.push_back({1 + bounded(rng, 2), 1 + bounded(rng, 2)}); // query
        std::size_t d = 4 + bounded(rng, 28);

        auto weights = ProbeWeights::make(trial * 101 + 13, d);
        auto images = draw_embeddings(trial * 103 + 5, layout.total_image_tokens(), d);
        auto texts = draw_embeddings(trial * 107 + 9, layout.total_text_tokens(), d);

        auto standard = forward(layout, weights, images, texts, VisualMask::none);
        auto masked = forward(layout, weights, images, texts, VisualMask::mask_demo_visual);

        std::size_t first_query_row = layout.total_text_tokens() -
                                      layout.segments.back().text_tokens;
        for (std::size_t t = first_query_row; t < layout.total_text_tokens(); ++t)
            for (std::size_t c = 0; c < d; ++c)
                CHECK(standard.cross_out.at(t, c) == masked.cross_out.at(t, c));
    }
}

TEST_CASE("zero image embeddings make cross-attention image-independent") {
    auto layout = layout_of({{1, 2}, {1, 2}, {1, 1}});
    std::size_t d = 8;
    auto weights = ProbeWeights::make(5, d);
    auto texts = draw_embeddings(6, layout.total_text_tokens(), d);
    auto images = zeros(layout.total_image_tokens(), d);

    auto a = forward(layout, weights, images, texts, VisualMask::none);
    auto b = forward(layout, weights, images, texts, VisualMask::mask_demo_visual);
    auto c = forward(layout, weights, images, texts, VisualMask::mask_query_visual);
    for (std::size_t i = 0; i < a.hidden.v.size(); ++i) {
        CHECK(a.hidden.v[i] == b.hidden.v[i]);
        CHECK(a.hidden.v[i] == c.hidden.v[i]);
    }

    auto cos = probe_cosines(layout, weights, images, texts);
    CHECK(cos.hidden_mask_demo == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cos.hidden_mask_query == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cos.attn_mask_demo == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cos.attn_mask_query == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one over allowed columns") {
    std::mt19937_64 rng(91);
    for (int trial = 0; trial < 20; ++trial) {
        InterleaveLayout layout;
        std::size_t nseg = 1 + bounded(rng, 3);
        for (std::size_t s = 0; s < nseg; ++s)
            layout.segments.push_back({bounded(rng, 3), 1 + bounded(rng, 2)});
        std::size_t d = 8;
        auto weights = ProbeWeights::make(trial, d);
        auto images = draw_embeddings(trial + 400, layout.total_image_tokens(), d);
        auto texts = draw_embeddings(trial + 800, layout.total_text_tokens(), d);
        auto res = forward(layout, weights, images, texts, VisualMask::none);

        auto mask = build_cross_mask(layout);
        for (std::size_t t = 0; t < mask.n_text; ++t) {
            double row_sum = 0;
            bool any = false;
            for (std::size_t v = 0; v < mask.n_image; ++v) {
                row_sum += res.cross_attn.at(t, v);
                any |= mask.at(t, v);
                if (!mask.at(t, v))
                    CHECK(res.cross_attn.at(t, v) == 0.0);
            }
            if (any)
                CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
            else
                CHECK(row_sum == 0.0);

            double self_sum = 0;
            for (std::size_t u = 0; u < mask.n_text; ++u) {
                self_sum += res.self_attn.at(t, u);
                if (u > t)
                    CHECK(res.self_attn.at(t, u) == 0.0); // causal
            }
            CHECK(self_sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("probe report cosines stay within [-1, 1] over 100 seeds") {
    auto layout = InterleaveLayout::parse("1x2,1x2,1x1");
    auto rep = run_probe(layout, 100, 16, 0);
    for (double v : {rep.cos_hidden_mask_demo, rep.cos_hidden_mask_query, rep.cos_attn_mask_demo,
                     rep.cos_attn_mask_query}) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(rep.seeds_used.size() == 100);
}

TEST_CASE("run_probe averaging equals the mean of single-seed runs") {
    auto layout = InterleaveLayout::parse("2x2,1x3,1x1");
    const std::size_t n = 7, d = 12;
    auto rep = run_probe(layout, n, d, 42);

    double hd = 0, hq = 0, ad = 0, aq = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto one = run_probe(layout, 1, d, 42 + i);
        hd += one.cos_hidden_mask_demo;
        hq += one.cos_hidden_mask_query;
        ad += one.cos_attn_mask_demo;
        aq += one.cos_attn_mask_query;
    }
    CHECK(rep.cos_hidden_mask_demo == doctest::Approx(hd / n).epsilon(1e-12));
    CHECK(rep.cos_hidden_mask_query == doctest::Approx(hq / n).epsilon(1e-12));
    CHECK(rep.cos_attn_mask_demo == doctest::Approx(ad / n).epsilon(1e-12));
    CHECK(rep.cos_attn_mask_query == doctest::Approx(aq / n).epsilon(1e-12));
}

TEST_CASE("layout parsing and validation") {
    auto layout = InterleaveLayout::parse("1x2,0x3,2x1");
    REQUIRE(layout.segments.size() == 3);
    CHECK(layout.segments[1].image_tokens == 0);
    CHECK(layout.segments[1].text_tokens == 3);
    CHECK(layout.total_image_tokens() == 3);
    CHECK(layout.total_text_tokens() == 6);

    CHECK_THROWS_AS(InterleaveLayout::parse("1x0"), Error);
    CHECK_THROWS_AS(InterleaveLayout::parse("nonsense"), Error);
    CHECK_THROWS_AS(InterleaveLayout::parse(""), Error);
}

TEST_CASE("forward validates embedding shapes") {
    auto layout = layout_of({{1, 1}});
    auto weights = ProbeWeights::make(1, 4);
    auto images = draw_embeddings(2, 1, 4);
    auto texts = draw_embeddings(3, 1, 4);
    CHECK_NOTHROW(forward(layout, weights, images, texts, VisualMask::none));
    auto bad_images = draw_embeddings(2, 2, 4);
    CHECK_THROWS_AS(forward(layout, weights, bad_images, texts, VisualMask::none), Error);
    auto bad_texts = draw_embeddings(3, 1, 5);
    CHECK_THROWS_AS(forward(layout, weights, images, bad_texts, VisualMask::none), Error);
}
