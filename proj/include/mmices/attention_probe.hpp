#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mmices::probe {

/// Tiny row-major double matrix; the probe math runs in double throughout.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {v.data() + r * cols, cols}; }
};

/// Token counts per interleaved segment, in order; the last segment is the
/// query. Token layout is images-then-text within each segment.
struct SegmentTokens {
    std::size_t image_tokens = 0;
    std::size_t text_tokens = 0;
};

struct InterleaveLayout {
    std::vector<SegmentTokens> segments;

    std::size_t total_image_tokens() const;
    std::size_t total_text_tokens() const;
    /// segment index of each text token / image token, in token order
    std::vector<std::size_t> text_segment_of() const;
    std::vector<std::size_t> image_segment_of() const;
    void validate() const; // >=1 segment, every segment >=1 text token

    /// Parses "1x2,1x2,1x1" (image_tokens x text_tokens per segment).
    static InterleaveLayout parse(const std::string& spec);
};

/// text_tokens x image_tokens boolean mask: text token t may attend to image
/// token v iff v belongs to t's own segment. Text in a segment without
/// images attends to nothing (all-false row).
struct CrossMask {
    std::size_t n_text = 0;
    std::size_t n_image = 0;
    std::vector<std::uint8_t> allow;

    bool at(std::size_t t, std::size_t v) const { return allow[t * n_image + v] != 0; }
};

CrossMask build_cross_mask(const InterleaveLayout& layout);

/// One block = masked cross-attention (text queries over image keys/values)
/// then causal self-attention over text, both with residual adds.
struct BlockWeights {
    Mat wq_cross, wk_cross, wv_cross;
    Mat wq_self, wk_self, wv_self;
};

struct ProbeWeights {
    std::size_t dim = 0;
    std::uint64_t seed = 0;
    std::vector<BlockWeights> blocks;

    /// Entries drawn N(0,1)/sqrt(dim) from the seed, deterministically.
    static ProbeWeights make(std::uint64_t seed, std::size_t dim, std::size_t n_blocks = 1);
};

enum class VisualMask {
    none,
    mask_demo_visual,  // zero every non-query image embedding before cross-attention
    mask_query_visual, // zero the query image embeddings
};

struct ForwardResult {
    Mat hidden;     // text_tokens x d after the final block
    Mat self_attn;  // text_tokens x text_tokens, final block's self-attention
    Mat cross_attn; // text_tokens x image_tokens weights, zero where masked
    Mat cross_out;  // text hidden states right after the final block's cross-attention stage
};

ForwardResult forward(const InterleaveLayout& layout, const ProbeWeights& weights,
                      const Mat& image_embs, const Mat& text_embs, VisualMask mask);

/// Cosine diagnostics between the standard setting and each masking setting,
/// measured on the last text row of the hidden states and of the
/// self-attention weights, averaged over seeds in fixed seed order.
struct ProbeReport {
    double cos_hidden_mask_demo = 0.0;
    double cos_hidden_mask_query = 0.0;
    double cos_attn_mask_demo = 0.0;
    double cos_attn_mask_query = 0.0;
    std::vector<std::uint64_t> seeds_used;

    std::string to_json() const;
    void write(const std::filesystem::path& path) const;
};

struct PerSeedCosines {
    double hidden_mask_demo = 0.0;
    double hidden_mask_query = 0.0;
    double attn_mask_demo = 0.0;
    double attn_mask_query = 0.0;
};

/// The per-seed measurement given explicit weights and embeddings.
PerSeedCosines probe_cosines(const InterleaveLayout& layout, const ProbeWeights& weights,
                             const Mat& image_embs, const Mat& text_embs);

/// Draws fresh weights and embeddings per seed (base_seed .. base_seed+n-1),
/// runs the three settings, and averages. Seeds run in parallel; the mean is
/// reduced in seed order, so the report is independent of thread count.
ProbeReport run_probe(const InterleaveLayout& layout, std::size_t n_seeds, std::size_t dim,
                      std::uint64_t base_seed = 0, std::size_t n_blocks = 1);

/// Deterministic embedding draw used by run_probe, exposed for tests.
Mat draw_embeddings(std::uint64_t seed, std::size_t rows, std::size_t dim);

} // namespace mmices::probe
