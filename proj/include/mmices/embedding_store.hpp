#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmices {

/// Dense row-major float32 matrix binding record IDs to embedding vectors.
/// Immutable after construction; safe for concurrent reads.
struct EmbeddingMatrix {
    std::size_t n_rows = 0;
    std::size_t dim = 0;
    bool normalized = false;
    std::vector<float> data;        // n_rows * dim, row-major
    std::vector<std::string> ids;   // row index -> record ID, file order authoritative

    /// Validates all invariants: n_rows >= 1, dim > 0, sizes consistent,
    /// unique ids, finite values, and unit norms (1e-4) when `normalized`.
    static EmbeddingMatrix create(std::vector<std::string> ids, std::size_t dim,
                                  std::vector<float> data, bool normalized);

    std::span<const float> row(std::size_t r) const {
        return {data.data() + r * dim, dim};
    }

    std::optional<std::size_t> find(const std::string& id) const {
        auto it = id_to_row_.find(id);
        if (it == id_to_row_.end())
            return std::nullopt;
        return it->second;
    }

  private:
    std::unordered_map<std::string, std::size_t> id_to_row_;
};

/// Optional query-side paths cover setups where query embeddings live in
/// separate files; when absent the support matrices serve both roles.
struct StoreManifest {
    std::filesystem::path visual_path;
    std::filesystem::path textual_path;
    std::optional<std::filesystem::path> query_visual_path;
    std::optional<std::filesystem::path> query_textual_path;
    std::optional<std::string> blank_image_id;

    static StoreManifest load(const std::filesystem::path& path);
};

/// Reads an MMEB1 file. Errors carry the byte offset or offending ID.
EmbeddingMatrix load_matrix(const std::filesystem::path& path);

/// Writes bit-exact MMEB1; load_matrix inverts it.
void write_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path);

/// Returns a copy with every row scaled to unit L2 norm (float64 accumulation).
/// Fails on all-zero rows, naming the offending ID.
EmbeddingMatrix normalize(const EmbeddingMatrix& m);

/// Row for `id`; throws on unknown IDs.
std::span<const float> lookup(const EmbeddingMatrix& m, const std::string& id);

} // namespace mmices
