#pragma once

#include "mmices/embedding_store.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmices {

enum class TaskKind { vqa, captioning };

const char* to_string(TaskKind t);
TaskKind task_kind_from_string(const std::string& s);

/// One dataset item. image_ref is opaque and never dereferenced; pixels live
/// upstream of the embedding producers. proxy_text carries an externally
/// generated caption used as the textual side of captioning queries.
struct Record {
    std::string id;
    std::string image_ref;
    std::optional<std::string> question;
    std::vector<std::string> answers;
    std::vector<std::string> captions;
    std::optional<std::string> proxy_text;
};

/// Records bound to their embedding rows. Immutable after bind; concurrent
/// reads are safe.
struct BoundSet {
    std::vector<Record> records;
    EmbeddingMatrix visual;
    EmbeddingMatrix textual;
    TaskKind task_kind = TaskKind::vqa;
    std::vector<std::size_t> visual_rows;  // record index -> matrix row
    std::vector<std::size_t> textual_rows;

    std::size_t size() const { return records.size(); }
    std::span<const float> visual_vec(std::size_t i) const { return visual.row(visual_rows[i]); }
    std::span<const float> textual_vec(std::size_t i) const { return textual.row(textual_rows[i]); }
    std::optional<std::size_t> index_of(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end())
            return std::nullopt;
        return it->second;
    }

    friend BoundSet bind(std::vector<Record> records, EmbeddingMatrix visual,
                         EmbeddingMatrix textual, TaskKind task_kind);

  private:
    std::unordered_map<std::string, std::size_t> index_;
};

/// Parses one Record per JSONL line, validating the schema for `task_kind`
/// (vqa requires a question; captioning requires at least one caption).
/// Errors carry the 1-based line number.
std::vector<Record> load_records(const std::filesystem::path& path, TaskKind task_kind);

/// Resolves every record ID in both matrices or fails listing all missing
/// IDs. Never drops records.
BoundSet bind(std::vector<Record> records, EmbeddingMatrix visual, EmbeddingMatrix textual,
              TaskKind task_kind);

} // namespace mmices
