#include "mmices/embedding_store.hpp"
#include "mmices/error.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace mmices {

namespace {

constexpr char kMagic[6] = {'M', 'M', 'E', 'B', '1', '\0'};
constexpr double kNormTolerance = 1e-4;

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            std::ostringstream os;
            os << path << ": truncated " << what << " at byte offset " << pos
               << " (need " << n << " bytes, " << (buf.size() - pos) << " left)";
            throw Error(os.str());
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = std::uint32_t(buf[pos]) | std::uint32_t(buf[pos + 1]) << 8 |
                          std::uint32_t(buf[pos + 2]) << 16 | std::uint32_t(buf[pos + 3]) << 24;
        pos += 4;
        return v;
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = std::uint16_t(buf[pos]) | std::uint16_t(std::uint16_t(buf[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf[pos++];
    }
};

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
}

double row_norm(std::span<const float> row) {
    double acc = 0.0;
    for (float x : row)
        acc += double(x) * double(x);
    return std::sqrt(acc);
}

} // namespace

EmbeddingMatrix EmbeddingMatrix::create(std::vector<std::string> ids, std::size_t dim,
                                        std::vector<float> data, bool normalized) {
    EmbeddingMatrix m;
    m.n_rows = ids.size();
    m.dim = dim;
    m.normalized = normalized;
    m.ids = std::move(ids);
    m.data = std::move(data);

    if (m.n_rows == 0)
        throw Error("embedding matrix must have at least one row");
    if (m.dim == 0)
        throw Error("embedding matrix dim must be > 0");
    if (m.data.size() != m.n_rows * m.dim) {
        std::ostringstream os;
        os << "embedding payload size " << m.data.size() << " != n_rows*dim = "
           << m.n_rows * m.dim;
        throw Error(os.str());
    }

    m.id_to_row_.reserve(m.n_rows);
    for (std::size_t r = 0; r < m.n_rows; ++r) {
        auto [it, inserted] = m.id_to_row_.emplace(m.ids[r], r);
        if (!inserted)
            throw Error("duplicate record ID in embedding matrix: \"" + m.ids[r] + "\"");
    }

    for (std::size_t r = 0; r < m.n_rows; ++r) {
        for (std::size_t c = 0; c < m.dim; ++c) {
            if (!std::isfinite(m.data[r * m.dim + c]))
                throw Error("non-finite value in embedding row for ID \"" + m.ids[r] + "\"");
        }
        if (normalized) {
            double nrm = row_norm(m.row(r));
            if (std::abs(nrm - 1.0) > kNormTolerance) {
                std::ostringstream os;
                os << "matrix flagged normalized but row for ID \"" << m.ids[r]
                   << "\" has L2 norm " << nrm;
                throw Error(os.str());
            }
        }
    }
    return m;
}

EmbeddingMatrix load_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open embedding file: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    const std::string pstr = path.string();
    Reader rd{buf, 0, pstr};

    rd.need(6, "magic");
    if (std::memcmp(buf.data(), kMagic, 6) != 0)
        throw Error(pstr + ": bad magic at byte offset 0 (expected \"MMEB1\\0\")");
    rd.pos = 6;

    std::uint32_t n_rows = rd.u32("row count");
    std::uint32_t dim = rd.u32("dim");
    std::uint8_t flag = rd.u8("normalized flag");
    std::uint32_t id_table_len = rd.u32("id table length");

    std::size_t id_table_end = rd.pos + id_table_len;
    if (id_table_end > buf.size()) {
        std::ostringstream os;
        os << pstr << ": id table length " << id_table_len << " overruns file at byte offset "
           << rd.pos;
        throw Error(os.str());
    }

    std::vector<std::string> ids;
    ids.reserve(n_rows);
    for (std::uint32_t i = 0; i < n_rows; ++i) {
        std::uint16_t len = rd.u16("id length");
        rd.need(len, "id bytes");
        ids.emplace_back(reinterpret_cast<const char*>(buf.data() + rd.pos), len);
        rd.pos += len;
    }
    if (rd.pos != id_table_end) {
        std::ostringstream os;
        os << pstr << ": id table length mismatch (declared " << id_table_len << ", parsed "
           << (rd.pos - 19) << ")";
        throw Error(os.str());
    }

    std::size_t n_floats = std::size_t(n_rows) * dim;
    rd.need(n_floats * 4, "float payload");
    std::vector<float> data(n_floats);
    for (std::size_t i = 0; i < n_floats; ++i) {
        std::uint32_t bits = std::uint32_t(buf[rd.pos]) | std::uint32_t(buf[rd.pos + 1]) << 8 |
                             std::uint32_t(buf[rd.pos + 2]) << 16 |
                             std::uint32_t(buf[rd.pos + 3]) << 24;
        rd.pos += 4;
        std::memcpy(&data[i], &bits, 4);
    }
    if (rd.pos != buf.size()) {
        std::ostringstream os;
        os << pstr << ": " << (buf.size() - rd.pos) << " trailing bytes at offset " << rd.pos;
        throw Error(os.str());
    }

    try {
        return EmbeddingMatrix::create(std::move(ids), dim, std::move(data), flag != 0);
    } catch (const Error& e) {
        throw Error(pstr + ": " + e.what());
    }
}

void write_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path) {
    std::string out;
    out.append(kMagic, 6);
    put_u32(out, std::uint32_t(m.n_rows));
    put_u32(out, std::uint32_t(m.dim));
    out.push_back(m.normalized ? char(1) : char(0));

    std::string id_table;
    for (const auto& id : m.ids) {
        if (id.size() > std::numeric_limits<std::uint16_t>::max())
            throw Error("record ID too long for MMEB1 id table: \"" + id.substr(0, 32) + "...\"");
        put_u16(id_table, std::uint16_t(id.size()));
        id_table.append(id);
    }
    put_u32(out, std::uint32_t(id_table.size()));
    out.append(id_table);

    for (float f : m.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }

    std::ofstream of(path, std::ios::binary | std::ios::trunc);
    if (!of)
        throw Error("cannot open for writing: " + path.string());
    of.write(out.data(), std::streamsize(out.size()));
    if (!of)
        throw Error("write failed: " + path.string());
}

EmbeddingMatrix normalize(const EmbeddingMatrix& m) {
    std::vector<float> data(m.data.size());
    for (std::size_t r = 0; r < m.n_rows; ++r) {
        double nrm = row_norm(m.row(r));
        if (nrm == 0.0)
            throw Error("cannot normalize all-zero embedding row for ID \"" + m.ids[r] + "\"");
        for (std::size_t c = 0; c < m.dim; ++c)
            data[r * m.dim + c] = float(double(m.data[r * m.dim + c]) / nrm);
    }
    return EmbeddingMatrix::create(m.ids, m.dim, std::move(data), true);
}

std::span<const float> lookup(const EmbeddingMatrix& m, const std::string& id) {
    auto r = m.find(id);
    if (!r)
        throw Error("unknown record ID in embedding matrix: \"" + id + "\"");
    return m.row(*r);
}

StoreManifest StoreManifest::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("manifest " + path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("visual_path") || !j.contains("textual_path"))
        throw Error("manifest " + path.string() +
                    ": required keys visual_path and textual_path");

    StoreManifest man;
    auto base = path.parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    man.visual_path = resolve(j.at("visual_path").get<std::string>());
    man.textual_path = resolve(j.at("textual_path").get<std::string>());
    if (j.contains("query_visual_path"))
        man.query_visual_path = resolve(j.at("query_visual_path").get<std::string>());
    if (j.contains("query_textual_path"))
        man.query_textual_path = resolve(j.at("query_textual_path").get<std::string>());
    if (j.contains("blank_image_id"))
        man.blank_image_id = j.at("blank_image_id").get<std::string>();
    return man;
}

} // namespace mmices
