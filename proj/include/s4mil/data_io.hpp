#pragma once

// Bags of precomputed patch features and their on-disk formats.
//
// Sequence file ("SEQF"), all integers little-endian:
//   offset 0   magic "SEQF"
//   offset 4   u32 version (= 1)
//   offset 8   u32 L (tokens)
//   offset 12  u32 D (values per token)
//   offset 16  L*D IEEE-754 binary32 values, token-major
// Nothing may follow the payload. Patch labels and coordinates reuse the
// container with D = 1 and D = 2 and integral values.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "s4mil/error.hpp"
#include "s4mil/tensor.hpp"

namespace s4mil {

using Coord = std::array<int, 2>;  // (row, col) on the patch grid

struct Bag {
    std::string id;
    Tensor<float> features;  // L x D
    int slide_label = 0;
    std::optional<std::vector<int>> patch_labels;
    std::optional<std::vector<Coord>> coords;

    std::size_t length() const noexcept { return static_cast<std::size_t>(features.rows()); }

    void validate() const {
        if (features.rows() == 0) throw ContractViolation("bag '" + id + "' is empty");
        if (patch_labels && patch_labels->size() != length())
            throw ContractViolation("bag '" + id + "' has " + std::to_string(patch_labels->size()) +
                                    " patch labels for " + std::to_string(length()) + " tokens");
        if (coords && coords->size() != length())
            throw ContractViolation("bag '" + id + "' has " + std::to_string(coords->size()) + " coordinates for " +
                                    std::to_string(length()) + " tokens");
    }
};

inline constexpr std::array<char, 4> sequence_magic{'S', 'E', 'Q', 'F'};
inline constexpr std::uint32_t sequence_version = 1;
inline constexpr std::size_t sequence_header_bytes = 16;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const unsigned char> in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

inline void put_f32(std::vector<unsigned char>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline float get_f32(std::span<const unsigned char> in, std::size_t offset) {
    return std::bit_cast<float>(get_u32(in, offset));
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<unsigned char> encode_sequence(const Tensor<float>& values) {
    if (values.rows() > std::numeric_limits<std::uint32_t>::max() ||
        values.cols() > std::numeric_limits<std::uint32_t>::max())
        throw ContractViolation("sequence too large for the SEQF header: " + shape_string(values));
    std::vector<unsigned char> out;
    out.reserve(sequence_header_bytes + 4 * static_cast<std::size_t>(values.size()));
    out.insert(out.end(), sequence_magic.begin(), sequence_magic.end());
    detail::put_u32(out, sequence_version);
    detail::put_u32(out, static_cast<std::uint32_t>(values.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(values.cols()));
    for (Eigen::Index r = 0; r < values.rows(); ++r)
        for (Eigen::Index c = 0; c < values.cols(); ++c) detail::put_f32(out, values(r, c));
    return out;
}

inline Tensor<float> parse_sequence(std::span<const unsigned char> bytes) {
    if (bytes.size() < sequence_header_bytes)
        throw ParseError("truncated SEQF header: " + std::to_string(bytes.size()) + " bytes", bytes.size());
    if (!std::equal(sequence_magic.begin(), sequence_magic.end(), bytes.begin()))
        throw ParseError("bad magic, expected \"SEQF\"", 0);
    const std::uint32_t version = detail::get_u32(bytes, 4);
    if (version != sequence_version) throw ParseError("unsupported SEQF version " + std::to_string(version), 4);
    const std::uint64_t L = detail::get_u32(bytes, 8);
    const std::uint64_t D = detail::get_u32(bytes, 12);
    if (L == 0 || D == 0) throw ParseError("SEQF sequence must have L >= 1 and D >= 1", L == 0 ? 8 : 12);
    const std::uint64_t count = L * D;  // cannot overflow: both < 2^32
    if (count > (std::numeric_limits<std::uint64_t>::max() - sequence_header_bytes) / 4 ||
        count > static_cast<std::uint64_t>(std::numeric_limits<Eigen::Index>::max()))
        throw ParseError("SEQF payload size L*D overflows", 8);
    const std::uint64_t expected = sequence_header_bytes + 4 * count;
    if (bytes.size() < expected)
        throw ParseError("truncated SEQF payload: expected " + std::to_string(expected) + " bytes, found " +
                             std::to_string(bytes.size()),
                         bytes.size());
    if (bytes.size() > expected)
        throw ParseError("trailing bytes after SEQF payload (" + std::to_string(bytes.size() - expected) + ")",
                         static_cast<std::size_t>(expected));
    Tensor<float> out(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(D));
    std::size_t offset = sequence_header_bytes;
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        for (Eigen::Index c = 0; c < out.cols(); ++c, offset += 4) out(r, c) = detail::get_f32(bytes, offset);
    return out;
}

inline Tensor<float> read_sequence_file(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return parse_sequence(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

inline void write_sequence_file(const std::filesystem::path& path, const Tensor<float>& values) {
    detail::write_file(path, encode_sequence(values));
}

namespace detail {

inline int integral_value(float v, std::size_t index, const std::string& what) {
    if (!std::isfinite(v) || v != std::floor(v) || std::fabs(v) > 1e9f)
        throw ParseError(what + " value " + std::to_string(v) + " is not integral",
                         sequence_header_bytes + 4 * index);
    return static_cast<int>(v);
}

}  // namespace detail

/// Patch labels: SEQF with D = 1, non-negative integral values.
inline std::vector<int> read_label_file(const std::filesystem::path& path) {
    const auto m = read_sequence_file(path);
    if (m.cols() != 1) throw ParseError(path.string() + ": patch-label file must have D = 1", 12);
    std::vector<int> out(static_cast<std::size_t>(m.rows()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = detail::integral_value(m(static_cast<Eigen::Index>(i), 0), i, "patch label");
        if (out[i] < 0) throw ParseError("negative patch label", sequence_header_bytes + 4 * i);
    }
    return out;
}

inline void write_label_file(const std::filesystem::path& path, std::span<const int> labels) {
    Tensor<float> m(static_cast<Eigen::Index>(labels.size()), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = static_cast<float>(labels[i]);
    write_sequence_file(path, m);
}

/// Grid coordinates: SEQF with D = 2, integral (row, col) pairs.
inline std::vector<Coord> read_coords_file(const std::filesystem::path& path) {
    const auto m = read_sequence_file(path);
    if (m.cols() != 2) throw ParseError(path.string() + ": coordinate file must have D = 2", 12);
    std::vector<Coord> out(static_cast<std::size_t>(m.rows()));
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < 2; ++j)
            out[i][j] = detail::integral_value(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                                               2 * i + j, "coordinate");
    return out;
}

inline void write_coords_file(const std::filesystem::path& path, std::span<const Coord> coords) {
    Tensor<float> m(static_cast<Eigen::Index>(coords.size()), 2);
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (std::size_t j = 0; j < 2; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<float>(coords[i][j]);
    write_sequence_file(path, m);
}

// ---------------------------------------------------------------------------
// Manifest: comma-separated, header `id,label,features,patch_labels,coords`.
// Relative paths resolve against the manifest's directory.

struct ManifestRow {
    std::string id;
    int label = 0;
    std::string features;
    std::string patch_labels;
    std::string coords;
};

inline constexpr const char* manifest_header = "id,label,features,patch_labels,coords";

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && s[i] == ' ') ++i;
    return s.substr(i);
}

}  // namespace detail

inline std::vector<ManifestRow> parse_manifest(std::istream& in, const std::string& source = "manifest") {
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != manifest_header)
        throw ParseError(source + ": first line must be '" + std::string(manifest_header) + "'", 0);
    std::vector<ManifestRow> rows;
    std::set<std::string> seen;
    std::size_t offset = line.size() + 1;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t here = offset;
        offset += line.size() + 1;
        line = detail::trim(line);
        if (line.empty()) continue;
        auto cells = detail::split_csv(line);
        cells.resize(std::max<std::size_t>(cells.size(), 5));
        if (cells.size() > 5)
            throw ParseError(source + ": line " + std::to_string(lineno) + " has more than 5 cells", here);
        ManifestRow row;
        row.id = detail::trim(cells[0]);
        if (row.id.empty()) throw ParseError(source + ": line " + std::to_string(lineno) + " has an empty id", here);
        try {
            std::size_t used = 0;
            row.label = std::stoi(cells[1], &used);
            if (used != detail::trim(cells[1]).size() || row.label < 0) throw std::invalid_argument("label");
        } catch (const std::exception&) {
            throw ParseError(source + ": line " + std::to_string(lineno) + " has an invalid label '" + cells[1] + "'",
                             here);
        }
        row.features = detail::trim(cells[2]);
        if (row.features.empty())
            throw ParseError(source + ": line " + std::to_string(lineno) + " has no features path", here);
        row.patch_labels = detail::trim(cells[3]);
        row.coords = detail::trim(cells[4]);
        if (!seen.insert(row.id).second)
            throw ParseError(source + ": duplicate bag id '" + row.id + "'", here);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << manifest_header << '\n';
    for (const auto& r : rows)
        f << r.id << ',' << r.label << ',' << r.features << ',' << r.patch_labels << ',' << r.coords << '\n';
}

/// Loads every bag in manifest row order.
inline std::vector<Bag> load_manifest(const std::filesystem::path& manifest) {
    std::ifstream f(manifest);
    if (!f) throw IoError("cannot open manifest '" + manifest.string() + "'");
    const auto rows = parse_manifest(f, manifest.string());
    const auto base = manifest.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        if (path.is_relative()) path = base / path;
        if (!std::filesystem::exists(path)) throw IoError("referenced file does not exist: '" + path.string() + "'");
        return path;
    };
    std::vector<Bag> bags;
    bags.reserve(rows.size());
    for (const auto& r : rows) {
        Bag b;
        b.id = r.id;
        b.slide_label = r.label;
        b.features = read_sequence_file(resolve(r.features));
        if (!r.patch_labels.empty()) b.patch_labels = read_label_file(resolve(r.patch_labels));
        if (!r.coords.empty()) b.coords = read_coords_file(resolve(r.coords));
        b.validate();
        bags.push_back(std::move(b));
    }
    return bags;
}

/// Writes `<dir>/<id>.seqf` (+ .labels.seqf, .coords.seqf) and `<dir>/manifest.csv`.
inline std::filesystem::path save_dataset(const std::filesystem::path& dir, std::span<const Bag> bags) {
    std::filesystem::create_directories(dir);
    std::vector<ManifestRow> rows;
    for (const auto& b : bags) {
        b.validate();
        ManifestRow r{b.id, b.slide_label, b.id + ".seqf", "", ""};
        write_sequence_file(dir / r.features, b.features);
        if (b.patch_labels) {
            r.patch_labels = b.id + ".labels.seqf";
            write_label_file(dir / r.patch_labels, *b.patch_labels);
        }
        if (b.coords) {
            r.coords = b.id + ".coords.seqf";
            write_coords_file(dir / r.coords, *b.coords);
        }
        rows.push_back(std::move(r));
    }
    const auto path = dir / "manifest.csv";
    write_manifest(path, rows);
    return path;
}

// ---------------------------------------------------------------------------
// Corpus statistics.

/// Nearest-rank percentile of the lengths: the smallest length such that at
/// least p% of the corpus is <= it. p = 0 gives the minimum.
inline std::size_t nearest_rank_threshold(std::vector<std::size_t> lengths, double percentile) {
    if (lengths.empty()) throw ContractViolation("percentile of an empty corpus");
    if (!(percentile >= 0.0 && percentile <= 100.0))
        throw ContractViolation("percentile must lie in [0, 100], got " + std::to_string(percentile));
    std::sort(lengths.begin(), lengths.end());
    const auto n = static_cast<double>(lengths.size());
    auto rank = static_cast<std::size_t>(std::ceil(percentile * n / 100.0));
    rank = std::clamp<std::size_t>(rank, 1, lengths.size());
    return lengths[rank - 1];
}

/// Indices of bags whose length is at or above the nearest-rank percentile.
inline std::vector<std::size_t> long_sequence_split(std::span<const std::size_t> lengths, double percentile = 85.0) {
    const std::size_t threshold = nearest_rank_threshold({lengths.begin(), lengths.end()}, percentile);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < lengths.size(); ++i)
        if (lengths[i] >= threshold) out.push_back(i);
    return out;
}

inline std::vector<std::size_t> bag_lengths(std::span<const Bag> bags) {
    std::vector<std::size_t> lengths;
    lengths.reserve(bags.size());
    for (const auto& b : bags) lengths.push_back(b.length());
    return lengths;
}

inline std::vector<std::size_t> long_sequence_split(std::span<const Bag> bags, double percentile = 85.0) {
    const auto lengths = bag_lengths(bags);
    return long_sequence_split(std::span<const std::size_t>(lengths), percentile);
}

struct CorpusStats {
    std::size_t count = 0;
    double mean_length = 0.0;
    std::size_t min_length = 0;
    std::size_t max_length = 0;
};

inline CorpusStats corpus_stats(std::span<const std::size_t> lengths) {
    if (lengths.empty()) throw ContractViolation("statistics of an empty corpus");
    CorpusStats s;
    s.count = lengths.size();
    s.min_length = *std::min_element(lengths.begin(), lengths.end());
    s.max_length = *std::max_element(lengths.begin(), lengths.end());
    std::uint64_t total = 0;
    for (auto l : lengths) total += l;
    s.mean_length = static_cast<double>(total) / static_cast<double>(lengths.size());
    return s;
}

inline CorpusStats corpus_stats(std::span<const Bag> bags) {
    const auto lengths = bag_lengths(bags);
    return corpus_stats(std::span<const std::size_t>(lengths));
}

}  // namespace s4mil
