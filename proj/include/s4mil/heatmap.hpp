#pragma once

// Patch-probability grid. Text format:
//   line 1: "heatmap <rows> <cols> <row_origin> <col_origin>"
//   then <rows> lines of <cols> space-separated values; -1 marks an empty cell.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"

namespace s4mil {

inline constexpr double heatmap_empty = -1.0;

struct Heatmap {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int row_origin = 0;
    int col_origin = 0;
    std::vector<double> values;  // row-major

    double at(std::size_t r, std::size_t c) const { return values.at(r * cols + c); }

    bool operator==(const Heatmap&) const = default;
};

/// Places each patch probability at its (row, col) inside the bounding box of the coordinates.
inline Heatmap build_heatmap(std::span<const Coord> coords, std::span<const double> probabilities) {
    if (coords.empty()) throw ContractViolation("heatmap needs at least one coordinate");
    if (coords.size() != probabilities.size())
        throw ContractViolation("heatmap has " + std::to_string(coords.size()) + " coordinates for " +
                                std::to_string(probabilities.size()) + " probabilities");
    int r0 = coords[0][0], r1 = coords[0][0], c0 = coords[0][1], c1 = coords[0][1];
    for (const auto& c : coords) {
        r0 = std::min(r0, c[0]);
        r1 = std::max(r1, c[0]);
        c0 = std::min(c0, c[1]);
        c1 = std::max(c1, c[1]);
    }
    Heatmap h;
    h.rows = static_cast<std::size_t>(r1 - r0) + 1;
    h.cols = static_cast<std::size_t>(c1 - c0) + 1;
    h.row_origin = r0;
    h.col_origin = c0;
    h.values.assign(h.rows * h.cols, heatmap_empty);
    std::vector<bool> filled(h.values.size(), false);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto idx = static_cast<std::size_t>(coords[i][0] - r0) * h.cols + static_cast<std::size_t>(coords[i][1] - c0);
        if (filled[idx])
            throw ContractViolation("duplicate patch coordinate (" + std::to_string(coords[i][0]) + ", " +
                                    std::to_string(coords[i][1]) + ")");
        filled[idx] = true;
        h.values[idx] = probabilities[i];
    }
    return h;
}

inline void write_heatmap(std::ostream& out, const Heatmap& h) {
    out << "heatmap " << h.rows << ' ' << h.cols << ' ' << h.row_origin << ' ' << h.col_origin << '\n';
    out << std::setprecision(17);
    for (std::size_t r = 0; r < h.rows; ++r) {
        for (std::size_t c = 0; c < h.cols; ++c) {
            if (c) out << ' ';
            out << h.at(r, c);
        }
        out << '\n';
    }
}

inline Heatmap parse_heatmap(std::istream& in) {
    std::string tag;
    Heatmap h;
    if (!(in >> tag >> h.rows >> h.cols >> h.row_origin >> h.col_origin) || tag != "heatmap")
        throw ParseError("heatmap must start with 'heatmap <rows> <cols> <row_origin> <col_origin>'", 0);
    h.values.resize(h.rows * h.cols);
    for (auto& v : h.values)
        if (!(in >> v)) throw ParseError("heatmap grid is truncated", 0);
    std::string extra;
    if (in >> extra) throw ParseError("unexpected trailing heatmap content '" + extra + "'", 0);
    return h;
}

}  // namespace s4mil
