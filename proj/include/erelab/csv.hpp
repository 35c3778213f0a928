#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix_path.hpp"

namespace erelab {
namespace csv {

/// %.17g: round-trip exact for doubles, so regression tests can diff files.
inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Write a matrix path as one row per node: t plus row-major entries.
inline void write_matrix_path(const std::string& path, const MatrixPath& mp,
                              const std::string& prefix) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << "t";
    for (int r = 0; r < mp.rows(); ++r)
        for (int c = 0; c < mp.cols(); ++c) out << "," << prefix << "_" << r << "_" << c;
    out << "\n";
    for (int i = mp.first_node; i <= mp.last_node(); ++i) {
        out << num(mp.grid.node(i));
        const Mat& v = mp.at(i);
        for (int r = 0; r < mp.rows(); ++r)
            for (int c = 0; c < mp.cols(); ++c) out << "," << num(v(r, c));
        out << "\n";
    }
}

/// Read back a matrix path written by write_matrix_path.
inline MatrixPath read_matrix_path(const std::string& path, const TimeGrid& grid, int rows,
                                   int cols) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty file");
    std::vector<Mat> vals;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ',')) throw ParseError(path + ": bad row");
        Mat m(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                if (!std::getline(ss, cell, ','))
                    throw ParseError(path + ": row too short");
                m(r, c) = std::stod(cell);
            }
        vals.push_back(std::move(m));
    }
    const int first = grid.steps + 1 - static_cast<int>(vals.size());
    if (first < 0) throw ParseError(path + ": more rows than grid nodes");
    return MatrixPath(grid, first, std::move(vals));
}

} // namespace csv
} // namespace erelab
