#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/problem.hpp"

namespace erelab {

/// Serializable description of a time-dependent matrix entry:
///   {"const": M} | {"table": {"nodes": [...], "values": [M...]}} |
///   {"poly": [M0, M1, ...]}  (M0 + t M1 + ...)
struct EntrySpec {
    enum class Kind { Const, Table, Poly } kind = Kind::Const;
    Mat constant;
    std::vector<double> nodes;
    std::vector<Mat> values; // table values or poly coefficients

    static EntrySpec of(const Mat& m) {
        EntrySpec e;
        e.kind = Kind::Const;
        e.constant = m;
        return e;
    }

    TimeEntry build() const {
        switch (kind) {
        case Kind::Const: return TimeEntry::constant(constant);
        case Kind::Table: return TimeEntry::table(nodes, values);
        case Kind::Poly: return TimeEntry::poly(values);
        }
        throw DomainError("EntrySpec: bad kind");
    }

    int rows() const {
        return kind == Kind::Const ? static_cast<int>(constant.rows())
                                   : static_cast<int>(values.front().rows());
    }
    int cols() const {
        return kind == Kind::Const ? static_cast<int>(constant.cols())
                                   : static_cast<int>(values.front().cols());
    }
};

/// Serializable description of a two-time kernel:
///   {"const": M} | {"exp_discount": {"rate": r, "base": <entry>}} |
///   {"of_s": <entry>}
/// exp_discount builds K(t,s) = exp(-r (s-t)) * base(s).
struct KernelSpec {
    enum class Kind { Const, ExpDiscount, OfS } kind = Kind::Const;
    Mat constant;
    double rate = 0.0;
    EntrySpec base;

    static KernelSpec of(const Mat& m) {
        KernelSpec k;
        k.kind = Kind::Const;
        k.constant = m;
        return k;
    }

    static KernelSpec exp_discount(double r, EntrySpec b) {
        KernelSpec k;
        k.kind = Kind::ExpDiscount;
        k.rate = r;
        k.base = std::move(b);
        return k;
    }

    KernelEntry build(double horizon) const {
        switch (kind) {
        case Kind::Const: return KernelEntry::constant(constant);
        case Kind::ExpDiscount: {
            const double r = rate;
            return discounted_kernel([r](double u) { return std::exp(-r * u); },
                                     base.build(), horizon);
        }
        case Kind::OfS: return KernelEntry::of_s(base.build());
        }
        throw DomainError("KernelSpec: bad kind");
    }
};

/// The on-disk problem description; builds a ProblemInstance.
struct ProblemConfig {
    std::string name;
    Dims dims;
    double T = 1.0;
    int steps = 100;
    EntrySpec A, B, C, D, Ahat, Bhat, Chat, Dhat;
    Mat H;
    KernelSpec Q, R, M, N;
    EntrySpec G1, G2;
    double delta = 0.0;
    WeightCaps caps;
    SmoothnessFlags smoothness;

    ProblemInstance build(int grid_override = 0) const {
        ProblemInstance p;
        p.name = name;
        p.dims = dims;
        p.grid = TimeGrid(T, grid_override > 0 ? grid_override : steps);
        p.coeffs.A = A.build();
        p.coeffs.B = B.build();
        p.coeffs.C = C.build();
        p.coeffs.D = D.build();
        p.coeffs.Ahat = Ahat.build();
        p.coeffs.Bhat = Bhat.build();
        p.coeffs.Chat = Chat.build();
        p.coeffs.Dhat = Dhat.build();
        p.coeffs.H = H;
        p.weights.Q = Q.build(T);
        p.weights.R = R.build(T);
        p.weights.M = M.build(T);
        p.weights.N = N.build(T);
        p.weights.G1 = G1.build();
        p.weights.G2 = G2.build();
        p.weights.delta = delta;
        p.weights.caps = caps;
        p.smoothness = smoothness;
        p.check_shapes();
        return p;
    }
};

namespace io_detail {

using nlohmann::json;

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
    throw ParseError(where + ": " + what);
}

inline Mat parse_matrix(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty()) fail(where, "expected a non-empty nested array");
    const size_t rows = j.size();
    if (!j[0].is_array() || j[0].empty()) fail(where, "expected rows as arrays");
    const size_t cols = j[0].size();
    Mat m(rows, cols);
    for (size_t i = 0; i < rows; ++i) {
        if (!j[i].is_array() || j[i].size() != cols)
            fail(where, "ragged matrix literal (row " + std::to_string(i) + ")");
        for (size_t c = 0; c < cols; ++c) {
            if (!j[i][c].is_number())
                fail(where, "non-numeric entry at (" + std::to_string(i) + "," +
                                std::to_string(c) + ")");
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                j[i][c].get<double>();
        }
    }
    if (!mat::is_finite(m)) fail(where, "non-finite matrix entry");
    return m;
}

inline json dump_matrix(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline EntrySpec parse_entry(const json& j, const std::string& where) {
    EntrySpec e;
    if (j.is_array()) { // bare matrix literal means constant
        e.kind = EntrySpec::Kind::Const;
        e.constant = parse_matrix(j, where);
        return e;
    }
    if (!j.is_object()) fail(where, "expected an object or matrix literal");
    if (j.contains("const")) {
        e.kind = EntrySpec::Kind::Const;
        e.constant = parse_matrix(j.at("const"), where + ".const");
        return e;
    }
    if (j.contains("table")) {
        const json& t = j.at("table");
        if (!t.is_object() || !t.contains("nodes") || !t.contains("values"))
            fail(where + ".table", "expected {nodes, values}");
        e.kind = EntrySpec::Kind::Table;
        for (const auto& x : t.at("nodes")) {
            if (!x.is_number()) fail(where + ".table.nodes", "non-numeric node");
            e.nodes.push_back(x.get<double>());
        }
        size_t idx = 0;
        for (const auto& v : t.at("values"))
            e.values.push_back(
                parse_matrix(v, where + ".table.values[" + std::to_string(idx++) + "]"));
        if (e.nodes.size() != e.values.size() || e.nodes.size() < 2)
            fail(where + ".table", "nodes/values size mismatch");
        return e;
    }
    if (j.contains("poly")) {
        e.kind = EntrySpec::Kind::Poly;
        size_t idx = 0;
        for (const auto& v : j.at("poly"))
            e.values.push_back(
                parse_matrix(v, where + ".poly[" + std::to_string(idx++) + "]"));
        if (e.values.empty()) fail(where + ".poly", "no coefficients");
        return e;
    }
    fail(where, "unknown entry form (want const | table | poly)");
}

inline json dump_entry(const EntrySpec& e) {
    json j;
    switch (e.kind) {
    case EntrySpec::Kind::Const: j["const"] = dump_matrix(e.constant); break;
    case EntrySpec::Kind::Table: {
        json t;
        t["nodes"] = e.nodes;
        json vals = json::array();
        for (const auto& v : e.values) vals.push_back(dump_matrix(v));
        t["values"] = std::move(vals);
        j["table"] = std::move(t);
        break;
    }
    case EntrySpec::Kind::Poly: {
        json vals = json::array();
        for (const auto& v : e.values) vals.push_back(dump_matrix(v));
        j["poly"] = std::move(vals);
        break;
    }
    }
    return j;
}

inline KernelSpec parse_kernel(const json& j, const std::string& where) {
    KernelSpec k;
    if (j.is_array()) {
        k.kind = KernelSpec::Kind::Const;
        k.constant = parse_matrix(j, where);
        return k;
    }
    if (!j.is_object()) fail(where, "expected an object or matrix literal");
    if (j.contains("const")) {
        k.kind = KernelSpec::Kind::Const;
        k.constant = parse_matrix(j.at("const"), where + ".const");
        return k;
    }
    if (j.contains("exp_discount")) {
        const json& d = j.at("exp_discount");
        if (!d.is_object() || !d.contains("rate") || !d.contains("base"))
            fail(where + ".exp_discount", "expected {rate, base}");
        if (!d.at("rate").is_number()) fail(where + ".exp_discount.rate", "expected number");
        k.kind = KernelSpec::Kind::ExpDiscount;
        k.rate = d.at("rate").get<double>();
        if (k.rate < 0.0)
            fail(where + ".exp_discount.rate", "negative rate breaks H3 monotonicity");
        k.base = parse_entry(d.at("base"), where + ".exp_discount.base");
        return k;
    }
    if (j.contains("of_s")) {
        k.kind = KernelSpec::Kind::OfS;
        k.base = parse_entry(j.at("of_s"), where + ".of_s");
        return k;
    }
    fail(where, "unknown kernel form (want const | exp_discount | of_s)");
}

inline json dump_kernel(const KernelSpec& k) {
    json j;
    switch (k.kind) {
    case KernelSpec::Kind::Const: j["const"] = dump_matrix(k.constant); break;
    case KernelSpec::Kind::ExpDiscount: {
        json d;
        d["rate"] = k.rate;
        d["base"] = dump_entry(k.base);
        j["exp_discount"] = std::move(d);
        break;
    }
    case KernelSpec::Kind::OfS: j["of_s"] = dump_entry(k.base); break;
    }
    return j;
}

} // namespace io_detail

inline ProblemConfig parse_problem_json(const nlohmann::json& j) {
    using io_detail::fail;
    using io_detail::parse_entry;
    using io_detail::parse_kernel;
    using io_detail::parse_matrix;

    ProblemConfig c;
    if (!j.is_object()) fail("root", "expected an object");
    c.name = j.value("name", std::string("unnamed"));

    if (!j.contains("dims")) fail("dims", "missing section");
    const auto& dims = j.at("dims");
    for (const char* f : {"n", "m", "k"})
        if (!dims.contains(f) || !dims.at(f).is_number_integer() || dims.at(f).get<int>() < 1)
            fail(std::string("dims.") + f, "expected positive integer");
    c.dims = Dims{dims.at("n").get<int>(), dims.at("m").get<int>(), dims.at("k").get<int>()};

    if (!j.contains("grid")) fail("grid", "missing section");
    const auto& grid = j.at("grid");
    if (!grid.contains("T") || !grid.at("T").is_number() || grid.at("T").get<double>() <= 0)
        fail("grid.T", "expected positive number");
    if (!grid.contains("steps") || !grid.at("steps").is_number_integer() ||
        grid.at("steps").get<int>() < 2)
        fail("grid.steps", "expected integer >= 2");
    c.T = grid.at("T").get<double>();
    c.steps = grid.at("steps").get<int>();

    if (!j.contains("coefficients")) fail("coefficients", "missing section");
    const auto& co = j.at("coefficients");
    auto entry = [&](const char* f) {
        if (!co.contains(f)) fail(std::string("coefficients.") + f, "missing");
        return parse_entry(co.at(f), std::string("coefficients.") + f);
    };
    c.A = entry("A");
    c.B = entry("B");
    c.C = entry("C");
    c.D = entry("D");
    c.Ahat = entry("Ahat");
    c.Bhat = entry("Bhat");
    c.Chat = entry("Chat");
    c.Dhat = entry("Dhat");
    if (!co.contains("H")) fail("coefficients.H", "missing");
    c.H = parse_matrix(co.at("H"), "coefficients.H");

    if (!j.contains("weights")) fail("weights", "missing section");
    const auto& we = j.at("weights");
    if (!we.contains("delta") || !we.at("delta").is_number() ||
        we.at("delta").get<double>() <= 0)
        fail("weights.delta", "expected positive number");
    c.delta = we.at("delta").get<double>();
    auto kern = [&](const char* f) {
        if (!we.contains(f)) fail(std::string("weights.") + f, "missing");
        return parse_kernel(we.at(f), std::string("weights.") + f);
    };
    c.Q = kern("Q");
    c.R = kern("R");
    c.M = kern("M");
    c.N = kern("N");
    auto wentry = [&](const char* f) {
        if (!we.contains(f)) fail(std::string("weights.") + f, "missing");
        return parse_entry(we.at(f), std::string("weights.") + f);
    };
    c.G1 = wentry("G1");
    c.G2 = wentry("G2");
    if (!we.contains("caps")) fail("weights.caps", "missing section");
    const auto& caps = we.at("caps");
    auto cap = [&](const char* f) {
        if (!caps.contains(f)) fail(std::string("weights.caps.") + f, "missing");
        return parse_matrix(caps.at(f), std::string("weights.caps.") + f);
    };
    c.caps.Qhat = cap("Qhat");
    c.caps.Rhat = cap("Rhat");
    c.caps.Mhat = cap("Mhat");
    c.caps.Nhat = cap("Nhat");
    c.caps.G1hat = cap("G1hat");
    c.caps.G2hat = cap("G2hat");

    if (j.contains("smoothness")) {
        const auto& sm = j.at("smoothness");
        c.smoothness.h4 = sm.value("h4", true);
        c.smoothness.h5 = sm.value("h5", true);
    }
    return c;
}

inline nlohmann::json to_json(const ProblemConfig& c) {
    using io_detail::dump_entry;
    using io_detail::dump_kernel;
    using io_detail::dump_matrix;
    nlohmann::json j;
    j["name"] = c.name;
    j["dims"] = {{"n", c.dims.n}, {"m", c.dims.m}, {"k", c.dims.k}};
    j["grid"] = {{"T", c.T}, {"steps", c.steps}};
    nlohmann::json co;
    co["A"] = dump_entry(c.A);
    co["B"] = dump_entry(c.B);
    co["C"] = dump_entry(c.C);
    co["D"] = dump_entry(c.D);
    co["Ahat"] = dump_entry(c.Ahat);
    co["Bhat"] = dump_entry(c.Bhat);
    co["Chat"] = dump_entry(c.Chat);
    co["Dhat"] = dump_entry(c.Dhat);
    co["H"] = dump_matrix(c.H);
    j["coefficients"] = std::move(co);
    nlohmann::json we;
    we["delta"] = c.delta;
    we["Q"] = dump_kernel(c.Q);
    we["R"] = dump_kernel(c.R);
    we["M"] = dump_kernel(c.M);
    we["N"] = dump_kernel(c.N);
    we["G1"] = dump_entry(c.G1);
    we["G2"] = dump_entry(c.G2);
    nlohmann::json caps;
    caps["Qhat"] = dump_matrix(c.caps.Qhat);
    caps["Rhat"] = dump_matrix(c.caps.Rhat);
    caps["Mhat"] = dump_matrix(c.caps.Mhat);
    caps["Nhat"] = dump_matrix(c.caps.Nhat);
    caps["G1hat"] = dump_matrix(c.caps.G1hat);
    caps["G2hat"] = dump_matrix(c.caps.G2hat);
    we["caps"] = std::move(caps);
    j["weights"] = std::move(we);
    j["smoothness"] = {{"h4", c.smoothness.h4}, {"h5", c.smoothness.h5}};
    return j;
}

inline ProblemConfig parse_problem_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("problem file: ") + e.what());
    }
    return parse_problem_json(j);
}

inline ProblemConfig load_problem_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open problem file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_problem_text(ss.str());
}

inline void save_problem_file(const ProblemConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write problem file: " + path);
    out << to_json(c).dump(2) << "\n";
}

} // namespace erelab
