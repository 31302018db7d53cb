#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rme/rng.hpp"

namespace rme {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Market flavor: in a quasi market unspent budget retains value.
enum class MarketKind { fisher, quasi };

inline double quasi_flag(MarketKind k) { return k == MarketKind::quasi ? 1.0 : 0.0; }

/// Low-rank factor form of a valuation matrix: values = theta * phi^T.
struct FactoredValuations {
    MatrixXd theta;  // n x d buyer embeddings
    MatrixXd phi;    // m x d good embeddings
};

/// A market of n buyers and m divisible goods, each of unit supply.
///
/// `values` always holds the dense nominal valuation matrix; when the market
/// was specified (or generated) in factored form the factors are kept
/// alongside, since buyerside and joint uncertainty models need them.
struct Market {
    VectorXd budgets;  // n, strictly positive
    MatrixXd values;   // n x m, elementwise nonnegative, rows sum > 0
    std::optional<FactoredValuations> factors;

    int buyers() const { return static_cast<int>(budgets.size()); }
    int goods() const { return static_cast<int>(values.cols()); }
};

struct Violation {
    std::string where;
    std::string message;
};

/// Lists every violated market invariant; empty iff the market is valid.
inline std::vector<Violation> validate(const Market& market) {
    std::vector<Violation> out;
    const int n = market.buyers();
    const int m = market.goods();
    if (n < 1) out.push_back({"market", "buyer count must be >= 1"});
    if (m < 1) out.push_back({"market", "good count must be >= 1"});
    if (market.values.rows() != n)
        out.push_back({"market", "valuation rows do not match buyer count"});
    for (int i = 0; i < n; ++i) {
        if (!(market.budgets[i] > 0.0))
            out.push_back({"buyer " + std::to_string(i), "budget must be positive"});
    }
    for (int i = 0; i < market.values.rows(); ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < m; ++j) {
            const double v = market.values(i, j);
            if (!(v >= 0.0)) {
                out.push_back({"buyer " + std::to_string(i) + ", good " + std::to_string(j),
                               "valuation must be nonnegative"});
            } else {
                row_sum += v;
            }
        }
        if (!(row_sum > 0.0))
            out.push_back({"buyer " + std::to_string(i), "total valuation must be positive"});
    }
    if (market.factors) {
        const auto& f = *market.factors;
        const int d = static_cast<int>(f.theta.cols());
        if (f.phi.cols() != d)
            out.push_back({"factors", "theta and phi rank mismatch"});
        if (f.theta.rows() != n || f.phi.rows() != m)
            out.push_back({"factors", "factor dimensions do not match market"});
        if (d > std::min(n, m))
            out.push_back({"factors", "rank must not exceed min(buyers, goods)"});
    }
    return out;
}

namespace detail {

inline MatrixXd matrix_from_json(const nlohmann::json& rows, const std::string& name) {
    if (!rows.is_array() || rows.empty())
        throw std::runtime_error("parse error: " + name + " must be a nonempty array of rows");
    const std::size_t ncols = rows.front().size();
    MatrixXd out(rows.size(), ncols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (!row.is_array() || row.size() != ncols)
            throw std::runtime_error("parse error: ragged rows in " + name);
        for (std::size_t j = 0; j < ncols; ++j) {
            if (!row[j].is_number())
                throw std::runtime_error("parse error: non-numeric entry in " + name);
            out(i, j) = row[j].get<double>();
        }
    }
    return out;
}

inline nlohmann::json matrix_to_json(const MatrixXd& a) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < a.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < a.cols(); ++j) row.push_back(a(i, j));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace detail

/// Parses the market file schema:
///   {version, n, m, budgets: [..],
///    valuations: {kind:"dense", rows:[[..]]} | {kind:"factored", theta:[[..]], phi:[[..]]}}
/// Throws "parse error: ..." on malformed input and "validation error: ..."
/// naming the first violated invariant.
inline Market parse_market(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("parse error: ") + e.what());
    }
    for (const char* key : {"version", "n", "m", "budgets", "valuations"}) {
        if (!doc.contains(key))
            throw std::runtime_error(std::string("parse error: missing field '") + key + "'");
    }
    Market market;
    const int n = doc["n"].get<int>();
    const int m = doc["m"].get<int>();
    const auto& budgets = doc["budgets"];
    if (!budgets.is_array() || static_cast<int>(budgets.size()) != n)
        throw std::runtime_error("parse error: budgets must be an array of length n");
    market.budgets.resize(n);
    for (int i = 0; i < n; ++i) market.budgets[i] = budgets[i].get<double>();

    const auto& vals = doc["valuations"];
    const std::string kind = vals.value("kind", "");
    if (kind == "dense") {
        market.values = detail::matrix_from_json(vals.at("rows"), "valuations.rows");
    } else if (kind == "factored") {
        FactoredValuations f;
        f.theta = detail::matrix_from_json(vals.at("theta"), "valuations.theta");
        f.phi = detail::matrix_from_json(vals.at("phi"), "valuations.phi");
        if (f.theta.cols() != f.phi.cols())
            throw std::runtime_error("parse error: theta and phi must share the rank dimension");
        market.values = f.theta * f.phi.transpose();
        market.factors = std::move(f);
    } else {
        throw std::runtime_error("parse error: valuations.kind must be 'dense' or 'factored'");
    }
    if (market.values.rows() != n || market.values.cols() != m)
        throw std::runtime_error("parse error: valuation dimensions do not match n x m");

    const auto violations = validate(market);
    if (!violations.empty()) {
        throw std::runtime_error("validation error: " + violations.front().message + " (" +
                                 violations.front().where + ")");
    }
    return market;
}

inline std::string serialize_market(const Market& market) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["n"] = market.buyers();
    doc["m"] = market.goods();
    doc["budgets"] = std::vector<double>(market.budgets.data(),
                                         market.budgets.data() + market.budgets.size());
    if (market.factors) {
        doc["valuations"] = {{"kind", "factored"},
                             {"theta", detail::matrix_to_json(market.factors->theta)},
                             {"phi", detail::matrix_to_json(market.factors->phi)}};
    } else {
        doc["valuations"] = {{"kind", "dense"}, {"rows", detail::matrix_to_json(market.values)}};
    }
    return doc.dump(2);
}

inline Market load_market(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("parse error: cannot open market file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_market(buf.str());
}

inline void save_market(const Market& market, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write market file: " + path);
    out << serialize_market(market) << '\n';
}

struct GeneratorConfig {
    double budget = 1.0;  // same budget for every buyer
};

/// Synthesizes a rank-d market: theta (n x d) and phi (m x d) entries drawn
/// i.i.d. uniform on [0,1], so implied valuations are strictly positive and
/// the low-rank correlation structure is preserved. Pure function of its
/// arguments; the same seed always yields the same market.
inline Market generate_low_rank_market(int n, int m, int d, std::uint64_t seed,
                                       GeneratorConfig config = {}) {
    if (n < 1 || m < 1 || d < 1 || d > std::min(n, m))
        throw std::invalid_argument("generate_low_rank_market: need 1 <= d <= min(n, m)");
    if (!(config.budget > 0.0))
        throw std::invalid_argument("generate_low_rank_market: budget must be positive");
    Rng rng(seed);
    FactoredValuations f;
    f.theta.resize(n, d);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k) f.theta(i, k) = rng.uniform();
    f.phi.resize(m, d);
    for (int j = 0; j < m; ++j)
        for (int k = 0; k < d; ++k) f.phi(j, k) = rng.uniform();
    Market market;
    market.budgets = VectorXd::Constant(n, config.budget);
    market.values = f.theta * f.phi.transpose();
    market.factors = std::move(f);
    return market;
}

}  // namespace rme
