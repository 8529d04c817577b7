#pragma once

// Regression metrics, test-year evaluation, early-season masking and report files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "yieldgraph/dataset.hpp"
#include "yieldgraph/models.hpp"

namespace yieldgraph {

namespace detail {

inline void check_pair(const std::vector<double>& truth, const std::vector<double>& pred, const char* what) {
    if (truth.empty()) throw std::invalid_argument(std::string(what) + " of empty vectors");
    if (truth.size() != pred.size()) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(truth.size()) + " targets but " +
                                    std::to_string(pred.size()) + " predictions");
    }
}

inline double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// exact test: the mean of equal values can round away from them
inline bool is_constant(const std::vector<double>& v) {
    return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

} // namespace detail

/// Root mean squared error in units of yield_std.
inline double rmse(const std::vector<double>& truth, const std::vector<double>& pred, double yield_std = 1.0) {
    detail::check_pair(truth, pred, "rmse");
    if (!(yield_std > 0.0)) throw std::invalid_argument("rmse needs a positive yield standard deviation");
    double ss = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) ss += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    return std::sqrt(ss / static_cast<double>(truth.size())) / yield_std;
}

inline double r_squared(const std::vector<double>& truth, const std::vector<double>& pred) {
    detail::check_pair(truth, pred, "r_squared");
    const double m = detail::mean_of(truth);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        ss_tot += (truth[i] - m) * (truth[i] - m);
    }
    if (ss_tot == 0.0 || detail::is_constant(truth)) throw std::domain_error("r_squared is undefined when the targets have zero variance");
    return 1.0 - ss_res / ss_tot;
}

inline double pearson_corr(const std::vector<double>& truth, const std::vector<double>& pred) {
    detail::check_pair(truth, pred, "pearson_corr");
    const double mt = detail::mean_of(truth), mp = detail::mean_of(pred);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        sxy += (truth[i] - mt) * (pred[i] - mp);
        sxx += (truth[i] - mt) * (truth[i] - mt);
        syy += (pred[i] - mp) * (pred[i] - mp);
    }
    if (sxx == 0.0 || syy == 0.0 || detail::is_constant(truth) || detail::is_constant(pred)) throw std::domain_error("correlation is undefined for a zero-variance vector");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRecord {
    std::string county;
    int year = 0;
    double truth = 0.0;
    double predicted = 0.0;
    double residual() const { return truth - predicted; }
};

struct EvalReport {
    Crop crop = Crop::corn;
    int test_year = 0;
    std::string method;
    std::uint64_t seed = 0;
    bool early = false;
    double yield_std = 1.0;
    double rmse = 0.0;  // in units of yield_std
    double r2 = 0.0;
    double corr = 0.0;
    std::vector<EvalRecord> records;

    std::size_t n_counties() const { return records.size(); }
};

/// Fills the metric fields from the records.
inline void compute_metrics(EvalReport& r) {
    std::vector<double> t, p;
    for (const auto& rec : r.records) {
        t.push_back(rec.truth);
        p.push_back(rec.predicted);
    }
    // undefined r2 / corr (constant truth or predictions) are reported as nan
    const auto or_nan = [](auto f) {
        try {
            return f();
        } catch (const std::domain_error&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };
    r.rmse = rmse(t, p, r.yield_std);
    r.r2 = or_nan([&] { return r_squared(t, p); });
    r.corr = t.size() > 1 ? or_nan([&] { return pearson_corr(t, p); }) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------
// Early-season masking

/// Replaces weekly weather and land-surface values from cutoff_week on with
/// the county's mean over the training years.
struct MaskingPlan {
    std::size_t cutoff_week = 22;
    /// county id -> kSoilOffset weekly means; NaN where no training value exists.
    std::map<std::string, std::vector<double>> means;
};

inline MaskingPlan build_masking_plan(const Dataset& raw, const YearSplit& split, std::size_t cutoff_week = 22) {
    if (cutoff_week > kWeeks) throw std::invalid_argument("mask cutoff week must be at most 52");
    MaskingPlan plan;
    plan.cutoff_week = cutoff_week;
    for (std::size_t c = 0; c < raw.graph.size(); ++c) {
        std::vector<double> sum(kSoilOffset, 0.0);
        std::vector<std::size_t> n(kSoilOffset, 0);
        for (int y : split.train_years) {
            const YearFeatures* f = raw.find(c, y);
            if (!f) continue;
            for (std::size_t i = 0; i < kSoilOffset; ++i) {
                if (f->missing[i]) continue;
                sum[i] += f->values[i];
                ++n[i];
            }
        }
        for (std::size_t i = 0; i < kSoilOffset; ++i)
            sum[i] = n[i] ? sum[i] / static_cast<double>(n[i]) : std::numeric_limits<double>::quiet_NaN();
        plan.means.emplace(raw.graph.id(c), std::move(sum));
    }
    return plan;
}

inline YearFeatures apply_early_mask(const YearFeatures& f, const MaskingPlan& plan) {
    auto it = plan.means.find(f.county);
    if (it == plan.means.end()) throw InputError("county " + f.county + " has no training-period means for masking");
    YearFeatures out = f;
    for (std::size_t v = 0; v < kWeeklyVars; ++v)
        for (std::size_t w = plan.cutoff_week; w < kWeeks; ++w) {
            const std::size_t i = v * kWeeks + w;
            const double m = it->second[i];
            out.missing[i] = std::isnan(m);
            out.values[i] = std::isnan(m) ? 0.0 : m;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Predicts every labeled test-year county with a complete history window.
/// With a masking plan the test-year records are masked first; earlier years stay intact.
inline EvalReport evaluate(const ModelCheckpoint& ck, const Dataset& raw, const YearSplit& split,
                           const MaskingPlan* mask = nullptr) {
    const Crop crop = ck.spec.crop;
    if (raw.labeled_count(split.test_year, crop) == 0) {
        throw InputError("no labeled " + to_string(crop) + " counties in test year " + std::to_string(split.test_year));
    }
    Dataset input = raw;
    if (mask) {
        for (auto& [key, f] : input.features)
            if (key.second == split.test_year) f = apply_early_mask(f, *mask);
    }
    const Dataset ds = prepare_dataset(input, ck);
    const FeatureSource src{&ds, nullptr};
    const auto samples = collect_samples(raw, src, {split.test_year}, crop, ck.spec.history(), ck.target);
    if (samples.empty()) {
        throw InputError("no evaluable counties in " + std::to_string(split.test_year) + " (missing history windows)");
    }
    BatchRequest req{split.test_year, {}};
    for (const auto& s : samples) req.counties.push_back(s.county);
    const Predictor predictor(ck);
    const auto pred = predictor.predict(src, req, &raw);

    EvalReport r;
    r.crop = crop;
    r.test_year = split.test_year;
    r.method = to_string(ck.spec.kind);
    r.seed = ck.spec.seed;
    r.early = mask != nullptr;
    r.yield_std = raw.yield_std(crop);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        r.records.push_back({raw.graph.id(samples[i].county), split.test_year, *raw.yield(samples[i].county, split.test_year, crop),
                             ck.target.destandardize(pred[i])});
    }
    compute_metrics(r);
    return r;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_metrics(std::ostream& out, const EvalReport& r) {
    out << "method = " << r.method << '\n'
        << "crop = " << to_string(r.crop) << '\n'
        << "year = " << r.test_year << '\n'
        << "seed = " << r.seed << '\n'
        << "early = " << (r.early ? "true" : "false") << '\n'
        << "n = " << r.n_counties() << '\n'
        << "yield_std = " << format_double(r.yield_std) << '\n'
        << "rmse = " << format_double(r.rmse) << '\n'
        << "r2 = " << (std::isnan(r.r2) ? std::string("nan") : format_double(r.r2)) << '\n'
        << "corr = " << (std::isnan(r.corr) ? std::string("nan") : format_double(r.corr)) << '\n';
}

/// `key = value` lines; blank lines and '#' comments are skipped.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& source) {
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw InputError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw InputError(source + ":" + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw InputError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = trim(t.substr(eq + 1));
    }
    return kv;
}

inline void write_predictions(std::ostream& out, const EvalReport& r) {
    out << "county,year,true,predicted\n";
    for (const auto& rec : r.records)
        out << rec.county << ',' << rec.year << ',' << format_double(rec.truth) << ',' << format_double(rec.predicted) << '\n';
}

inline std::vector<EvalRecord> parse_predictions(std::istream& in, const std::string& source = "predictions") {
    std::string line;
    if (!std::getline(in, line) || line != "county,year,true,predicted") {
        throw InputError(source + ": header must be 'county,year,true,predicted'");
    }
    std::vector<EvalRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        const auto year = f.size() == 4 ? parse_double(f[1]) : std::nullopt;
        const auto t = f.size() == 4 ? parse_double(f[2]) : std::nullopt;
        const auto p = f.size() == 4 ? parse_double(f[3]) : std::nullopt;
        if (!year || !t || !p) throw InputError(source + ":" + std::to_string(lineno) + ": malformed row");
        out.push_back({std::string(f[0]), static_cast<int>(*year), *t, *p});
    }
    return out;
}

/// True-vs-predicted scatter with the identity line, one circle per county.
inline void write_scatter_svg(std::ostream& out, const EvalReport& r) {
    constexpr double size = 800.0, margin = 60.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& rec : r.records) {
        lo = std::min({lo, rec.truth, rec.predicted});
        hi = std::max({hi, rec.truth, rec.predicted});
    }
    if (!(hi > lo)) {
        lo -= 1.0;
        hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    const auto sx = [&](double v) { return margin + (v - lo) / (hi - lo) * (size - 2 * margin); };
    const auto sy = [&](double v) { return size - margin - (v - lo) / (hi - lo) * (size - 2 * margin); };
    const auto num = [](double v) {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << v;
        return os.str();
    };
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n"
        << "<rect x=\"0\" y=\"0\" width=\"800\" height=\"800\" fill=\"white\"/>\n"
        << "<text x=\"400\" y=\"30\" text-anchor=\"middle\" font-size=\"18\">" << r.method << ' ' << to_string(r.crop) << ' '
        << r.test_year << (r.early ? " (early)" : "") << ", R2 " << num(r.r2) << "</text>\n"
        << "<text x=\"400\" y=\"785\" text-anchor=\"middle\" font-size=\"14\">true yield</text>\n"
        << "<text x=\"20\" y=\"400\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 20 400)\">predicted yield</text>\n"
        << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size - 2 * margin << "\" height=\"" << size - 2 * margin
        << "\" fill=\"none\" stroke=\"black\"/>\n"
        << "<line class=\"identity\" x1=\"" << num(sx(lo)) << "\" y1=\"" << num(sy(lo)) << "\" x2=\"" << num(sx(hi)) << "\" y2=\""
        << num(sy(hi)) << "\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n";
    for (const auto& rec : r.records) {
        out << "<circle cx=\"" << num(sx(rec.truth)) << "\" cy=\"" << num(sy(rec.predicted))
            << "\" r=\"4\" fill=\"steelblue\" fill-opacity=\"0.7\"><title>" << rec.county << "</title></circle>\n";
    }
    out << "</svg>\n";
}

namespace detail {

template <class Fn>
void write_file(const std::filesystem::path& path, Fn&& fn) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    fn(out);
    out.flush();
    if (!out) throw InputError("write failed for " + path.string());
}

} // namespace detail

/// metrics.txt, predictions.csv and scatter.svg in dir (created if needed).
inline void emit_report(const EvalReport& r, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
    detail::write_file(dir / "metrics.txt", [&](std::ostream& o) { write_metrics(o, r); });
    detail::write_file(dir / "predictions.csv", [&](std::ostream& o) { write_predictions(o, r); });
    detail::write_file(dir / "scatter.svg", [&](std::ostream& o) { write_scatter_svg(o, r); });
}

/// Reads back a report directory written by emit_report.
inline EvalReport read_report(const std::filesystem::path& dir) {
    std::ifstream m(dir / "metrics.txt");
    if (!m) throw InputError("cannot read " + (dir / "metrics.txt").string());
    const auto kv = parse_key_values(m, (dir / "metrics.txt").string());
    const auto need = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw InputError("metrics file lacks '" + k + "'");
        return it->second;
    };
    const auto num = [&](const std::string& k) {
        if (need(k) == "nan") return std::numeric_limits<double>::quiet_NaN();
        const auto v = parse_double(need(k));
        if (!v) throw InputError("metrics value for '" + k + "' is not a number");
        return *v;
    };
    EvalReport r;
    r.method = need("method");
    r.crop = parse_crop(need("crop"));
    r.test_year = static_cast<int>(num("year"));
    try {
        r.seed = std::stoull(need("seed"));
    } catch (const std::exception&) {
        throw InputError("metrics seed is not an unsigned integer");
    }
    r.early = need("early") == "true";
    r.yield_std = num("yield_std");
    r.rmse = num("rmse");
    r.r2 = num("r2");
    r.corr = num("corr");
    std::ifstream p(dir / "predictions.csv");
    if (!p) throw InputError("cannot read " + (dir / "predictions.csv").string());
    r.records = parse_predictions(p, (dir / "predictions.csv").string());
    if (static_cast<std::size_t>(num("n")) != r.records.size()) throw InputError("metrics n disagrees with predictions.csv");
    return r;
}

} // namespace yieldgraph
