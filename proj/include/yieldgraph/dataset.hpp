#pragma once

// County-year feature records, yield labels, CSV ingestion, normalization,
// history windows and the seeded synthetic generator.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "yieldgraph/geo.hpp"
#include "yieldgraph/graph.hpp"
#include "yieldgraph/random.hpp"

namespace yieldgraph {

inline constexpr std::size_t kWeeks = 52;
inline constexpr std::size_t kWeatherVars = 7;
inline constexpr std::size_t kLandVars = 16;
inline constexpr std::size_t kWeeklyVars = kWeatherVars + kLandVars;
inline constexpr std::size_t kSoilVars = 20;
inline constexpr std::size_t kSoilDepths = 6;
inline constexpr std::size_t kStoredExtras = 6;
inline constexpr std::size_t kExtras = kStoredExtras + 1;

// Flat layout of one county-year: [weather | land | soil | extras].
inline constexpr std::size_t kWeatherOffset = 0;
inline constexpr std::size_t kLandOffset = kWeatherVars * kWeeks;
inline constexpr std::size_t kSoilOffset = kLandOffset + kLandVars * kWeeks;
inline constexpr std::size_t kExtrasOffset = kSoilOffset + kSoilVars * kSoilDepths;
inline constexpr std::size_t kFeatureWidth = kExtrasOffset + kExtras;
inline constexpr std::size_t kStoredWidth = kFeatureWidth - 1;
inline constexpr std::size_t kPrevYieldIndex = kExtrasOffset + kStoredExtras;

/// Normalization channels: 23 weekly variables, 20 soil variables, 7 extras.
inline constexpr std::size_t kChannels = kWeeklyVars + kSoilVars + kExtras;

inline std::size_t channel_of(std::size_t flat) {
    if (flat < kSoilOffset) return flat / kWeeks;
    if (flat < kExtrasOffset) return kWeeklyVars + (flat - kSoilOffset) / kSoilDepths;
    if (flat < kFeatureWidth) return kWeeklyVars + kSoilVars + (flat - kExtrasOffset);
    throw std::out_of_range("feature index out of range");
}

inline const std::vector<std::string>& weather_vars() {
    static const std::vector<std::string> v = {"prcp", "tdmean", "tmax", "tmean", "tmin", "vpdmax", "vpdmin"};
    return v;
}

inline const std::vector<std::string>& land_vars() {
    static const std::vector<std::string> v = {
        "apcp",        "mstav_0_200", "mstav_0_100",  "soilm_0_200",  "soilm_0_100",  "soilm_0_10",
        "soilm_10_40", "soilm_40_100", "soilm_100_200", "spfh",       "tmp2m",        "tsoil_0_10",
        "tsoil_10_40", "tsoil_40_100", "tsoil_100_200", "wind_max"};
    return v;
}

inline const std::vector<std::string>& soil_vars() {
    static const std::vector<std::string> v = {
        "awc",          "bulk_density",   "ec",           "om",
        "silt",         "clay",           "sand",         "tex_sand",
        "tex_loamy_sand", "tex_sandy_loam", "tex_loam",   "tex_silt_loam",
        "tex_silt",     "tex_sandy_clay_loam", "tex_clay_loam", "tex_silty_clay_loam",
        "tex_sandy_clay", "tex_silty_clay", "tex_clay",   "ph"};
    return v;
}

inline const std::vector<std::string>& extra_vars() {
    static const std::vector<std::string> v = {"nccpi", "depth_restrictive", "nccpi_sg",
                                               "nccpi_corn", "nccpi_cotton", "nccpi_soy"};
    return v;
}

/// Stored feature columns in file order (the previous-year yield extra is derived, not stored).
inline const std::vector<std::string>& feature_columns() {
    static const std::vector<std::string> cols = [] {
        std::vector<std::string> c;
        for (const auto& v : weather_vars())
            for (std::size_t w = 0; w < kWeeks; ++w) c.push_back("w_" + v + "_" + std::to_string(w));
        for (const auto& v : land_vars())
            for (std::size_t w = 0; w < kWeeks; ++w) c.push_back("l_" + v + "_" + std::to_string(w));
        for (const auto& v : soil_vars())
            for (std::size_t d = 0; d < kSoilDepths; ++d) c.push_back("s_" + v + "_" + std::to_string(d));
        for (const auto& v : extra_vars()) c.push_back("e_" + v);
        return c;
    }();
    return cols;
}

enum class Crop { corn, soybean };

inline Crop parse_crop(const std::string& s) {
    if (s == "corn") return Crop::corn;
    if (s == "soybean" || s == "soy") return Crop::soybean;
    throw InputError("unknown crop '" + s + "' (expected corn or soybean)");
}

inline std::string to_string(Crop c) { return c == Crop::corn ? "corn" : "soybean"; }

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

/// x_{c,t}: one county-year, flat layout above. Missing cells are flagged.
struct YearFeatures {
    std::string county;
    int year = 0;
    std::vector<double> values = std::vector<double>(kFeatureWidth, 0.0);
    std::vector<bool> missing = std::vector<bool>(kFeatureWidth, false);

    double& weather(std::size_t var, std::size_t week) { return values.at(kWeatherOffset + var * kWeeks + week); }
    double& land(std::size_t var, std::size_t week) { return values.at(kLandOffset + var * kWeeks + week); }
    double& soil(std::size_t var, std::size_t depth) { return values.at(kSoilOffset + var * kSoilDepths + depth); }
    double& extra(std::size_t i) { return values.at(kExtrasOffset + i); }
    double weather(std::size_t var, std::size_t week) const { return values.at(kWeatherOffset + var * kWeeks + week); }
    double land(std::size_t var, std::size_t week) const { return values.at(kLandOffset + var * kWeeks + week); }
    double soil(std::size_t var, std::size_t depth) const { return values.at(kSoilOffset + var * kSoilDepths + depth); }
    double extra(std::size_t i) const { return values.at(kExtrasOffset + i); }

    bool operator==(const YearFeatures&) const = default;
};

class YieldTable {
public:
    void set(const std::string& county, int year, Crop crop, double value) {
        if (!(std::isfinite(value) && value > 0.0)) {
            throw InputError("yield for county " + county + ", year " + std::to_string(year) +
                             " must be positive, got " + format_double(value));
        }
        entries_[{county, year, crop}] = value;
    }

    std::optional<double> get(const std::string& county, int year, Crop crop) const {
        auto it = entries_.find({county, year, crop});
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t size() const { return entries_.size(); }

    /// Mean over every county reporting that year, or nullopt.
    std::optional<double> national_mean(Crop crop, int year) const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& [key, v] : entries_) {
            if (std::get<1>(key) == year && std::get<2>(key) == crop) {
                s += v;
                ++n;
            }
        }
        if (n == 0) return std::nullopt;
        return s / static_cast<double>(n);
    }

    std::size_t coverage(Crop crop, int year) const {
        std::size_t n = 0;
        for (const auto& [key, v] : entries_) n += std::get<1>(key) == year && std::get<2>(key) == crop;
        return n;
    }

    std::vector<double> values(Crop crop) const {
        std::vector<double> out;
        for (const auto& [key, v] : entries_)
            if (std::get<2>(key) == crop) out.push_back(v);
        return out;
    }

    const std::map<std::tuple<std::string, int, Crop>, double>& entries() const { return entries_; }

    bool operator==(const YieldTable&) const = default;

private:
    std::map<std::tuple<std::string, int, Crop>, double> entries_;
};

/// Features keyed by (graph index, year); yields keyed by county id.
struct Dataset {
    CountyGraph graph;
    std::vector<int> years;
    std::map<std::pair<std::size_t, int>, YearFeatures> features;
    YieldTable yields;
    std::size_t skipped_yield_rows = 0;

    const YearFeatures* find(std::size_t county, int year) const {
        auto it = features.find({county, year});
        return it == features.end() ? nullptr : &it->second;
    }

    std::optional<double> yield(std::size_t county, int year, Crop crop) const {
        return yields.get(graph.id(county), year, crop);
    }

    std::size_t labeled_count(int year, Crop crop) const {
        std::size_t n = 0;
        for (std::size_t c = 0; c < graph.size(); ++c) n += find(c, year) && yield(c, year, crop).has_value();
        return n;
    }

    bool has_year(int y) const { return std::binary_search(years.begin(), years.end(), y); }

    /// Crop yield standard deviation over every year (population form).
    double yield_std(Crop crop) const {
        const auto v = yields.values(crop);
        if (v.size() < 2) throw InputError("need at least two " + to_string(crop) + " yields for a standard deviation");
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / static_cast<double>(v.size()));
    }
};

/// Writes the previous-year national mean yield of `crop` into every record's
/// last extra; flagged missing when the prior year has no yields.
inline void fill_previous_yield(Dataset& ds, Crop crop) {
    std::map<int, std::optional<double>> cache;
    for (auto& [key, f] : ds.features) {
        const int prev = key.second - 1;
        if (!cache.count(prev)) cache[prev] = ds.yields.national_mean(crop, prev);
        const auto& m = cache[prev];
        f.values[kPrevYieldIndex] = m.value_or(0.0);
        f.missing[kPrevYieldIndex] = !m.has_value();
    }
}

// ---------------------------------------------------------------------------
// CSV formats

inline void write_features(std::ostream& out, const Dataset& ds) {
    out << "county,year";
    for (const auto& c : feature_columns()) out << ',' << c;
    out << '\n';
    for (const auto& [key, f] : ds.features) {
        out << f.county << ',' << f.year;
        for (std::size_t i = 0; i < kStoredWidth; ++i) {
            out << ',';
            if (f.missing[i]) out << "NA";
            else out << format_double(f.values[i]);
        }
        out << '\n';
    }
}

inline std::vector<YearFeatures> parse_features(std::istream& in, const std::string& source = "features") {
    std::string line;
    if (!std::getline(in, line)) throw InputError(source + ": empty features file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv(line);
    const auto& cols = feature_columns();
    if (header.size() < 2 || header[0] != "county" || header[1] != "year") {
        throw InputError(source + ":1: header must start with county,year");
    }
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i + 2 >= header.size() || header[i + 2] != cols[i]) {
            throw InputError(source + ":1: expected column " + cols[i] + " at position " + std::to_string(i + 3));
        }
    }
    if (header.size() != cols.size() + 2) {
        throw InputError(source + ":1: unexpected extra column " + std::string(header[cols.size() + 2]));
    }
    std::vector<YearFeatures> rows;
    std::set<std::pair<std::string, int>> seen;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        const std::string where = source + ":" + std::to_string(lineno);
        YearFeatures f;
        f.county = std::string(fields[0]);
        if (f.county.empty()) throw InputError(where + ": empty county id");
        const auto year = fields.size() > 1 ? parse_double(fields[1]) : std::nullopt;
        if (!year || *year != std::floor(*year)) throw InputError(where + ": malformed year");
        f.year = static_cast<int>(*year);
        const std::string who = " (county " + f.county + ", year " + std::to_string(f.year) + ")";
        if (fields.size() != cols.size() + 2) {
            throw InputError(where + ": expected " + std::to_string(cols.size() + 2) + " fields, got " +
                             std::to_string(fields.size()) + who);
        }
        for (std::size_t i = 0; i < kStoredWidth; ++i) {
            const auto field = fields[i + 2];
            if (field.empty() || field == "NA" || field == "nan" || field == "NaN") {
                f.missing[i] = true;
                continue;
            }
            const auto v = parse_double(field);
            if (!v || !std::isfinite(*v)) {
                throw InputError(where + ": malformed value '" + std::string(field) + "' in column " + cols[i] + who);
            }
            f.values[i] = *v;
        }
        f.missing[kPrevYieldIndex] = true;
        if (!seen.emplace(f.county, f.year).second) throw InputError(where + ": duplicate row" + who);
        rows.push_back(std::move(f));
    }
    return rows;
}

inline void write_yields(std::ostream& out, const YieldTable& t) {
    out << "county,year,crop,yield\n";
    for (const auto& [key, v] : t.entries()) {
        out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << to_string(std::get<2>(key)) << ','
            << format_double(v) << '\n';
    }
}

struct YieldRow {
    std::string county;
    int year;
    Crop crop;
    double value;
};

inline std::vector<YieldRow> parse_yields(std::istream& in, const std::string& source = "yields") {
    std::string line;
    if (!std::getline(in, line)) throw InputError(source + ": empty yields file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "county,year,crop,yield") throw InputError(source + ":1: header must be county,year,crop,yield");
    std::vector<YieldRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv(line);
        const std::string where = source + ":" + std::to_string(lineno);
        if (f.size() != 4) throw InputError(where + ": expected 4 fields, got " + std::to_string(f.size()));
        const auto year = parse_double(f[1]);
        const auto v = parse_double(f[3]);
        if (!year || *year != std::floor(*year)) throw InputError(where + ": malformed year");
        if (!v || !std::isfinite(*v) || *v <= 0.0) throw InputError(where + ": yield must be a positive number");
        Crop crop;
        try {
            crop = parse_crop(std::string(f[2]));
        } catch (const InputError& e) {
            throw InputError(where + ": " + e.what());
        }
        rows.push_back({std::string(f[0]), static_cast<int>(*year), crop, *v});
    }
    return rows;
}

/// Builds a dataset from parsed parts. Graph nodes are the feature counties
/// (sorted); yields for counties without features are skipped and counted.
inline Dataset assemble_dataset(std::vector<YearFeatures> rows, const std::vector<YieldRow>& yields,
                                std::istream& adjacency, const std::string& adjacency_source = "adjacency") {
    std::set<std::string> ids;
    std::set<int> years;
    for (const auto& r : rows) {
        ids.insert(r.county);
        years.insert(r.year);
    }
    if (ids.empty()) throw InputError("features file contains no rows");
    const std::vector<std::string> universe(ids.begin(), ids.end());
    Dataset ds;
    try {
        ds.graph = parse_graph(adjacency, adjacency_source, &universe);
    } catch (const GraphError& e) {
        throw InputError(e.what());
    }
    ds.years.assign(years.begin(), years.end());
    for (auto& r : rows) {
        const std::size_t c = ds.graph.index_of(r.county);
        const int y = r.year;
        ds.features.emplace(std::make_pair(c, y), std::move(r));
    }
    for (const auto& y : yields) {
        if (!ids.count(y.county)) {
            ++ds.skipped_yield_rows;
            continue;
        }
        ds.yields.set(y.county, y.year, y.crop, y.value);
    }
    return ds;
}

inline Dataset load_dataset(const std::string& features_path, const std::string& yields_path,
                            const std::string& adjacency_path) {
    std::ifstream ff(features_path);
    if (!ff) throw InputError("cannot open features file " + features_path);
    std::ifstream yf(yields_path);
    if (!yf) throw InputError("cannot open yields file " + yields_path);
    std::ifstream af(adjacency_path);
    if (!af) throw InputError("cannot open adjacency file " + adjacency_path);
    auto rows = parse_features(ff, features_path);
    auto ys = parse_yields(yf, yields_path);
    return assemble_dataset(std::move(rows), ys, af, adjacency_path);
}

/// Writes features.csv, yields.csv and adjacency.tsv into dir.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw InputError("cannot write " + (dir / name).string());
        return out;
    };
    {
        auto out = open("features.csv");
        write_features(out, ds);
    }
    {
        auto out = open("yields.csv");
        write_yields(out, ds.yields);
    }
    {
        auto out = open("adjacency.tsv");
        write_graph(out, ds.graph);
    }
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
    return load_dataset((dir / "features.csv").string(), (dir / "yields.csv").string(),
                        (dir / "adjacency.tsv").string());
}

// ---------------------------------------------------------------------------
// Splits, normalization, windows

struct YearSplit {
    int test_year = 0;
    int val_year = 0;
    std::vector<int> train_years;
};

inline YearSplit make_split(const std::vector<int>& dataset_years, int test_year) {
    YearSplit s;
    s.test_year = test_year;
    s.val_year = test_year - 1;
    const auto has = [&](int y) { return std::find(dataset_years.begin(), dataset_years.end(), y) != dataset_years.end(); };
    if (!has(test_year)) throw InputError("test year " + std::to_string(test_year) + " is not in the dataset");
    if (!has(s.val_year)) throw InputError("validation year " + std::to_string(s.val_year) + " is not in the dataset");
    for (int y : dataset_years)
        if (y < s.val_year) s.train_years.push_back(y);
    std::sort(s.train_years.begin(), s.train_years.end());
    if (s.train_years.empty()) throw InputError("no training years before " + std::to_string(s.val_year));
    return s;
}

struct NormStats {
    std::array<double, kChannels> mean{};
    std::array<double, kChannels> std{};
    std::array<bool, kChannels> constant{};
    std::vector<int> source_years;

    void apply(YearFeatures& f) const {
        for (std::size_t i = 0; i < kFeatureWidth; ++i) {
            const std::size_t c = channel_of(i);
            f.values[i] = f.missing[i] ? 0.0 : (f.values[i] - mean[c]) / std[c];
        }
    }
};

/// Per-channel z-score statistics over the training years only.
inline NormStats compute_norm_stats(const Dataset& ds, const YearSplit& split) {
    NormStats st;
    st.source_years = split.train_years;
    for (int y : st.source_years) {
        if (y >= split.val_year) throw std::logic_error("normalization statistics may only use years before validation");
    }
    std::array<double, kChannels> sum{}, sq{};
    std::array<std::size_t, kChannels> cnt{};
    const std::set<int> train(split.train_years.begin(), split.train_years.end());
    for (const auto& [key, f] : ds.features) {
        if (!train.count(key.second)) continue;
        for (std::size_t i = 0; i < kFeatureWidth; ++i) {
            if (f.missing[i]) continue;
            const std::size_t c = channel_of(i);
            sum[c] += f.values[i];
            ++cnt[c];
        }
    }
    for (std::size_t c = 0; c < kChannels; ++c) st.mean[c] = cnt[c] ? sum[c] / static_cast<double>(cnt[c]) : 0.0;
    for (const auto& [key, f] : ds.features) {
        if (!train.count(key.second)) continue;
        for (std::size_t i = 0; i < kFeatureWidth; ++i) {
            if (f.missing[i]) continue;
            const std::size_t c = channel_of(i);
            const double d = f.values[i] - st.mean[c];
            sq[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < kChannels; ++c) {
        const double sd = cnt[c] ? std::sqrt(sq[c] / static_cast<double>(cnt[c])) : 0.0;
        st.constant[c] = !(sd > 1e-12);
        st.std[c] = st.constant[c] ? 1.0 : sd;
    }
    return st;
}

inline Dataset apply_norm(Dataset ds, const NormStats& st) {
    for (auto& [key, f] : ds.features) st.apply(f);
    return ds;
}

inline std::pair<Dataset, NormStats> normalize(const Dataset& ds, const YearSplit& split) {
    NormStats st = compute_norm_stats(ds, split);
    return {apply_norm(ds, st), st};
}

/// Target standardization with training-year statistics.
struct TargetScaler {
    double mean = 0.0;
    double std = 1.0;
    double standardize(double y) const { return (y - mean) / std; }
    double destandardize(double z) const { return z * std + mean; }
};

inline TargetScaler fit_target_scaler(const Dataset& ds, const YearSplit& split, Crop crop) {
    std::vector<double> v;
    for (int y : split.train_years)
        for (std::size_t c = 0; c < ds.graph.size(); ++c)
            if (auto t = ds.yield(c, y, crop)) v.push_back(*t);
    if (v.empty()) throw InputError("no " + to_string(crop) + " yields in the training years");
    TargetScaler s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));
    s.std = sd > 1e-12 ? sd : 1.0;
    return s;
}

class WindowUnavailable : public std::runtime_error {
public:
    WindowUnavailable(const std::string& county, int year)
        : std::runtime_error("no features for county " + county + " in year " + std::to_string(year)),
          county(county), year(year) {}
    std::string county;
    int year;
};

/// Records of years year-dt .. year, oldest first. Throws when any is absent.
inline std::vector<const YearFeatures*> assemble_window(const Dataset& ds, std::size_t county, int year, int dt) {
    if (dt < 0) throw std::invalid_argument("history length must be non-negative");
    std::vector<const YearFeatures*> out;
    for (int y = year - dt; y <= year; ++y) {
        const YearFeatures* f = ds.find(county, y);
        if (!f) throw WindowUnavailable(ds.graph.id(county), y);
        out.push_back(f);
    }
    return out;
}

inline bool window_available(const Dataset& ds, std::size_t county, int year, int dt) {
    for (int y = year - dt; y <= year; ++y)
        if (!ds.find(county, y)) return false;
    return true;
}

struct SkipReport {
    std::vector<std::pair<std::string, int>> samples;
    std::size_t count() const { return samples.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthOptions {
    std::size_t n_counties = 100;
    std::size_t n_years = 20;
    std::size_t grid_side = 10;
    int base_year = 2000;
    std::uint64_t seed = 0;
    double label_dropout = 0.05;
};

namespace detail {

inline std::vector<double> smooth_on_graph(const CountyGraph& g, std::vector<double> x, int sweeps) {
    for (int s = 0; s < sweeps; ++s) {
        std::vector<double> next(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            double acc = x[i];
            for (std::size_t j : g.neighbors(i)) acc += x[j];
            next[i] = acc / static_cast<double>(g.neighbors(i).size() + 1);
        }
        x = std::move(next);
    }
    return x;
}

inline void standardize_in_place(std::vector<double>& x) {
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / static_cast<double>(x.size()));
    for (double& v : x) v = sd > 0.0 ? (v - m) / sd : 0.0;
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

} // namespace detail

inline CountyGraph grid_graph(std::size_t side, std::size_t first_id = 10001) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < side * side; ++i) ids.push_back(std::to_string(first_id + i));
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
            const std::size_t i = r * side + c;
            if (c + 1 < side) edges.emplace_back(i, i + 1);
            if (r + 1 < side) edges.emplace_back(i, i + side);
        }
    }
    return CountyGraph(std::move(ids), edges);
}

/// The growing-season window carrying the yield-relevant weather anomaly.
inline constexpr std::size_t kSynthWindowBegin = 26;
inline constexpr std::size_t kSynthWindowEnd = 34;

/// Grid-graph counties with a spatially smooth fertility field observed through
/// noisy soil/extra variables, seasonal weather whose July window carries a
/// spatially smooth yearly anomaly, and yields linear in year, fertility and
/// the true anomaly.
inline Dataset generate_synthetic(const SynthOptions& opt) {
    if (opt.grid_side * opt.grid_side != opt.n_counties) {
        throw InputError("n_counties must equal grid_side^2 (got " + std::to_string(opt.n_counties) + " and side " +
                         std::to_string(opt.grid_side) + ")");
    }
    if (opt.n_years < 6) throw InputError("the synthetic generator needs at least 6 years");
    if (opt.n_counties == 0) throw InputError("n_counties must be positive");
    Rng rng(opt.seed);
    Dataset ds;
    ds.graph = grid_graph(opt.grid_side);
    const CountyGraph& g = ds.graph;
    const std::size_t n = opt.n_counties;

    std::vector<double> fert(n);
    for (auto& v : fert) v = rng.normal();
    fert = detail::smooth_on_graph(g, fert, 2);
    detail::standardize_in_place(fert);

    // Observation error shared by every soil/extra channel of a county.
    constexpr double kFertObsNoise = 0.6;
    constexpr double kAnomalyObsNoise = 0.6;
    std::vector<double> fert_obs(n);
    for (std::size_t c = 0; c < n; ++c) fert_obs[c] = fert[c] + kFertObsNoise * rng.normal();

    // Static soil and extras.
    std::vector<std::array<double, kSoilVars * kSoilDepths>> soil(n);
    std::vector<std::array<double, kStoredExtras>> extras(n);
    Rng srng = rng.fork(1);
    for (std::size_t c = 0; c < n; ++c) {
        const double o = fert_obs[c];
        for (std::size_t d = 0; d < kSoilDepths; ++d) {
            const double depth = static_cast<double>(d);
            const double clay = std::clamp(24.0 + 5.0 * o + 1.5 * depth + srng.normal(0.0, 1.0), 2.0, 60.0);
            const double silt = std::clamp(46.0 + 6.0 * o - depth + srng.normal(0.0, 1.0), 2.0, 90.0 - clay);
            const double sand = 100.0 - clay - silt;
            std::vector<WeightedTexture> pts;
            for (int k = 0; k < 5; ++k) {
                double cl = std::clamp(clay + srng.normal(0.0, 4.0), 0.0, 100.0);
                double si = std::clamp(silt + srng.normal(0.0, 4.0), 0.0, 100.0 - cl);
                pts.push_back({{100.0 - cl - si, si, cl}, 1.0});
            }
            const auto frac = *county_texture_fractions(pts);
            auto at = [&](std::size_t var) -> double& { return soil[c][var * kSoilDepths + d]; };
            at(0) = 0.16 + 0.02 * o - 0.005 * depth + srng.normal(0.0, 0.005);
            at(1) = 1.35 - 0.05 * o + 0.03 * depth + srng.normal(0.0, 0.01);
            at(2) = 0.4 + 0.1 * o + srng.normal(0.0, 0.05);
            at(3) = std::max(0.1, 3.0 + 0.8 * o - 0.4 * depth + srng.normal(0.0, 0.1));
            at(4) = silt;
            at(5) = clay;
            at(6) = sand;
            for (std::size_t t = 0; t < kTextureClasses; ++t) at(7 + t) = frac[t];
            at(19) = 6.5 + 0.2 * o + 0.05 * depth + srng.normal(0.0, 0.05);
        }
        extras[c] = {0.6 + 0.1 * o + srng.normal(0.0, 0.01), 150.0 + 20.0 * o + srng.normal(0.0, 2.0),
                     0.55 + 0.1 * o + srng.normal(0.0, 0.01), 0.58 + 0.11 * o + srng.normal(0.0, 0.01),
                     0.4 + 0.05 * o + srng.normal(0.0, 0.01), 0.5 + 0.09 * o + srng.normal(0.0, 0.01)};
    }

    // Seasonal shape per weekly variable: level + amplitude * seasonal cycle,
    // and the sign/size of the anomaly response.
    struct Seasonal {
        double level, amplitude, noise, response;
    };
    static const std::array<Seasonal, kWeeklyVars> seasonal = {{
        {20.0, 8.0, 6.0, -6.0},   {2.0, 10.0, 1.5, 1.2},   {14.0, 14.0, 1.5, 1.8},  {8.0, 13.0, 1.2, 1.5},
        {2.0, 12.0, 1.5, 1.2},    {14.0, 10.0, 2.0, 2.5},  {3.0, 4.0, 1.0, 0.8},    {20.0, 8.0, 6.0, -6.0},
        {300.0, 60.0, 20.0, -25.0}, {600.0, 80.0, 30.0, -40.0}, {500.0, 70.0, 25.0, -35.0}, {250.0, 40.0, 15.0, -18.0},
        {25.0, 6.0, 3.0, -3.0},   {80.0, 15.0, 6.0, -8.0}, {150.0, 20.0, 8.0, -10.0}, {180.0, 20.0, 8.0, -9.0},
        {0.008, 0.005, 0.0008, 0.0007}, {285.0, 13.0, 1.5, 1.5}, {285.0, 12.0, 1.5, 1.3}, {284.0, 10.0, 1.2, 1.0},
        {283.0, 8.0, 1.0, 0.7},   {282.0, 5.0, 0.8, 0.4},  {6.0, 2.0, 1.0, 0.3},
    }};

    constexpr double kBase = 120.0, kTrend = 1.5, kFert = 12.0, kAnomaly = 10.0, kNoise = 5.0;
    const double crop_scale[] = {1.0, 0.3};

    ds.years.clear();
    Rng wrng = rng.fork(2);
    Rng yrng = rng.fork(3);
    for (std::size_t t = 0; t < opt.n_years; ++t) {
        const int year = opt.base_year + static_cast<int>(t);
        ds.years.push_back(year);
        const double national = 0.5 * wrng.normal();
        std::vector<double> local(n);
        for (auto& v : local) v = wrng.normal();
        local = detail::smooth_on_graph(g, local, 2);
        detail::standardize_in_place(local);
        for (std::size_t c = 0; c < n; ++c) {
            const double anomaly = national + local[c];
            const double observed = anomaly + kAnomalyObsNoise * wrng.normal();
            // Off-window yearly weather: varies but carries no yield signal.
            const double distractor = wrng.normal();
            YearFeatures f;
            f.county = g.id(c);
            f.year = year;
            for (std::size_t v = 0; v < kWeeklyVars; ++v) {
                const Seasonal& s = seasonal[v];
                for (std::size_t w = 0; w < kWeeks; ++w) {
                    const double phase = 2.0 * std::numbers::pi * (static_cast<double>(w) - 13.0) / 52.0;
                    const bool window = w >= kSynthWindowBegin && w < kSynthWindowEnd;
                    double x = s.level + s.amplitude * std::sin(phase);
                    x += s.response * (window ? observed : 0.7 * distractor);
                    x += 0.3 * s.noise * wrng.normal();
                    f.values[v * kWeeks + w] = detail::round4(x);
                }
            }
            for (std::size_t i = 0; i < kSoilVars * kSoilDepths; ++i)
                f.values[kSoilOffset + i] = detail::round4(soil[c][i]);
            for (std::size_t e = 0; e < kStoredExtras; ++e) f.values[kExtrasOffset + e] = detail::round4(extras[c][e]);
            f.missing[kPrevYieldIndex] = true;

            const double eps = yrng.normal();
            const bool drop = yrng.uniform() < opt.label_dropout;
            for (int k = 0; k < 2; ++k) {
                const double sc = crop_scale[k];
                const double y = sc * (kBase + kTrend * static_cast<double>(t) + kFert * fert[c] +
                                       kAnomaly * anomaly + kNoise * eps);
                if (!drop) ds.yields.set(g.id(c), year, static_cast<Crop>(k), detail::round4(std::max(y, 1.0)));
            }
            ds.features.emplace(std::make_pair(c, year), std::move(f));
        }
    }
    return ds;
}

} // namespace yieldgraph
