#pragma once

// Raster-to-county aggregation, daily-to-weekly reduction and USDA soil
// texture classification.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace yieldgraph {

class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Raster grids (ESRI ASCII layout)

struct RasterGrid {
    double x0 = 0.0, y0 = 0.0;  // lower-left corner
    double cell_size = 1.0;
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;  // row-major, first row is the northernmost
    double nodata = -9999.0;

    bool is_nodata(std::size_t cell) const { return values.at(cell) == nodata || !std::isfinite(values[cell]); }
    std::size_t cell_count() const { return rows * cols; }
};

inline RasterGrid parse_ascii_grid(std::istream& in, const std::string& source = "raster") {
    RasterGrid g;
    std::map<std::string, double> header;
    std::string key;
    static const char* required[] = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize"};
    std::streampos data_start = in.tellg();
    while (in >> key) {
        std::string lower = key;
        std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
        if (lower != "ncols" && lower != "nrows" && lower != "xllcorner" && lower != "yllcorner" &&
            lower != "cellsize" && lower != "nodata_value") {
            in.clear();
            in.seekg(data_start);
            break;
        }
        double v;
        if (!(in >> v)) throw InputError(source + ": bad value for header key " + key);
        header[lower] = v;
        data_start = in.tellg();
    }
    for (const char* r : required) {
        if (!header.count(r)) throw InputError(source + ": missing header key " + std::string(r));
    }
    g.cols = static_cast<std::size_t>(header["ncols"]);
    g.rows = static_cast<std::size_t>(header["nrows"]);
    g.x0 = header["xllcorner"];
    g.y0 = header["yllcorner"];
    g.cell_size = header["cellsize"];
    if (header.count("nodata_value")) g.nodata = header["nodata_value"];
    if (!(g.cell_size > 0.0)) throw InputError(source + ": cellsize must be positive");
    if (g.rows == 0 || g.cols == 0) throw InputError(source + ": empty grid");
    g.values.reserve(g.rows * g.cols);
    double v;
    while (in >> v) g.values.push_back(v);
    if (!in.eof()) throw InputError(source + ": non-numeric value in grid body");
    if (g.values.size() != g.rows * g.cols) {
        throw InputError(source + ": expected " + std::to_string(g.rows * g.cols) + " values, found " +
                         std::to_string(g.values.size()));
    }
    return g;
}

inline RasterGrid load_ascii_grid(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open raster " + path);
    return parse_ascii_grid(in, path);
}

// ---------------------------------------------------------------------------
// County weights

struct CellWeight {
    std::size_t cell;
    double weight;
};

/// Per county: cells with weight = overlap_fraction x agland_fraction (> 0 only).
struct CountyWeightMap {
    std::map<std::string, std::vector<CellWeight>> counties;

    const std::vector<CellWeight>& cells(const std::string& county) const {
        static const std::vector<CellWeight> none;
        auto it = counties.find(county);
        return it == counties.end() ? none : it->second;
    }
};

struct CountyCellEntry {
    std::string county;
    std::size_t cell;
    double overlap;
    double agland;
};

/// Reads `county,cell_index,overlap_fraction,agland_fraction` rows (header required).
inline std::vector<CountyCellEntry> parse_county_cells(std::istream& in, const std::string& source = "weights") {
    std::vector<CountyCellEntry> out;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
        if (line.back() == ',') f.emplace_back();
        if (!header) {
            if (f.size() != 4 || f[0] != "county" || f[1] != "cell_index" || f[2] != "overlap_fraction" ||
                f[3] != "agland_fraction") {
                throw InputError(source + ":" + std::to_string(lineno) +
                                 ": header must be county,cell_index,overlap_fraction,agland_fraction");
            }
            header = true;
            continue;
        }
        if (f.size() != 4) {
            throw InputError(source + ":" + std::to_string(lineno) + ": expected 4 fields, got " +
                             std::to_string(f.size()));
        }
        try {
            std::size_t used = 0;
            CountyCellEntry e{f[0], static_cast<std::size_t>(std::stoull(f[1], &used)), std::stod(f[2]),
                              f[3].empty() ? 1.0 : std::stod(f[3])};
            out.push_back(e);
        } catch (const std::logic_error&) {
            throw InputError(source + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    if (!header) throw InputError(source + ": missing header row");
    return out;
}

inline std::vector<CountyCellEntry> load_county_cells(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open weights file " + path);
    return parse_county_cells(in, path);
}

/// weight = overlap x agland, where agland comes from the landcover raster when
/// given (nodata counts as 0) and from the file column otherwise. Zero-weight
/// cells are dropped.
inline CountyWeightMap build_weight_map(const std::vector<CountyCellEntry>& entries,
                                        const RasterGrid* landcover = nullptr) {
    CountyWeightMap map;
    std::map<std::size_t, double> overlap_per_cell;
    for (const auto& e : entries) {
        if (!(e.overlap >= 0.0 && e.overlap <= 1.0)) {
            throw InputError("overlap fraction " + std::to_string(e.overlap) + " outside [0,1] for county " +
                             e.county + ", cell " + std::to_string(e.cell));
        }
        double ag = e.agland;
        if (landcover) {
            if (e.cell >= landcover->cell_count()) {
                throw InputError("cell index " + std::to_string(e.cell) + " outside landcover grid");
            }
            ag = landcover->is_nodata(e.cell) ? 0.0 : landcover->values[e.cell];
        }
        if (!(ag >= 0.0 && ag <= 1.0)) {
            throw InputError("agland fraction " + std::to_string(ag) + " outside [0,1] for county " + e.county);
        }
        overlap_per_cell[e.cell] += e.overlap;
        if (overlap_per_cell[e.cell] > 1.0 + 1e-9) {
            throw InputError("overlap fractions for cell " + std::to_string(e.cell) + " sum above 1");
        }
        auto& cells = map.counties[e.county];
        const double w = e.overlap * ag;
        if (w > 0.0) cells.push_back({e.cell, w});
    }
    return map;
}

/// Weighted mean over cells with data; nullopt when no weight remains.
inline std::optional<double> aggregate_to_county(const RasterGrid& raster, const std::vector<CellWeight>& cells) {
    double num = 0.0, den = 0.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : cells) {
        if (c.cell >= raster.cell_count()) {
            throw InputError("weight map references cell " + std::to_string(c.cell) + " outside the raster");
        }
        if (raster.is_nodata(c.cell) || !(c.weight > 0.0)) continue;
        const double v = raster.values[c.cell];
        num += c.weight * v;
        den += c.weight;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(den > 0.0)) return std::nullopt;
    // rounding can leave num / den an ulp outside the cell range
    return std::clamp(num / den, lo, hi);
}

inline std::optional<double> aggregate_to_county(const RasterGrid& raster, const CountyWeightMap& weights,
                                                 const std::string& county) {
    return aggregate_to_county(raster, weights.cells(county));
}

// ---------------------------------------------------------------------------
// Temporal reduction

enum class VariableKind { flux, state, max };

inline VariableKind parse_variable_kind(const std::string& s) {
    if (s == "flux") return VariableKind::flux;
    if (s == "state") return VariableKind::state;
    if (s == "max") return VariableKind::max;
    throw InputError("unknown variable kind '" + s + "' (expected flux, state or max)");
}

/// Week k covers days [7k, 7k+7); days 364 and later fold into week 51.
/// flux sums, state averages, max takes the maximum.
inline std::array<double, 52> daily_to_weekly(std::span<const double> daily, VariableKind kind) {
    if (daily.size() != 365 && daily.size() != 366) {
        throw std::invalid_argument("daily_to_weekly expects 365 or 366 days, got " + std::to_string(daily.size()));
    }
    std::array<double, 52> out{};
    for (std::size_t w = 0; w < 52; ++w) {
        const std::size_t begin = 7 * w;
        const std::size_t end = w == 51 ? daily.size() : begin + 7;
        double acc = kind == VariableKind::max ? daily[begin] : 0.0;
        for (std::size_t d = begin; d < end; ++d) {
            if (kind == VariableKind::max) acc = std::max(acc, daily[d]);
            else acc += daily[d];
        }
        out[w] = kind == VariableKind::state ? acc / static_cast<double>(end - begin) : acc;
    }
    return out;
}

/// Hourly to daily, same reduction switch (24 values per day).
inline std::vector<double> hourly_to_daily(std::span<const double> hourly, VariableKind kind) {
    if (hourly.empty() || hourly.size() % 24 != 0) {
        throw std::invalid_argument("hourly_to_daily expects a multiple of 24 values");
    }
    std::vector<double> out(hourly.size() / 24);
    for (std::size_t d = 0; d < out.size(); ++d) {
        double acc = kind == VariableKind::max ? hourly[24 * d] : 0.0;
        for (std::size_t h = 0; h < 24; ++h) {
            const double v = hourly[24 * d + h];
            acc = kind == VariableKind::max ? std::max(acc, v) : acc + v;
        }
        out[d] = kind == VariableKind::state ? acc / 24.0 : acc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Soil texture (USDA / NRCS triangle)

enum class TextureClass {
    sand,
    loamy_sand,
    sandy_loam,
    loam,
    silt_loam,
    silt,
    sandy_clay_loam,
    clay_loam,
    silty_clay_loam,
    sandy_clay,
    silty_clay,
    clay,
};

inline constexpr std::size_t kTextureClasses = 12;

inline std::string_view texture_name(TextureClass c) {
    static constexpr std::string_view names[] = {
        "Sand",      "Loamy Sand",      "Sandy Loam", "Loam",       "Silt Loam",  "Silt",
        "Sandy Clay Loam", "Clay Loam", "Silty Clay Loam", "Sandy Clay", "Silty Clay", "Clay"};
    return names[static_cast<int>(c)];
}

struct TexturePoint {
    double sand, silt, clay;
};

/// Validates the point and rescales it onto the 100% simplex.
inline TexturePoint normalize_texture(TexturePoint p) {
    for (double v : {p.sand, p.silt, p.clay}) {
        if (!(v >= 0.0 && v <= 100.0)) throw std::invalid_argument("texture percentage outside [0,100]");
    }
    const double total = p.sand + p.silt + p.clay;
    if (std::fabs(total - 100.0) > 0.5) {
        throw std::invalid_argument("sand + silt + clay = " + std::to_string(total) + ", expected 100 +/- 0.5");
    }
    if (total == 100.0) return p;
    return {p.sand * 100.0 / total, p.silt * 100.0 / total, p.clay * 100.0 / total};
}

/// Membership of each class's defining inequalities (no renormalization).
inline std::array<bool, kTextureClasses> texture_memberships(const TexturePoint& p) {
    const double sand = p.sand, silt = p.silt, clay = p.clay;
    std::array<bool, kTextureClasses> m{};
    auto set = [&](TextureClass c, bool v) { m[static_cast<int>(c)] = v; };
    set(TextureClass::sand, silt + 1.5 * clay < 15.0);
    set(TextureClass::loamy_sand, silt + 1.5 * clay >= 15.0 && silt + 2.0 * clay < 30.0);
    set(TextureClass::sandy_loam, (clay >= 7.0 && clay < 20.0 && sand > 52.0 && silt + 2.0 * clay >= 30.0) ||
                                      (clay < 7.0 && silt < 50.0 && silt + 2.0 * clay >= 30.0));
    set(TextureClass::loam, clay >= 7.0 && clay < 27.0 && silt >= 28.0 && silt < 50.0 && sand <= 52.0);
    set(TextureClass::silt_loam, (silt >= 50.0 && clay >= 12.0 && clay < 27.0) ||
                                     (silt >= 50.0 && silt < 80.0 && clay < 12.0));
    set(TextureClass::silt, silt >= 80.0 && clay < 12.0);
    set(TextureClass::sandy_clay_loam, clay >= 20.0 && clay < 35.0 && silt < 28.0 && sand > 45.0);
    set(TextureClass::clay_loam, clay >= 27.0 && clay < 40.0 && sand > 20.0 && sand <= 45.0);
    set(TextureClass::silty_clay_loam, clay >= 27.0 && clay < 40.0 && sand <= 20.0);
    set(TextureClass::sandy_clay, clay >= 35.0 && sand > 45.0);
    set(TextureClass::silty_clay, clay >= 40.0 && silt >= 40.0);
    set(TextureClass::clay, clay >= 40.0 && sand <= 45.0 && silt < 40.0);
    return m;
}

inline TextureClass classify_texture(TexturePoint p) {
    p = normalize_texture(p);
    const auto m = texture_memberships(p);
    for (std::size_t c = 0; c < kTextureClasses; ++c)
        if (m[c]) return static_cast<TextureClass>(c);
    throw std::logic_error("texture point outside every class");  // unreachable on the simplex
}

struct WeightedTexture {
    TexturePoint point;
    double weight;
};

/// Weight-normalized class histogram; nullopt for an empty (or zero-weight) set.
inline std::optional<std::array<double, kTextureClasses>> county_texture_fractions(
    const std::vector<WeightedTexture>& points) {
    std::array<double, kTextureClasses> frac{};
    double total = 0.0;
    for (const auto& p : points) {
        if (!(p.weight >= 0.0)) throw std::invalid_argument("negative texture weight");
        frac[static_cast<int>(classify_texture(p.point))] += p.weight;
        total += p.weight;
    }
    if (!(total > 0.0)) return std::nullopt;
    for (auto& f : frac) f /= total;
    return frac;
}

} // namespace yieldgraph
