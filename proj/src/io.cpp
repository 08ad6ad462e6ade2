#include "eprsteer/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <type_traits>

#include "eprsteer/errors.hpp"
#include "eprsteer/rng.hpp"

namespace eprsteer {

const char* error_category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::Config:   return "Config";
        case ErrorCategory::Io:       return "Io";
        case ErrorCategory::Format:   return "Format";
        case ErrorCategory::Input:    return "Input";
        case ErrorCategory::Domain:   return "Domain";
        case ErrorCategory::Accuracy: return "Accuracy";
        case ErrorCategory::Fit:      return "Fit";
    }
    return "Unknown";
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    Rng r(seed, tag);
    return r.next_u64();
}

// ---------------------------------------------------------------- helpers

namespace {

// shortest decimal form that parses back to exactly the same double
std::string fmt_f64(double v) {
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) return "nan";
    return std::string(buf, end);
}

std::string fmt_hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

double parse_f64(const std::string& v, const std::string& where) {
    const char* p = v.c_str();
    char* end = nullptr;
    double x = std::strtod(p, &end);
    if (end == p || *end != '\0')
        fail(ErrorCategory::Format, where + ": not a number: '" + v + "'");
    return x;
}

std::int64_t parse_i64(const std::string& v, const std::string& where) {
    const char* p = v.c_str();
    char* end = nullptr;
    long long x = std::strtoll(p, &end, 10);
    if (end == p || *end != '\0')
        fail(ErrorCategory::Format, where + ": not an integer: '" + v + "'");
    return x;
}

std::uint64_t parse_u64(const std::string& v, const std::string& where) {
    const char* p = v.c_str();
    char* end = nullptr;
    if (!v.empty() && v[0] == '-')
        fail(ErrorCategory::Format, where + ": must be non-negative: '" + v + "'");
    unsigned long long x = std::strtoull(p, &end, 10);
    if (end == p || *end != '\0')
        fail(ErrorCategory::Format, where + ": not an integer: '" + v + "'");
    return x;
}

std::uint64_t parse_hex64(const std::string& v, const std::string& where) {
    const char* p = v.c_str();
    char* end = nullptr;
    unsigned long long x = std::strtoull(p, &end, 16);
    if (end == p || *end != '\0')
        fail(ErrorCategory::Format, where + ": not a hex value: '" + v + "'");
    return x;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);  // binary: no CRLF translation anywhere
    if (!f) fail(ErrorCategory::Io, "cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCategory::Io, "cannot open: " + path);
    return f;
}

void finish_write(std::ofstream& f, const std::string& path) {
    f.flush();
    if (!f) fail(ErrorCategory::Io, "write failed: " + path);
}

// Header block of data files: leading `# key = value` lines.  The first
// line must be `# <tag>`; reading stops at the first non-comment line,
// which is handed back through `pending`.
struct HeaderBlock {
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
        return nullptr;
    }
    std::string need(const std::string& key, const std::string& path) const {
        const std::string* v = find(key);
        if (!v) fail(ErrorCategory::Format, path + ": missing header field '" + key + "'");
        return *v;
    }
};

HeaderBlock read_header(std::istream& in, const std::string& tag, const std::string& path,
                        std::string* pending) {
    std::string line;
    if (!std::getline(in, line) || trim(line) != "# " + tag)
        fail(ErrorCategory::Format, path + ": expected '# " + tag + "' on line 1");
    HeaderBlock h;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty()) continue;
        if (t[0] != '#') {
            *pending = t;
            return h;
        }
        std::string body = trim(t.substr(1));
        std::size_t eq = body.find('=');
        if (eq == std::string::npos)
            fail(ErrorCategory::Format, path + ": malformed header line '" + t + "'");
        h.entries.emplace_back(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    }
    pending->clear();
    return h;
}

GridSpec parse_grid(const std::string& v, const std::string& where) {
    std::istringstream ss(v);
    GridSpec g;
    long long count = 0;
    if (!(ss >> g.origin >> g.delta >> count) || count <= 0)
        fail(ErrorCategory::Format, where + ": bad grid spec '" + v + "'");
    std::string rest;
    if (ss >> rest)
        fail(ErrorCategory::Format, where + ": trailing data in grid spec '" + v + "'");
    g.count = static_cast<std::size_t>(count);
    return g;
}

std::string grid_str(const GridSpec& g) {
    return fmt_f64(g.origin) + " " + fmt_f64(g.delta) + " " + std::to_string(g.count);
}

const char* units_name(Basis b) { return b == Basis::Position ? "um" : "per_mm"; }

}  // namespace

// ---------------------------------------------------------------- RunConfig

CameraModel RunConfig::camera() const {
    CameraModel m;
    m.width = frame_width;
    m.height = frame_height;
    m.offset_adu = offset_adu;
    m.offset_variation_adu = offset_variation_adu;
    m.noise_sd_adu = noise_sd_adu;
    m.spot_fwhm_px = spot_fwhm_px;
    m.mean_peak_adu = mean_peak_adu;
    m.adu_max = static_cast<std::uint16_t>(adu_max);
    return m;
}

GridSpec RunConfig::position_axis() const {
    return GridSpec::centered(cell().dx_um, grid_cells);
}

GridSpec RunConfig::momentum_axis() const {
    return GridSpec::centered(cell().dk_per_mm, grid_cells);
}

ArmCalibration RunConfig::arm_calibration_a() const {
    double s = frames_basis == Basis::Position ? cell().dx_um : cell().dk_per_mm;
    return {region_a_cx, region_a_cy, s};
}

ArmCalibration RunConfig::arm_calibration_b() const {
    double s = frames_basis == Basis::Position ? cell().dx_um : cell().dk_per_mm;
    return {region_b_cx, region_b_cy, s};
}

void RunConfig::validate() const {
    state().validate();
    // zero is allowed: a dry run still writes valid (empty) event files
    if (n_pairs < 0) fail(ErrorCategory::Config, "n_pairs must be non-negative");
    if (!(herald_window > 0.0)) fail(ErrorCategory::Config, "herald_window must be positive");
    if (grid_cells < 2) fail(ErrorCategory::Config, "grid_cells must be at least 2");
    if (!(delta_b_um > 0.0)) fail(ErrorCategory::Config, "delta_b_um must be positive");
    if (!(magnification > 0.0)) fail(ErrorCategory::Config, "magnification must be positive");
    if (!(lambda_nm > 0.0)) fail(ErrorCategory::Config, "lambda_nm must be positive");
    if (!(f_eff_mm > 0.0)) fail(ErrorCategory::Config, "f_eff_mm must be positive");
    if (calib_frac_m < 0.0 || calib_frac_f < 0.0)
        fail(ErrorCategory::Config, "calibration uncertainties must be non-negative");
    if (estimators.empty()) fail(ErrorCategory::Config, "estimators must not be empty");
    if (bootstrap_resamples < 2)
        fail(ErrorCategory::Config, "bootstrap_resamples must be at least 2");
    camera().validate();
    if (frame_count == 0) fail(ErrorCategory::Config, "frame_count must be positive");
    if (pair_rate < 0.0 || single_rate_a < 0.0 || single_rate_b < 0.0)
        fail(ErrorCategory::Config, "frame rates must be non-negative");
    if (adu_max > 65535) fail(ErrorCategory::Config, "adu_max exceeds 16-bit range");
    if (fit_radius < 1) fail(ErrorCategory::Config, "fit_radius must be at least 1");
    if (min_pixels_above < 1) fail(ErrorCategory::Config, "min_pixels_above must be at least 1");
    if (!(threshold_multiple > 0.0))
        fail(ErrorCategory::Config, "threshold_multiple must be positive");
    if (!(region_a_radius > 0.0) || !(region_b_radius > 0.0))
        fail(ErrorCategory::Config, "region radii must be positive");
    double dx = region_a_cx - region_b_cx, dy = region_a_cy - region_b_cy;
    if (std::sqrt(dx * dx + dy * dy) < region_a_radius + region_b_radius)
        fail(ErrorCategory::Config, "detector regions overlap");
}

namespace {

std::string estimators_str(const std::vector<Estimator>& es) {
    std::string s;
    for (std::size_t i = 0; i < es.size(); ++i) {
        if (i) s += ',';
        s += estimator_name(es[i]);
    }
    return s;
}

std::vector<Estimator> parse_estimators(const std::string& v, const std::string& where) {
    std::vector<Estimator> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        std::string t = trim(item);
        if (t.empty()) fail(ErrorCategory::Config, where + ": empty estimator name");
        try {
            out.push_back(estimator_from_name(t));
        } catch (const Error& e) {
            fail(ErrorCategory::Config, where + ": " + e.what());
        }
    }
    if (out.empty()) fail(ErrorCategory::Config, where + ": no estimators listed");
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = i + 1; j < out.size(); ++j)
            if (out[i] == out[j])
                fail(ErrorCategory::Config, where + ": duplicate estimator '" +
                                                std::string(estimator_name(out[i])) + "'");
    return out;
}

// The one table both the writer and the parser walk, so the canonical dump
// and the accepted keys cannot drift apart.
struct ConfigKey {
    const char* name;
    std::string (*get)(const RunConfig&);
    void (*set)(RunConfig&, const std::string& value, const std::string& where);
};

template <typename T>
std::string num_str(T v) {
    if constexpr (std::is_floating_point_v<T>)
        return fmt_f64(v);
    else
        return std::to_string(v);
}

const ConfigKey kConfigKeys[] = {
    {"sigma_um", [](const RunConfig& c) { return num_str(c.sigma_um); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.sigma_um = parse_f64(v, w); }},
    {"kappa_per_mm", [](const RunConfig& c) { return num_str(c.kappa_per_mm); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.kappa_per_mm = parse_f64(v, w); }},
    {"q", [](const RunConfig& c) { return num_str(c.q); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.q = parse_f64(v, w); }},
    {"seed", [](const RunConfig& c) { return num_str(c.seed); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.seed = parse_u64(v, w); }},
    {"n_pairs", [](const RunConfig& c) { return num_str(c.n_pairs); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.n_pairs = parse_i64(v, w); }},
    {"herald_window", [](const RunConfig& c) { return num_str(c.herald_window); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.herald_window = parse_f64(v, w); }},
    {"grid_cells", [](const RunConfig& c) { return num_str(c.grid_cells); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.grid_cells = static_cast<std::size_t>(parse_u64(v, w)); }},
    {"delta_b_um", [](const RunConfig& c) { return num_str(c.delta_b_um); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.delta_b_um = parse_f64(v, w); }},
    {"magnification", [](const RunConfig& c) { return num_str(c.magnification); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.magnification = parse_f64(v, w); }},
    {"lambda_nm", [](const RunConfig& c) { return num_str(c.lambda_nm); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.lambda_nm = parse_f64(v, w); }},
    {"f_eff_mm", [](const RunConfig& c) { return num_str(c.f_eff_mm); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.f_eff_mm = parse_f64(v, w); }},
    {"calib_frac_m", [](const RunConfig& c) { return num_str(c.calib_frac_m); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.calib_frac_m = parse_f64(v, w); }},
    {"calib_frac_f", [](const RunConfig& c) { return num_str(c.calib_frac_f); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.calib_frac_f = parse_f64(v, w); }},
    {"estimators", [](const RunConfig& c) { return estimators_str(c.estimators); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.estimators = parse_estimators(v, w); }},
    {"bootstrap_resamples", [](const RunConfig& c) { return num_str(c.bootstrap_resamples); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.bootstrap_resamples = static_cast<std::size_t>(parse_u64(v, w)); }},
    {"frame_width", [](const RunConfig& c) { return num_str(c.frame_width); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.frame_width = static_cast<std::uint32_t>(parse_u64(v, w)); }},
    {"frame_height", [](const RunConfig& c) { return num_str(c.frame_height); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.frame_height = static_cast<std::uint32_t>(parse_u64(v, w)); }},
    {"frame_count", [](const RunConfig& c) { return num_str(c.frame_count); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.frame_count = static_cast<std::size_t>(parse_u64(v, w)); }},
    {"frames_basis", [](const RunConfig& c) { return std::string(basis_name(c.frames_basis)); },
     [](RunConfig& c, const std::string& v, const std::string& w) {
         try {
             c.frames_basis = basis_from_name(v);
         } catch (const Error& e) {
             fail(ErrorCategory::Config, w + ": " + e.what());
         }
     }},
    {"pair_rate", [](const RunConfig& c) { return num_str(c.pair_rate); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.pair_rate = parse_f64(v, w); }},
    {"single_rate_a", [](const RunConfig& c) { return num_str(c.single_rate_a); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.single_rate_a = parse_f64(v, w); }},
    {"single_rate_b", [](const RunConfig& c) { return num_str(c.single_rate_b); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.single_rate_b = parse_f64(v, w); }},
    {"offset_adu", [](const RunConfig& c) { return num_str(c.offset_adu); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.offset_adu = parse_f64(v, w); }},
    {"offset_variation_adu", [](const RunConfig& c) { return num_str(c.offset_variation_adu); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.offset_variation_adu = parse_f64(v, w); }},
    {"noise_sd_adu", [](const RunConfig& c) { return num_str(c.noise_sd_adu); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.noise_sd_adu = parse_f64(v, w); }},
    {"spot_fwhm_px", [](const RunConfig& c) { return num_str(c.spot_fwhm_px); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.spot_fwhm_px = parse_f64(v, w); }},
    {"mean_peak_adu", [](const RunConfig& c) { return num_str(c.mean_peak_adu); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.mean_peak_adu = parse_f64(v, w); }},
    {"adu_max", [](const RunConfig& c) { return num_str(c.adu_max); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.adu_max = static_cast<std::uint32_t>(parse_u64(v, w)); }},
    {"threshold_multiple", [](const RunConfig& c) { return num_str(c.threshold_multiple); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.threshold_multiple = parse_f64(v, w); }},
    {"fit_radius", [](const RunConfig& c) { return num_str(c.fit_radius); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.fit_radius = static_cast<int>(parse_i64(v, w)); }},
    {"min_pixels_above", [](const RunConfig& c) { return num_str(c.min_pixels_above); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.min_pixels_above = static_cast<int>(parse_i64(v, w)); }},
    {"region_a_cx", [](const RunConfig& c) { return num_str(c.region_a_cx); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_a_cx = parse_f64(v, w); }},
    {"region_a_cy", [](const RunConfig& c) { return num_str(c.region_a_cy); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_a_cy = parse_f64(v, w); }},
    {"region_a_radius", [](const RunConfig& c) { return num_str(c.region_a_radius); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_a_radius = parse_f64(v, w); }},
    {"region_b_cx", [](const RunConfig& c) { return num_str(c.region_b_cx); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_b_cx = parse_f64(v, w); }},
    {"region_b_cy", [](const RunConfig& c) { return num_str(c.region_b_cy); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_b_cy = parse_f64(v, w); }},
    {"region_b_radius", [](const RunConfig& c) { return num_str(c.region_b_radius); },
     [](RunConfig& c, const std::string& v, const std::string& w) { c.region_b_radius = parse_f64(v, w); }},
};

}  // namespace

std::string canonical_config(const RunConfig& cfg) {
    std::string out;
    for (const ConfigKey& k : kConfigKeys) {
        out += k.name;
        out += " = ";
        out += k.get(cfg);
        out += '\n';
    }
    return out;
}

std::uint64_t config_digest(const RunConfig& cfg) {
    return fnv1a64(canonical_config(cfg));
}

void save_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream f = open_out(path);
    f << canonical_config(cfg);
    finish_write(f, path);
}

RunConfig load_config(const std::string& path) {
    std::ifstream f = open_in(path);
    RunConfig cfg;
    std::vector<bool> seen(std::size(kConfigKeys), false);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string t = trim(line);
        std::size_t hash = t.find('#');
        if (hash != std::string::npos) t = trim(t.substr(0, hash));
        if (t.empty()) continue;
        std::string where = path + ":" + std::to_string(lineno);
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail(ErrorCategory::Config, where + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty() || value.empty())
            fail(ErrorCategory::Config, where + ": expected 'key = value'");
        bool matched = false;
        for (std::size_t i = 0; i < std::size(kConfigKeys); ++i) {
            if (key == kConfigKeys[i].name) {
                if (seen[i])
                    fail(ErrorCategory::Config, where + ": duplicate key '" + key + "'");
                seen[i] = true;
                kConfigKeys[i].set(cfg, value, where);
                matched = true;
                break;
            }
        }
        if (!matched) fail(ErrorCategory::Config, where + ": unknown key '" + key + "'");
    }
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorCategory::Config, path + ": " + e.what());
    }
    return cfg;
}

// ---------------------------------------------------------------- events

void write_events(const std::string& path, const std::vector<CoincidenceEvent>& events,
                  Basis basis, std::uint64_t digest, std::uint64_t seed) {
    std::ofstream f = open_out(path);
    f << "# eprsteer events v1\n";
    f << "# digest = " << fmt_hex64(digest) << '\n';
    f << "# seed = " << seed << '\n';
    f << "# basis = " << basis_name(basis) << '\n';
    f << "# units = " << units_name(basis) << '\n';
    f << "# n = " << events.size() << '\n';
    std::string row;
    for (const CoincidenceEvent& e : events) {
        row.clear();
        row += fmt_f64(e.ax);
        row += '\t';
        row += fmt_f64(e.ay);
        row += '\t';
        row += fmt_f64(e.bx);
        row += '\t';
        row += fmt_f64(e.by);
        row += '\n';
        f << row;
    }
    finish_write(f, path);
}

EventsFile read_events(const std::string& path) {
    std::ifstream f = open_in(path);
    std::string pending;
    HeaderBlock h = read_header(f, "eprsteer events v1", path, &pending);
    EventsFile out;
    try {
        out.basis = basis_from_name(h.need("basis", path));
    } catch (const Error& e) {
        fail(ErrorCategory::Format, path + ": " + e.what());
    }
    if (h.need("units", path) != units_name(out.basis))
        fail(ErrorCategory::Format, path + ": units do not match basis");
    out.digest = parse_hex64(h.need("digest", path), path + " digest");
    out.seed = parse_u64(h.need("seed", path), path + " seed");
    std::uint64_t n = parse_u64(h.need("n", path), path + " n");
    out.events.reserve(n);

    auto parse_row = [&](const std::string& row) {
        const char* p = row.c_str();
        char* end = nullptr;
        CoincidenceEvent e{};
        double* fields[4] = {&e.ax, &e.ay, &e.bx, &e.by};
        for (double* fp : fields) {
            *fp = std::strtod(p, &end);
            if (end == p)
                fail(ErrorCategory::Format, path + ": malformed event row '" + row + "'");
            p = end;
        }
        while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
        if (*p != '\0')
            fail(ErrorCategory::Format, path + ": trailing data in event row '" + row + "'");
        out.events.push_back(e);
    };

    if (!pending.empty()) parse_row(pending);
    std::string line;
    while (std::getline(f, line)) {
        std::string t = trim(line);
        if (t.empty()) continue;
        parse_row(t);
    }
    if (out.events.size() != n)
        fail(ErrorCategory::Format, path + ": header says n = " + std::to_string(n) +
                                        " but file has " + std::to_string(out.events.size()) +
                                        " rows");
    return out;
}

// ---------------------------------------------------------------- histograms

void write_histogram(const std::string& path, const JointHistogram& hist,
                     std::uint64_t digest, std::uint64_t seed) {
    std::ofstream f = open_out(path);
    f << "# eprsteer hist v1\n";
    f << "# digest = " << fmt_hex64(digest) << '\n';
    f << "# seed = " << seed << '\n';
    f << "# basis = " << basis_name(hist.basis) << '\n';
    f << "# axis_a = " << grid_str(hist.axis_a) << '\n';
    f << "# axis_b = " << grid_str(hist.axis_b) << '\n';
    f << "# n_total = " << hist.n_total << '\n';
    f << "# n_out_of_range = " << hist.n_out_of_range << '\n';
    for (std::size_t ia = 0; ia < hist.axis_a.count; ++ia)
        for (std::size_t ib = 0; ib < hist.axis_b.count; ++ib) {
            std::int64_t c = hist.at(ia, ib);
            if (c != 0) f << ia << '\t' << ib << '\t' << c << '\n';
        }
    finish_write(f, path);
}

HistogramFile read_histogram(const std::string& path) {
    std::ifstream f = open_in(path);
    std::string pending;
    HeaderBlock h = read_header(f, "eprsteer hist v1", path, &pending);
    HistogramFile out;
    try {
        out.hist.basis = basis_from_name(h.need("basis", path));
    } catch (const Error& e) {
        fail(ErrorCategory::Format, path + ": " + e.what());
    }
    out.digest = parse_hex64(h.need("digest", path), path + " digest");
    out.seed = parse_u64(h.need("seed", path), path + " seed");
    out.hist.axis_a = parse_grid(h.need("axis_a", path), path + " axis_a");
    out.hist.axis_b = parse_grid(h.need("axis_b", path), path + " axis_b");
    out.hist.n_total = parse_i64(h.need("n_total", path), path + " n_total");
    out.hist.n_out_of_range = parse_i64(h.need("n_out_of_range", path), path + " n_out_of_range");
    out.hist.counts.assign(out.hist.axis_a.count * out.hist.axis_b.count, 0);

    auto parse_row = [&](const std::string& row) {
        std::istringstream ss(row);
        long long ia = -1, ib = -1, c = 0;
        std::string rest;
        if (!(ss >> ia >> ib >> c) || (ss >> rest))
            fail(ErrorCategory::Format, path + ": malformed histogram row '" + row + "'");
        if (ia < 0 || std::size_t(ia) >= out.hist.axis_a.count || ib < 0 ||
            std::size_t(ib) >= out.hist.axis_b.count)
            fail(ErrorCategory::Format, path + ": cell index out of range in '" + row + "'");
        if (c <= 0)
            fail(ErrorCategory::Format, path + ": non-positive count in '" + row + "'");
        std::int64_t& slot = out.hist.counts[std::size_t(ia) * out.hist.axis_b.count +
                                             std::size_t(ib)];
        if (slot != 0)
            fail(ErrorCategory::Format, path + ": duplicate cell in '" + row + "'");
        slot = c;
    };

    if (!pending.empty()) parse_row(pending);
    std::string line;
    while (std::getline(f, line)) {
        std::string t = trim(line);
        if (t.empty()) continue;
        parse_row(t);
    }
    std::int64_t total = 0;
    for (std::int64_t c : out.hist.counts) total += c;
    if (total != out.hist.n_total)
        fail(ErrorCategory::Format, path + ": counts sum to " + std::to_string(total) +
                                        " but header says n_total = " +
                                        std::to_string(out.hist.n_total));
    return out;
}

// ---------------------------------------------------------------- frames

namespace {

void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(char(v & 0xff));
    s.push_back(char(v >> 8));
}

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const unsigned char* p;
    const unsigned char* end;
    const std::string& path;

    void need(std::size_t n) const {
        if (std::size_t(end - p) < n)
            fail(ErrorCategory::Format, path + ": truncated frame stack");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
        p += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
        p += 8;
        return v;
    }
};

constexpr char kFrameMagic[4] = {'E', 'P', 'R', 'F'};
constexpr std::uint32_t kFrameVersion = 1;

}  // namespace

void write_frames(const std::string& path, const std::vector<Frame>& frames,
                  std::uint64_t digest, std::uint64_t seed) {
    if (frames.empty()) fail(ErrorCategory::Input, "refusing to write an empty frame stack");
    const std::uint32_t w = frames.front().width, hgt = frames.front().height;
    for (const Frame& fr : frames)
        if (fr.width != w || fr.height != hgt)
            fail(ErrorCategory::Input, "frame stack has mixed dimensions");

    std::string buf;
    buf.reserve(40 + frames.size() * (4 + 2 * std::size_t(w) * hgt));
    buf.append(kFrameMagic, 4);
    put_u32(buf, kFrameVersion);
    put_u32(buf, w);
    put_u32(buf, hgt);
    put_u32(buf, std::uint32_t(frames.size()));
    put_u64(buf, seed);
    put_u64(buf, digest);
    for (const Frame& fr : frames) {
        put_u32(buf, fr.index);
        for (std::uint16_t v : fr.adu) put_u16(buf, v);
    }
    std::ofstream f = open_out(path);
    f.write(buf.data(), std::streamsize(buf.size()));
    finish_write(f, path);
}

std::vector<Frame> read_frames(const std::string& path, FrameStackHeader* header) {
    std::ifstream f = open_in(path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ByteReader r{reinterpret_cast<const unsigned char*>(bytes.data()),
                 reinterpret_cast<const unsigned char*>(bytes.data()) + bytes.size(), path};
    r.need(4);
    if (std::memcmp(r.p, kFrameMagic, 4) != 0)
        fail(ErrorCategory::Format, path + ": not a frame stack (bad magic)");
    r.p += 4;
    if (r.u32() != kFrameVersion)
        fail(ErrorCategory::Format, path + ": unsupported frame stack version");
    FrameStackHeader h;
    h.width = r.u32();
    h.height = r.u32();
    h.count = r.u32();
    h.seed = r.u64();
    h.digest = r.u64();
    if (h.width == 0 || h.height == 0 || h.count == 0)
        fail(ErrorCategory::Format, path + ": degenerate frame stack header");
    const std::size_t px = std::size_t(h.width) * h.height;
    if (px > (std::size_t(1) << 28))
        fail(ErrorCategory::Format, path + ": frame dimensions implausibly large");
    std::vector<Frame> frames;
    frames.reserve(h.count);
    for (std::uint32_t i = 0; i < h.count; ++i) {
        Frame fr;
        fr.width = h.width;
        fr.height = h.height;
        fr.index = r.u32();
        fr.adu.resize(px);
        r.need(2 * px);
        for (std::size_t k = 0; k < px; ++k) {
            fr.adu[k] = std::uint16_t(r.p[0]) | std::uint16_t(std::uint16_t(r.p[1]) << 8);
            r.p += 2;
        }
        frames.push_back(std::move(fr));
    }
    if (r.p != r.end)
        fail(ErrorCategory::Format, path + ": trailing bytes after last frame");
    if (header) *header = h;
    return frames;
}

// ---------------------------------------------------------------- reports

namespace {

void put_kv(std::string& s, const char* key, const std::string& v) {
    s += key;
    s += " = ";
    s += v;
    s += '\n';
}

void put_kv(std::string& s, const char* key, double v) { put_kv(s, key, fmt_f64(v)); }
void put_kv(std::string& s, const char* key, std::int64_t v) { put_kv(s, key, std::to_string(v)); }
void put_kv(std::string& s, const char* key, bool v) { put_kv(s, key, std::string(v ? "1" : "0")); }

void put_estimate_block(std::string& s, const char* prefix, const ConditionalEntropy& c) {
    std::string p(prefix);
    put_kv(s, (p + "_joint_bits").c_str(), c.joint.bits);
    put_kv(s, (p + "_joint_sigma").c_str(), c.joint.sigma_bits);
    put_kv(s, (p + "_marginal_bits").c_str(), c.marginal.bits);
    put_kv(s, (p + "_marginal_sigma").c_str(), c.marginal.sigma_bits);
    put_kv(s, (p + "_conditional_bits").c_str(), c.bits);
    put_kv(s, (p + "_conditional_sigma").c_str(), c.sigma_bits);
}

}  // namespace

std::string render_report(const WitnessReport& report, const ReportMeta& meta) {
    std::string s;
    s += "# eprsteer report v1\n";
    s += "[meta]\n";
    put_kv(s, "digest", fmt_hex64(meta.digest));
    put_kv(s, "seed", std::to_string(meta.seed));
    put_kv(s, "n_position", meta.n_position);
    put_kv(s, "n_momentum", meta.n_momentum);
    put_kv(s, "out_of_range_pos", meta.out_of_range_pos);
    put_kv(s, "out_of_range_mom", meta.out_of_range_mom);
    put_kv(s, "grid_pos", grid_str(meta.grid_pos));
    put_kv(s, "grid_mom", grid_str(meta.grid_mom));

    s += "[bound]\n";
    put_kv(s, "dx_um", report.bound.dx_um);
    put_kv(s, "dk_per_mm", report.bound.dk_per_mm);
    put_kv(s, "product", report.bound.product);
    put_kv(s, "steering_bits", report.bound.steering_bits);
    put_kv(s, "eof_bits", report.bound.eof_bits);
    put_kv(s, "sigma_bits", report.bound.sigma_bits);
    put_kv(s, "vacuous", report.bound.vacuous);
    put_kv(s, "eof_cap_bits", report.eof_cap_bits);

    for (std::size_t i = 0; i < report.entropic.size(); ++i) {
        const EntropicWitness& w = report.entropic[i];
        s += "[estimator ";
        s += estimator_name(w.estimator);
        s += "]\n";
        put_estimate_block(s, "pos", report.conditional_pos[i]);
        put_estimate_block(s, "mom", report.conditional_mom[i]);
        put_kv(s, "sigma_h_bits", w.sigma_h_bits);
        put_kv(s, "sigma_h_sigma", w.sigma_h_sigma);
        put_kv(s, "delta_i_bits", w.delta_i_bits);
        put_kv(s, "delta_i_sigma", w.delta_i_sigma);
        put_kv(s, "steering_significance", w.steering_significance);
        put_kv(s, "eof_bits", w.eof_bits);
        put_kv(s, "eof_sigma", w.eof_sigma);
        put_kv(s, "eof_capped_bits", w.eof_capped_bits);
        put_kv(s, "eof_was_capped", w.eof_was_capped);
        put_kv(s, "eof_significance", w.eof_significance);
        put_kv(s, "vacuous", w.vacuous);
    }

    for (const auto& [name, message] : report.failures) {
        s += "[estimator-error ";
        s += name;
        s += "]\n";
        put_kv(s, "message", message);
    }

    if (report.have_reid) {
        s += "[reid]\n";
        put_kv(s, "var_diff_pos_um2", report.reid.var_diff_pos_um2);
        put_kv(s, "var_sum_mom_mm2", report.reid.var_sum_mom_mm2);
        put_kv(s, "pi", report.reid.pi);
        put_kv(s, "pi_sigma", report.reid.pi_sigma);
        put_kv(s, "significance", report.reid.significance);
        put_kv(s, "n_position", report.reid.n_position);
        put_kv(s, "n_momentum", report.reid.n_momentum);
    }

    if (report.have_nsb_sensitivity) {
        s += "[diagnostics]\n";
        put_kv(s, "nsb_support_sensitivity_bits", report.nsb_support_sensitivity_bits);
    }
    return s;
}

void write_report(const std::string& path, const WitnessReport& report,
                  const ReportMeta& meta) {
    std::ofstream f = open_out(path);
    f << render_report(report, meta);
    finish_write(f, path);
}

namespace {

struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> kv;

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : kv)
            if (k == key) return &v;
        return nullptr;
    }
    std::string need(const std::string& key, const std::string& path) const {
        const std::string* v = find(key);
        if (!v)
            fail(ErrorCategory::Format,
                 path + ": section [" + name + "] is missing '" + key + "'");
        return *v;
    }
    double f64(const std::string& key, const std::string& path) const {
        return parse_f64(need(key, path), path + " [" + name + "] " + key);
    }
    std::int64_t i64(const std::string& key, const std::string& path) const {
        return parse_i64(need(key, path), path + " [" + name + "] " + key);
    }
    bool flag(const std::string& key, const std::string& path) const {
        std::string v = need(key, path);
        if (v != "0" && v != "1")
            fail(ErrorCategory::Format, path + ": flag '" + key + "' must be 0 or 1");
        return v == "1";
    }
};

std::vector<Section> parse_sections(std::istream& in, const std::string& tag,
                                    const std::string& path) {
    std::string line;
    if (!std::getline(in, line) || trim(line) != "# " + tag)
        fail(ErrorCategory::Format, path + ": expected '# " + tag + "' on line 1");
    std::vector<Section> sections;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            sections.push_back({trim(t.substr(1, t.size() - 2)), {}});
            continue;
        }
        if (sections.empty())
            fail(ErrorCategory::Format, path + ": data before first section: '" + t + "'");
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail(ErrorCategory::Format, path + ": expected 'key = value': '" + t + "'");
        sections.back().kv.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return sections;
}

ConditionalEntropy read_estimate_block(const Section& s, const char* prefix,
                                       Estimator est, const std::string& path) {
    std::string p(prefix);
    ConditionalEntropy c;
    c.estimator = est;
    c.joint.estimator = c.marginal.estimator = est;
    c.joint.bits = s.f64(p + "_joint_bits", path);
    c.joint.sigma_bits = s.f64(p + "_joint_sigma", path);
    c.marginal.bits = s.f64(p + "_marginal_bits", path);
    c.marginal.sigma_bits = s.f64(p + "_marginal_sigma", path);
    c.bits = s.f64(p + "_conditional_bits", path);
    c.sigma_bits = s.f64(p + "_conditional_sigma", path);
    return c;
}

}  // namespace

ReportFile read_report(const std::string& path) {
    std::ifstream f = open_in(path);
    std::vector<Section> sections = parse_sections(f, "eprsteer report v1", path);
    ReportFile rf;
    bool have_meta = false, have_bound = false;
    for (const Section& s : sections) {
        if (s.name == "meta") {
            have_meta = true;
            rf.meta.digest = parse_hex64(s.need("digest", path), path + " digest");
            rf.meta.seed = parse_u64(s.need("seed", path), path + " seed");
            rf.meta.n_position = s.i64("n_position", path);
            rf.meta.n_momentum = s.i64("n_momentum", path);
            rf.meta.out_of_range_pos = s.i64("out_of_range_pos", path);
            rf.meta.out_of_range_mom = s.i64("out_of_range_mom", path);
            rf.meta.grid_pos = parse_grid(s.need("grid_pos", path), path + " grid_pos");
            rf.meta.grid_mom = parse_grid(s.need("grid_mom", path), path + " grid_mom");
        } else if (s.name == "bound") {
            have_bound = true;
            rf.report.bound.dx_um = s.f64("dx_um", path);
            rf.report.bound.dk_per_mm = s.f64("dk_per_mm", path);
            rf.report.bound.product = s.f64("product", path);
            rf.report.bound.steering_bits = s.f64("steering_bits", path);
            rf.report.bound.eof_bits = s.f64("eof_bits", path);
            rf.report.bound.sigma_bits = s.f64("sigma_bits", path);
            rf.report.bound.vacuous = s.flag("vacuous", path);
            rf.report.eof_cap_bits = s.f64("eof_cap_bits", path);
        } else if (s.name.rfind("estimator-error ", 0) == 0) {
            rf.report.failures.emplace_back(s.name.substr(16), s.need("message", path));
        } else if (s.name.rfind("estimator ", 0) == 0) {
            Estimator est;
            try {
                est = estimator_from_name(s.name.substr(10));
            } catch (const Error& e) {
                fail(ErrorCategory::Format, path + ": " + e.what());
            }
            EntropicWitness w;
            w.estimator = est;
            rf.report.conditional_pos.push_back(read_estimate_block(s, "pos", est, path));
            rf.report.conditional_mom.push_back(read_estimate_block(s, "mom", est, path));
            w.sigma_h_bits = s.f64("sigma_h_bits", path);
            w.sigma_h_sigma = s.f64("sigma_h_sigma", path);
            w.delta_i_bits = s.f64("delta_i_bits", path);
            w.delta_i_sigma = s.f64("delta_i_sigma", path);
            w.steering_significance = s.f64("steering_significance", path);
            w.eof_bits = s.f64("eof_bits", path);
            w.eof_sigma = s.f64("eof_sigma", path);
            w.eof_capped_bits = s.f64("eof_capped_bits", path);
            w.eof_was_capped = s.flag("eof_was_capped", path);
            w.eof_significance = s.f64("eof_significance", path);
            w.vacuous = s.flag("vacuous", path);
            rf.report.entropic.push_back(w);
        } else if (s.name == "reid") {
            rf.report.have_reid = true;
            rf.report.reid.var_diff_pos_um2 = s.f64("var_diff_pos_um2", path);
            rf.report.reid.var_sum_mom_mm2 = s.f64("var_sum_mom_mm2", path);
            rf.report.reid.pi = s.f64("pi", path);
            rf.report.reid.pi_sigma = s.f64("pi_sigma", path);
            rf.report.reid.significance = s.f64("significance", path);
            rf.report.reid.n_position = s.i64("n_position", path);
            rf.report.reid.n_momentum = s.i64("n_momentum", path);
        } else if (s.name == "diagnostics") {
            rf.report.have_nsb_sensitivity = true;
            rf.report.nsb_support_sensitivity_bits =
                s.f64("nsb_support_sensitivity_bits", path);
        } else {
            fail(ErrorCategory::Format, path + ": unknown section [" + s.name + "]");
        }
    }
    if (!have_meta || !have_bound)
        fail(ErrorCategory::Format, path + ": missing [meta] or [bound] section");
    return rf;
}

std::string summarize_report(const ReportFile& rf) {
    char buf[256];
    std::string s;
    std::snprintf(buf, sizeof buf, "run %s  seed %" PRIu64 "\n",
                  fmt_hex64(rf.meta.digest).c_str(), rf.meta.seed);
    s += buf;
    std::snprintf(buf, sizeof buf,
                  "coincidences analyzed: %" PRId64 " position (+%" PRId64
                  " off-grid), %" PRId64 " momentum (+%" PRId64 " off-grid)\n",
                  rf.meta.n_position, rf.meta.out_of_range_pos, rf.meta.n_momentum,
                  rf.meta.out_of_range_mom);
    s += buf;
    const CellBound& b = rf.report.bound;
    std::snprintf(buf, sizeof buf,
                  "cells: dx = %.4g um, dk = %.4g /mm -> steering if sum_H < %.4f bits, "
                  "EOF floor from %.4f bits (calib sd %.3g)\n",
                  b.dx_um, b.dk_per_mm, b.steering_bits, b.eof_bits, b.sigma_bits);
    s += buf;
    if (b.vacuous)
        s += "warning: cells too coarse, the entropic bounds are vacuous\n";
    std::snprintf(buf, sizeof buf, "state EOF cap: %.4f ebits\n", rf.report.eof_cap_bits);
    s += buf;
    s += "\nestimator     sum_H [bits]        dI [bits]       steer.sig   EOF [ebits]\n";
    for (std::size_t i = 0; i < rf.report.entropic.size(); ++i) {
        const EntropicWitness& w = rf.report.entropic[i];
        std::snprintf(buf, sizeof buf,
                      "%-10s  %8.4f +- %6.4f  %8.4f +- %6.4f  %8.2f  %8.4f%s\n",
                      estimator_name(w.estimator), w.sigma_h_bits, w.sigma_h_sigma,
                      w.delta_i_bits, w.delta_i_sigma, w.steering_significance,
                      w.eof_capped_bits, w.eof_was_capped ? " (capped)" : "");
        s += buf;
    }
    for (const auto& [name, message] : rf.report.failures) {
        std::snprintf(buf, sizeof buf, "%-10s  failed: %s\n", name.c_str(),
                      message.c_str());
        s += buf;
    }
    if (rf.report.have_reid) {
        const ReidWitness& r = rf.report.reid;
        std::snprintf(buf, sizeof buf,
                      "\nvariance product Pi = %.6g +- %.2g (steering if < 0.25, sig "
                      "%.2f)\n",
                      r.pi, r.pi_sigma, r.significance);
        s += buf;
    }
    if (rf.report.have_nsb_sensitivity) {
        std::snprintf(buf, sizeof buf, "nsb support sensitivity: %.4f bits\n",
                      rf.report.nsb_support_sensitivity_bits);
        s += buf;
    }
    return s;
}

// ---------------------------------------------------------------- witness map

void write_witness_map(const std::string& path, const WitnessMap& map,
                       std::uint64_t digest) {
    std::ofstream f = open_out(path);
    f << "# eprsteer witness-map v1\n";
    f << "# digest = " << fmt_hex64(digest) << '\n';
    f << "# steering_level_bits = " << fmt_f64(WitnessMap::steering_level_bits()) << '\n';
    f << "# eof_level_bits = " << fmt_f64(WitnessMap::eof_level_bits()) << '\n';
    f << "# reid_level = " << fmt_f64(WitnessMap::reid_level()) << '\n';
    f << "# columns = schmidt q sigma_h_bits reid_pi\n";
    const std::size_t nq = map.q_axis.size();
    for (std::size_t ik = 0; ik < map.schmidt_axis.size(); ++ik)
        for (std::size_t iq = 0; iq < nq; ++iq) {
            f << fmt_f64(map.schmidt_axis[ik]) << '\t' << fmt_f64(map.q_axis[iq]) << '\t'
              << fmt_f64(map.sigma_h_bits[ik * nq + iq]) << '\t'
              << fmt_f64(map.reid_pi[ik * nq + iq]) << '\n';
        }
    finish_write(f, path);
}

}  // namespace eprsteer
