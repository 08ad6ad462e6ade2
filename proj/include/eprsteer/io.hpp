#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "eprsteer/coincidence.hpp"
#include "eprsteer/estimators.hpp"
#include "eprsteer/frames.hpp"
#include "eprsteer/witness.hpp"

namespace eprsteer {

// Every knob of a run in one place.  Loaded from a `key = value` file with
// `#` comments; unknown or duplicate keys are configuration errors so typos
// cannot silently fall back to defaults.  The digest of the canonical
// serialization is stamped into every file a run produces, which is how
// downstream stages notice they were handed data from a different setup.
struct RunConfig {
    // source model
    double sigma_um = 6.25;
    double kappa_per_mm = 7.75;
    double q = 1.0;
    std::uint64_t seed = 1;

    // simulation
    std::int64_t n_pairs = 100000;
    // coincidences are kept when the non-analyzed transverse coordinate is
    // correlated within this many σ (κ in the far field); inf disables
    double herald_window = 2.0;

    // analysis grid and imaging optics
    std::size_t grid_cells = 100;
    double delta_b_um = 31.0;    // camera cell pitch
    double magnification = 8.0;  // image-plane magnification
    double lambda_nm = 800.0;
    double f_eff_mm = 50.0;      // far-field transform focal length
    double calib_frac_m = 0.0;   // fractional 1σ uncertainty of magnification
    double calib_frac_f = 0.0;   // ... and of f_eff
    std::vector<Estimator> estimators = {Estimator::Plugin, Estimator::Nsb,
                                         Estimator::Pym, Estimator::Ml};
    std::size_t bootstrap_resamples = 200;

    // camera + frame synthesis
    std::uint32_t frame_width = 512;
    std::uint32_t frame_height = 512;
    std::size_t frame_count = 1000;
    Basis frames_basis = Basis::Position;
    double pair_rate = 0.05;
    double single_rate_a = 0.05;
    double single_rate_b = 0.05;
    double offset_adu = 100.0;
    double offset_variation_adu = 2.0;
    double noise_sd_adu = 2.5;
    double spot_fwhm_px = 5.0;
    double mean_peak_adu = 1250.0;
    std::uint32_t adu_max = 2047;
    double threshold_multiple = 5.0;
    int fit_radius = 3;
    int min_pixels_above = 5;
    double region_a_cx = 128.0;
    double region_a_cy = 256.0;
    double region_a_radius = 100.0;
    double region_b_cx = 384.0;
    double region_b_cy = 256.0;
    double region_b_radius = 100.0;

    void validate() const;

    BiphotonState state() const { return {sigma_um, kappa_per_mm, q}; }
    CameraModel camera() const;
    CalibratedCell cell() const {
        return calibration_cells(delta_b_um, magnification, lambda_nm, f_eff_mm);
    }
    // symmetric per-arm analysis axes: position in µm, momentum in mm^-1
    GridSpec position_axis() const;
    GridSpec momentum_axis() const;
    DetectorRegion region_a() const { return {region_a_cx, region_a_cy, region_a_radius}; }
    DetectorRegion region_b() const { return {region_b_cx, region_b_cy, region_b_radius}; }
    // px → physical mapping for each arm, centered on its region
    ArmCalibration arm_calibration_a() const;
    ArmCalibration arm_calibration_b() const;
};

std::uint64_t fnv1a64(std::string_view bytes);

RunConfig load_config(const std::string& path);
// fixed-order `key = value` dump; load_config(canonical) round-trips
std::string canonical_config(const RunConfig& cfg);
std::uint64_t config_digest(const RunConfig& cfg);
void save_config(const std::string& path, const RunConfig& cfg);

// deterministic sub-stream seed for one named consumer of the run seed
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

// --- coincidence event lists (TSV, `# key = value` header block) ---

struct EventsFile {
    Basis basis = Basis::Position;
    std::uint64_t digest = 0;
    std::uint64_t seed = 0;
    std::vector<CoincidenceEvent> events;
};

void write_events(const std::string& path, const std::vector<CoincidenceEvent>& events,
                  Basis basis, std::uint64_t digest, std::uint64_t seed);
EventsFile read_events(const std::string& path);

// --- binned coincidence histograms (sparse text) ---

struct HistogramFile {
    std::uint64_t digest = 0;
    std::uint64_t seed = 0;
    JointHistogram hist;
};

void write_histogram(const std::string& path, const JointHistogram& hist,
                     std::uint64_t digest, std::uint64_t seed);
HistogramFile read_histogram(const std::string& path);

// --- raw frame stacks (little-endian binary, magic "EPRF") ---

struct FrameStackHeader {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t count = 0;
    std::uint64_t seed = 0;
    std::uint64_t digest = 0;
};

void write_frames(const std::string& path, const std::vector<Frame>& frames,
                  std::uint64_t digest, std::uint64_t seed);
std::vector<Frame> read_frames(const std::string& path, FrameStackHeader* header = nullptr);

// --- witness reports (INI-style sections, exact decimal round-trip) ---

struct ReportMeta {
    std::uint64_t digest = 0;
    std::uint64_t seed = 0;
    std::int64_t n_position = 0;  // in-grid analyzed coincidences
    std::int64_t n_momentum = 0;
    std::int64_t out_of_range_pos = 0;
    std::int64_t out_of_range_mom = 0;
    GridSpec grid_pos;
    GridSpec grid_mom;
};

struct ReportFile {
    ReportMeta meta;
    WitnessReport report;
};

std::string render_report(const WitnessReport& report, const ReportMeta& meta);
void write_report(const std::string& path, const WitnessReport& report,
                  const ReportMeta& meta);
ReportFile read_report(const std::string& path);

// compact human-readable summary (for terminals, not for parsing)
std::string summarize_report(const ReportFile& rf);

// --- witness map (TSV with contour levels in the header) ---

void write_witness_map(const std::string& path, const WitnessMap& map,
                       std::uint64_t digest);

}  // namespace eprsteer
