#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "eprsteer/biphoton.hpp"
#include "eprsteer/coincidence.hpp"

namespace eprsteer {

// Intensified-camera response model.  Spots are Gaussians of fixed FWHM
// whose peak amplitude is exponentially distributed (intensifier gain);
// mean_peak_adu is the target post-clipping mean of the brightest pixel of
// a spot, the quantity calibrated against in the lab, so the synthesizer
// solves for the exponential scale that reproduces it under the clip.
struct CameraModel {
    std::uint32_t width = 512;
    std::uint32_t height = 512;
    double offset_adu = 100.0;            // mean dark offset
    double offset_variation_adu = 2.0;    // slow spatial wobble of the offset
    double noise_sd_adu = 2.5;            // rms readout noise
    double spot_fwhm_px = 5.0;
    double mean_peak_adu = 1250.0;        // ≈ 500 × noise_sd
    std::uint16_t adu_max = 2047;         // 11-bit digitizer clip

    void validate() const;
};

// deterministic dark-offset map shared by synthesis and detection
double offset_at(const CameraModel& m, std::uint32_t px, std::uint32_t py);

// exponential amplitude scale that hits mean_peak_adu after clipping
double calibrated_amplitude_scale(const CameraModel& m);

// One photon to render.  Positions are continuous pixel coordinates in
// [0, width) × [0, height); a negative amplitude means "draw from the
// calibrated exponential", otherwise the value is the Gaussian peak in ADU.
struct PhotonHit {
    double x = 0.0;
    double y = 0.0;
    double amplitude_adu = -1.0;
};

struct Frame {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t index = 0;
    std::vector<std::uint16_t> adu;

    std::uint16_t at(std::uint32_t px, std::uint32_t py) const {
        return adu[std::size_t(py) * width + px];
    }
};

Frame synthesize_frame(const CameraModel& m, std::span<const PhotonHit> hits,
                       std::uint32_t index, std::uint64_t seed);

struct DetectOptions {
    double threshold_multiple = 5.0;  // in units of noise_sd
    int fit_radius = 3;               // pixels used around a candidate
    int min_pixels_above = 5;         // suppresses single-pixel noise spikes

    void validate() const;
};

struct SpotDetection {
    double x = 0.0;  // continuous pixel coordinates of the fitted apex
    double y = 0.0;
    double amplitude_adu = 0.0;
    bool saturated = false;
};

// Threshold + local maximum candidates, then a least-squares paraboloid on
// the log of the offset-subtracted counts; the apex gives the subpixel
// position.  Saturated pixels are censored from the fit; candidates whose
// curvature is not a proper maximum are dropped.
std::vector<SpotDetection> detect_spots(const Frame& frame, const CameraModel& m,
                                        const DetectOptions& opts = {});

struct DetectorRegion {
    double cx = 0.0;
    double cy = 0.0;
    double radius = 0.0;

    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        return dx * dx + dy * dy <= radius * radius;
    }
};

// physical = (pixel − center) · scale, per axis
struct ArmCalibration {
    double cx_px = 0.0;
    double cy_px = 0.0;
    double scale = 1.0;  // µm/px (position) or mm^-1/px (momentum)
};

struct FrameTallies {
    std::uint64_t frames = 0;
    std::uint64_t accepted = 0;
    std::uint64_t none_a = 0;   // no detection in region A
    std::uint64_t multi_a = 0;  // more than one in region A
    std::uint64_t none_b = 0;
    std::uint64_t multi_b = 0;
};

// Frames with exactly one detection per region become events; everything
// else is tallied by failure mode (a frame can fail on both arms at once).
std::vector<CoincidenceEvent> frames_to_events(std::span<const Frame> frames,
                                               const CameraModel& m,
                                               const DetectOptions& opts,
                                               const DetectorRegion& region_a,
                                               const DetectorRegion& region_b,
                                               const ArmCalibration& calib_a,
                                               const ArmCalibration& calib_b,
                                               FrameTallies* tallies = nullptr);

// Occupancy model for synthetic runs: per frame, Poisson(pair_rate) model
// pairs land in both regions and Poisson(single_rate_*) unpaired singles
// land in one; singles follow the arm marginal.
struct FrameBatchConfig {
    CameraModel camera;
    BiphotonState state;
    Basis basis = Basis::Position;
    DetectorRegion region_a, region_b;
    ArmCalibration calib_a, calib_b;
    double pair_rate = 0.05;
    double single_rate_a = 0.05;
    double single_rate_b = 0.05;
    std::size_t n_frames = 0;
    std::uint64_t seed = 1;
};

// closed-form probability that a frame yields exactly one hit per arm
// (large regions, no detection losses)
double expected_coincidence_yield(double pair_rate, double single_rate_a,
                                  double single_rate_b);

std::vector<Frame> synthesize_frame_batch(const FrameBatchConfig& cfg);

}  // namespace eprsteer
