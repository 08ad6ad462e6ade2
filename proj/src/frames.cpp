#include "eprsteer/frames.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "eprsteer/rng.hpp"

namespace eprsteer {

namespace {

constexpr double kFwhmToSd = 2.354820045030949;  // 2·sqrt(2 ln 2)

double spot_sd(const CameraModel& m) { return m.spot_fwhm_px / kFwhmToSd; }

// mean over subpixel positions of the brightest-pixel fraction of a
// unit-amplitude spot (the Gaussian sampled at the nearest pixel center)
double subpixel_peak_fraction(double sd, double u, double v) {
    return std::exp(-0.5 * (u * u + v * v) / (sd * sd));
}

// 6x6 (or smaller) in-place Gaussian elimination; returns false if singular
template <int N>
bool solve_linear(double a[N][N + 1]) {
    for (int col = 0; col < N; ++col) {
        int piv = col;
        for (int r = col + 1; r < N; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        if (std::abs(a[piv][col]) < 1e-12) return false;
        for (int c = 0; c <= N; ++c) std::swap(a[piv][c], a[col][c]);
        for (int r = 0; r < N; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            for (int c = col; c <= N; ++c) a[r][c] -= f * a[col][c];
        }
    }
    return true;
}

}  // namespace

void CameraModel::validate() const {
    require(width >= 16 && height >= 16, ErrorCategory::Input,
            "camera sensor too small");
    require(noise_sd_adu >= 0.0 && offset_adu >= 0.0 && offset_variation_adu >= 0.0,
            ErrorCategory::Input, "camera noise/offset must be non-negative");
    require(spot_fwhm_px > 0.5, ErrorCategory::Input, "spot FWHM too small");
    require(mean_peak_adu > 0.0, ErrorCategory::Input, "mean peak must be positive");
    require(double(adu_max) > offset_adu + 10.0, ErrorCategory::Input,
            "digitizer range leaves no headroom above the offset");
}

double offset_at(const CameraModel& m, std::uint32_t px, std::uint32_t py) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    return m.offset_adu +
           m.offset_variation_adu * std::cos(two_pi * double(px) / double(m.width)) *
               std::cos(two_pi * double(py) / double(m.height));
}

double calibrated_amplitude_scale(const CameraModel& m) {
    m.validate();
    double sd = spot_sd(m);
    double headroom = double(m.adu_max) - m.offset_adu;

    // post-clip mean of the brightest pixel for exponential scale `scale`,
    // averaged over the subpixel landing position
    auto clipped_mean = [&](double scale) {
        constexpr int n = 24;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            double u = (double(i) + 0.5) / n - 0.5;
            for (int j = 0; j < n; ++j) {
                double v = (double(j) + 0.5) / n - 0.5;
                double f = subpixel_peak_fraction(sd, u, v);
                double fm = f * scale;
                acc += fm * (1.0 - std::exp(-headroom / fm));
            }
        }
        return acc / double(n * n);
    };

    double lo = m.mean_peak_adu * 0.5, hi = m.mean_peak_adu * 64.0;
    require(clipped_mean(hi) >= m.mean_peak_adu, ErrorCategory::Domain,
            "mean peak unreachable under the digitizer clip");
    for (int i = 0; i < 80; ++i) {
        double mid = 0.5 * (lo + hi);
        (clipped_mean(mid) < m.mean_peak_adu ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

namespace {

Frame render_frame(const CameraModel& m, std::span<const PhotonHit> hits,
                   std::uint32_t index, std::uint64_t seed, double scale) {
    double sd = spot_sd(m);
    Rng rng(seed, 0xf7a3e5ULL + index);

    std::vector<double> acc(std::size_t(m.width) * m.height, 0.0);
    int reach = int(std::ceil(5.0 * sd));
    for (const PhotonHit& hit : hits) {
        double a = hit.amplitude_adu >= 0.0 ? hit.amplitude_adu
                                            : rng.exponential(scale);
        int cx = int(std::floor(hit.x)), cy = int(std::floor(hit.y));
        for (int py = cy - reach; py <= cy + reach; ++py) {
            if (py < 0 || py >= int(m.height)) continue;
            for (int px = cx - reach; px <= cx + reach; ++px) {
                if (px < 0 || px >= int(m.width)) continue;
                double dx = double(px) + 0.5 - hit.x;
                double dy = double(py) + 0.5 - hit.y;
                acc[std::size_t(py) * m.width + px] +=
                    a * std::exp(-0.5 * (dx * dx + dy * dy) / (sd * sd));
            }
        }
    }

    Frame frame;
    frame.width = m.width;
    frame.height = m.height;
    frame.index = index;
    frame.adu.resize(acc.size());
    for (std::uint32_t py = 0; py < m.height; ++py) {
        for (std::uint32_t px = 0; px < m.width; ++px) {
            std::size_t i = std::size_t(py) * m.width + px;
            double v = acc[i] + offset_at(m, px, py);
            if (m.noise_sd_adu > 0.0) v += rng.normal(0.0, m.noise_sd_adu);
            double r = std::round(v);
            frame.adu[i] = std::uint16_t(std::clamp(r, 0.0, double(m.adu_max)));
        }
    }
    return frame;
}

}  // namespace

Frame synthesize_frame(const CameraModel& m, std::span<const PhotonHit> hits,
                       std::uint32_t index, std::uint64_t seed) {
    m.validate();
    for (const PhotonHit& hit : hits)
        require(hit.x >= 0.0 && hit.x < double(m.width) && hit.y >= 0.0 &&
                    hit.y < double(m.height),
                ErrorCategory::Domain, "photon position outside the sensor");
    return render_frame(m, hits, index, seed, calibrated_amplitude_scale(m));
}

void DetectOptions::validate() const {
    require(threshold_multiple > 0.0, ErrorCategory::Input,
            "detection threshold must be positive");
    require(fit_radius >= 1 && fit_radius <= 16, ErrorCategory::Input,
            "fit radius out of range [1, 16]");
    require(min_pixels_above >= 1, ErrorCategory::Input,
            "min_pixels_above must be at least 1");
}

std::vector<SpotDetection> detect_spots(const Frame& frame, const CameraModel& m,
                                        const DetectOptions& opts) {
    opts.validate();
    require(frame.width == m.width && frame.height == m.height, ErrorCategory::Input,
            "frame dimensions do not match the camera model");
    int w = int(frame.width), h = int(frame.height);
    int r = opts.fit_radius;
    double threshold = opts.threshold_multiple * m.noise_sd_adu;

    std::vector<double> work(frame.adu.size());
    for (int py = 0; py < h; ++py)
        for (int px = 0; px < w; ++px) {
            std::size_t i = std::size_t(py) * w + px;
            work[i] = double(frame.adu[i]) - offset_at(m, px, py);
        }

    auto wat = [&](int px, int py) { return work[std::size_t(py) * w + px]; };

    // local maxima above threshold; plateaus yield their first cell only
    struct Candidate {
        int px, py;
        double value;
    };
    std::vector<Candidate> candidates;
    for (int py = r; py < h - r; ++py) {
        for (int px = r; px < w - r; ++px) {
            double v = wat(px, py);
            if (v <= threshold) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    double nv = wat(px + dx, py + dy);
                    bool before = dy < 0 || (dy == 0 && dx < 0);
                    if (before ? nv >= v : nv > v) {
                        is_max = false;
                        break;
                    }
                }
            if (!is_max) continue;
            int above = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx)
                    if (dx * dx + dy * dy <= r * r && wat(px + dx, py + dy) > threshold)
                        ++above;
            if (above >= opts.min_pixels_above)
                candidates.push_back({px, py, v});
        }
    }

    // merge candidates closer than the fit radius, keeping the brighter one
    std::sort(candidates.begin(), candidates.end(),
              [](const Candidate& a, const Candidate& b) { return a.value > b.value; });
    std::vector<Candidate> kept;
    for (const Candidate& c : candidates) {
        bool suppressed = false;
        for (const Candidate& k : kept) {
            double dx = c.px - k.px, dy = c.py - k.py;
            if (dx * dx + dy * dy <= double(r * r)) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }

    std::vector<SpotDetection> out;
    for (const Candidate& c : kept) {
        // paraboloid fit to the log of the usable pixels
        double ata[6][7] = {};
        int used = 0;
        bool saturated = false;
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                if (dx * dx + dy * dy > r * r) continue;
                if (frame.at(std::uint32_t(c.px + dx), std::uint32_t(c.py + dy)) >=
                    m.adu_max) {
                    saturated = true;  // censored: the clip flattens the log
                    continue;
                }
                double v = wat(c.px + dx, c.py + dy);
                if (v < 1.0) continue;
                double z = std::log(v);
                double row[6] = {1.0, double(dx), double(dy), double(dx) * dx,
                                 double(dy) * dy, double(dx) * dy};
                for (int a = 0; a < 6; ++a) {
                    ata[a][6] += row[a] * z;
                    for (int b = 0; b < 6; ++b) ata[a][b] += row[a] * row[b];
                }
                ++used;
            }
        }
        if (used < 6) continue;
        if (!solve_linear<6>(ata)) continue;
        double c0 = ata[0][6] / ata[0][0], c1 = ata[1][6] / ata[1][1],
               c2 = ata[2][6] / ata[2][2], c3 = ata[3][6] / ata[3][3],
               c4 = ata[4][6] / ata[4][4], c5 = ata[5][6] / ata[5][5];
        // must be a genuine maximum
        if (!(c3 < 0.0 && c4 < 0.0 && 4.0 * c3 * c4 - c5 * c5 > 0.0)) continue;
        double det = 4.0 * c3 * c4 - c5 * c5;
        double ax = (-2.0 * c4 * c1 + c5 * c2) / det;
        double ay = (-2.0 * c3 * c2 + c5 * c1) / det;
        if (std::abs(ax) > 2.0 || std::abs(ay) > 2.0) continue;

        SpotDetection det_out;
        det_out.x = double(c.px) + 0.5 + ax;
        det_out.y = double(c.py) + 0.5 + ay;
        det_out.amplitude_adu =
            std::exp(c0 + c1 * ax + c2 * ay + c3 * ax * ax + c4 * ay * ay +
                     c5 * ax * ay);
        det_out.saturated = saturated;
        out.push_back(det_out);
    }
    std::sort(out.begin(), out.end(), [](const SpotDetection& a, const SpotDetection& b) {
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });
    return out;
}

std::vector<CoincidenceEvent> frames_to_events(std::span<const Frame> frames,
                                               const CameraModel& m,
                                               const DetectOptions& opts,
                                               const DetectorRegion& region_a,
                                               const DetectorRegion& region_b,
                                               const ArmCalibration& calib_a,
                                               const ArmCalibration& calib_b,
                                               FrameTallies* tallies) {
    require(region_a.radius > 0.0 && region_b.radius > 0.0, ErrorCategory::Input,
            "detector regions need positive radii");
    double dcx = region_a.cx - region_b.cx, dcy = region_a.cy - region_b.cy;
    require(std::sqrt(dcx * dcx + dcy * dcy) >= region_a.radius + region_b.radius,
            ErrorCategory::Input, "detector regions overlap");

    FrameTallies tally;
    std::vector<CoincidenceEvent> events;
    for (const Frame& frame : frames) {
        ++tally.frames;
        std::vector<SpotDetection> spots = detect_spots(frame, m, opts);
        const SpotDetection *in_a = nullptr, *in_b = nullptr;
        int na = 0, nb = 0;
        for (const SpotDetection& s : spots) {
            if (region_a.contains(s.x, s.y)) {
                ++na;
                in_a = &s;
            } else if (region_b.contains(s.x, s.y)) {
                ++nb;
                in_b = &s;
            }
        }
        if (na == 0) ++tally.none_a;
        if (na > 1) ++tally.multi_a;
        if (nb == 0) ++tally.none_b;
        if (nb > 1) ++tally.multi_b;
        if (na != 1 || nb != 1) continue;
        ++tally.accepted;
        CoincidenceEvent ev;
        ev.ax = (in_a->x - calib_a.cx_px) * calib_a.scale;
        ev.ay = (in_a->y - calib_a.cy_px) * calib_a.scale;
        ev.bx = (in_b->x - calib_b.cx_px) * calib_b.scale;
        ev.by = (in_b->y - calib_b.cy_px) * calib_b.scale;
        events.push_back(ev);
    }
    if (tallies) *tallies = tally;
    return events;
}

double expected_coincidence_yield(double pair_rate, double single_rate_a,
                                  double single_rate_b) {
    return std::exp(-(pair_rate + single_rate_a + single_rate_b)) *
           (pair_rate + single_rate_a * single_rate_b);
}

std::vector<Frame> synthesize_frame_batch(const FrameBatchConfig& cfg) {
    cfg.camera.validate();
    cfg.state.validate();
    require(cfg.n_frames > 0, ErrorCategory::Input, "no frames requested");
    require(cfg.pair_rate >= 0.0 && cfg.single_rate_a >= 0.0 && cfg.single_rate_b >= 0.0,
            ErrorCategory::Input, "occupancy rates must be non-negative");
    require(cfg.calib_a.scale != 0.0 && cfg.calib_b.scale != 0.0, ErrorCategory::Input,
            "calibration scales must be nonzero");

    RotatedWidths w = rotated_widths(cfg.state, cfg.basis);
    double amp_scale = calibrated_amplitude_scale(cfg.camera);
    Rng rng(cfg.seed, 0x66726d73ULL);
    constexpr double inv_sqrt2 = 0.70710678118654752440;

    std::vector<Frame> frames;
    frames.reserve(cfg.n_frames);
    std::vector<PhotonHit> hits;
    for (std::size_t fi = 0; fi < cfg.n_frames; ++fi) {
        hits.clear();
        // marginal tails can miss the sensor; those photons are simply lost
        auto push_hit = [&](double physical_x, double physical_y,
                            const ArmCalibration& cal) {
            double px = cal.cx_px + physical_x / cal.scale;
            double py = cal.cy_px + physical_y / cal.scale;
            if (px < 0.0 || px >= double(cfg.camera.width) || py < 0.0 ||
                py >= double(cfg.camera.height))
                return;
            hits.push_back(PhotonHit{px, py, -1.0});
        };
        int pairs = rng.poisson(cfg.pair_rate);
        for (int p = 0; p < pairs; ++p) {
            bool corr = rng.bernoulli(cfg.state.q);
            double a[2], b[2];
            for (int axis = 0; axis < 2; ++axis) {
                if (corr) {
                    double u = rng.normal(0.0, w.sd_u);
                    double v = rng.normal(0.0, w.sd_v);
                    a[axis] = (u - v) * inv_sqrt2;
                    b[axis] = (u + v) * inv_sqrt2;
                } else {
                    a[axis] = rng.normal(0.0, w.sd_acc);
                    b[axis] = rng.normal(0.0, w.sd_acc);
                }
            }
            push_hit(a[0], a[1], cfg.calib_a);
            push_hit(b[0], b[1], cfg.calib_b);
        }
        int singles_a = rng.poisson(cfg.single_rate_a);
        for (int sgl = 0; sgl < singles_a; ++sgl)
            push_hit(rng.normal(0.0, w.sd_acc), rng.normal(0.0, w.sd_acc), cfg.calib_a);
        int singles_b = rng.poisson(cfg.single_rate_b);
        for (int sgl = 0; sgl < singles_b; ++sgl)
            push_hit(rng.normal(0.0, w.sd_acc), rng.normal(0.0, w.sd_acc), cfg.calib_b);

        frames.push_back(render_frame(cfg.camera, hits, std::uint32_t(fi),
                                      cfg.seed, amp_scale));
    }
    return frames;
}

}  // namespace eprsteer
