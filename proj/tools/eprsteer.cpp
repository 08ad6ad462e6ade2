#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eprsteer/errors.hpp"
#include "eprsteer/io.hpp"
#include "eprsteer/kernels.hpp"
#include "eprsteer/witness.hpp"

namespace es = eprsteer;

namespace {

int exit_code(es::ErrorCategory c) {
    switch (c) {
        case es::ErrorCategory::Config:   return 2;
        case es::ErrorCategory::Io:       return 3;
        case es::ErrorCategory::Format:   return 4;
        case es::ErrorCategory::Input:    return 5;
        case es::ErrorCategory::Domain:   return 6;
        case es::ErrorCategory::Accuracy: return 7;
        case es::ErrorCategory::Fit:      return 8;
    }
    return 1;
}

// fixed sub-stream tags so every consumer of the run seed is independent
constexpr std::uint64_t kSeedPluginPos = 0x706c672d706f73ULL;
constexpr std::uint64_t kSeedPluginMom = 0x706c672d6d6f6dULL;
constexpr std::uint64_t kSeedReid = 0x726569642d6277ULL;

es::EstimatorOptions estimator_options(const es::RunConfig& cfg, std::uint64_t plugin_seed) {
    es::EstimatorOptions o;
    o.plugin.resamples = cfg.bootstrap_resamples;
    o.plugin.seed = plugin_seed;
    return o;
}

void warn_digest(const std::string& path, std::uint64_t file_digest,
                 std::uint64_t cfg_digest) {
    if (file_digest != cfg_digest)
        std::fprintf(stderr,
                     "warning: %s carries digest %016" PRIx64
                     " but the configuration digests to %016" PRIx64 "\n",
                     path.c_str(), file_digest, cfg_digest);
}

bool same_grid(const es::GridSpec& a, const es::GridSpec& b) {
    auto close = [](double x, double y) {
        return std::abs(x - y) <= 1e-9 * (1.0 + std::abs(x) + std::abs(y));
    };
    return a.count == b.count && close(a.origin, b.origin) && close(a.delta, b.delta);
}

void make_directories(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) es::fail(es::ErrorCategory::Io, "cannot create directory " + dir + ": " + ec.message());
}

int cmd_init(const std::string& out_path) {
    es::RunConfig cfg;
    es::save_config(out_path, cfg);
    std::printf("wrote default configuration to %s (digest %016" PRIx64 ")\n",
                out_path.c_str(), es::config_digest(cfg));
    return 0;
}

int cmd_simulate(const std::string& cfg_path, const std::string& out_dir) {
    es::RunConfig cfg = es::load_config(cfg_path);
    std::uint64_t digest = es::config_digest(cfg);
    make_directories(out_dir);
    es::BiphotonState st = cfg.state();
    es::HeraldFractions hf = es::herald_keep_fractions(st, cfg.herald_window);

    for (es::Basis basis : {es::Basis::Position, es::Basis::Momentum}) {
        auto events = es::sample_pairs(st, basis, std::size_t(cfg.n_pairs), cfg.seed);
        es::HeraldStats stats;
        auto kept = es::herald_postselect(st, basis, events, cfg.herald_window, &stats);
        std::string path = out_dir + "/events_" + es::basis_name(basis) + ".tsv";
        es::write_events(path, kept, basis, digest, cfg.seed);
        std::printf("%s: %zu of %" PRId64 " pairs kept (%.4f, expected %.4f) -> %s\n",
                    es::basis_name(basis), kept.size(), cfg.n_pairs,
                    stats.kept_fraction(), hf.overall, path.c_str());
    }
    std::printf("post-selected correlated fraction: %.4f (source q = %.4f)\n", hf.q_eff,
                cfg.q);
    return 0;
}

int cmd_analyze(const std::string& cfg_path, const std::string& events_pos,
                const std::string& events_mom, const std::string& hist_pos,
                const std::string& hist_mom, const std::string& out_path,
                const std::string& save_hist_pos, const std::string& save_hist_mom) {
    const bool from_events = !events_pos.empty();
    if (from_events == !hist_pos.empty())
        es::fail(es::ErrorCategory::Config,
                 "pass either --events-pos/--events-mom or --hist-pos/--hist-mom");
    if (from_events && events_mom.empty())
        es::fail(es::ErrorCategory::Config, "--events-mom is required with --events-pos");
    if (!from_events && hist_mom.empty())
        es::fail(es::ErrorCategory::Config, "--hist-mom is required with --hist-pos");

    es::RunConfig cfg = es::load_config(cfg_path);
    std::uint64_t digest = es::config_digest(cfg);
    es::GridSpec grid_pos = cfg.position_axis();
    es::GridSpec grid_mom = cfg.momentum_axis();

    std::vector<es::CoincidenceEvent> pos_ev, mom_ev;
    es::JointHistogram ph, mh;
    if (from_events) {
        es::EventsFile ep = es::read_events(events_pos);
        es::EventsFile em = es::read_events(events_mom);
        if (ep.basis != es::Basis::Position)
            es::fail(es::ErrorCategory::Input, events_pos + " does not hold position events");
        if (em.basis != es::Basis::Momentum)
            es::fail(es::ErrorCategory::Input, events_mom + " does not hold momentum events");
        warn_digest(events_pos, ep.digest, digest);
        warn_digest(events_mom, em.digest, digest);
        pos_ev = std::move(ep.events);
        mom_ev = std::move(em.events);
        ph = es::bin_events(pos_ev, es::Basis::Position, grid_pos, grid_pos);
        mh = es::bin_events(mom_ev, es::Basis::Momentum, grid_mom, grid_mom);
    } else {
        es::HistogramFile hp = es::read_histogram(hist_pos);
        es::HistogramFile hm = es::read_histogram(hist_mom);
        if (hp.hist.basis != es::Basis::Position)
            es::fail(es::ErrorCategory::Input, hist_pos + " does not hold a position histogram");
        if (hm.hist.basis != es::Basis::Momentum)
            es::fail(es::ErrorCategory::Input, hist_mom + " does not hold a momentum histogram");
        warn_digest(hist_pos, hp.digest, digest);
        warn_digest(hist_mom, hm.digest, digest);
        if (!same_grid(hp.hist.axis_a, grid_pos) || !same_grid(hp.hist.axis_b, grid_pos))
            es::fail(es::ErrorCategory::Input,
                     hist_pos + ": histogram grid does not match the configured analysis grid");
        if (!same_grid(hm.hist.axis_a, grid_mom) || !same_grid(hm.hist.axis_b, grid_mom))
            es::fail(es::ErrorCategory::Input,
                     hist_mom + ": histogram grid does not match the configured analysis grid");
        ph = std::move(hp.hist);
        mh = std::move(hm.hist);
    }
    if (!save_hist_pos.empty()) es::write_histogram(save_hist_pos, ph, digest, cfg.seed);
    if (!save_hist_mom.empty()) es::write_histogram(save_hist_mom, mh, digest, cfg.seed);

    es::AnalysisOptions aopts;
    aopts.estimators = cfg.estimators;
    aopts.est_opts_pos = estimator_options(cfg, es::derive_seed(cfg.seed, kSeedPluginPos));
    aopts.est_opts_mom = estimator_options(cfg, es::derive_seed(cfg.seed, kSeedPluginMom));
    es::CalibratedCell cell = cfg.cell();
    aopts.bound = es::cell_bound(cell.dx_um, cell.dk_per_mm, cfg.calib_frac_m, cfg.calib_frac_f);
    aopts.eof_cap_bits = es::eof_cap(cfg.state());
    aopts.reid_resamples = cfg.bootstrap_resamples;
    aopts.reid_seed = es::derive_seed(cfg.seed, kSeedReid);
    for (es::Estimator e : cfg.estimators)
        if (e == es::Estimator::Nsb) aopts.nsb_support_sensitivity = true;

    es::WitnessReport rep = es::run_witness_analysis(
        ph, mh, from_events ? &pos_ev : nullptr, from_events ? &mom_ev : nullptr, aopts);

    es::ReportMeta meta;
    meta.digest = digest;
    meta.seed = cfg.seed;
    meta.n_position = ph.n_total;
    meta.n_momentum = mh.n_total;
    meta.out_of_range_pos = ph.n_out_of_range;
    meta.out_of_range_mom = mh.n_out_of_range;
    meta.grid_pos = grid_pos;
    meta.grid_mom = grid_mom;
    es::write_report(out_path, rep, meta);
    std::fputs(es::summarize_report({meta, rep}).c_str(), stdout);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_witness_map(const std::string& cfg_path, const std::string& out_path, double k_min,
                    double k_max, std::size_t nk, double q_min, double q_max,
                    std::size_t nq) {
    es::RunConfig cfg = es::load_config(cfg_path);
    es::WitnessMap map = es::witness_map(k_min, k_max, nk, q_min, q_max, nq);
    es::write_witness_map(out_path, map, es::config_digest(cfg));
    std::printf("wrote %zux%zu witness map to %s\n", nk, nq, out_path.c_str());
    return 0;
}

es::FrameBatchConfig batch_config(const es::RunConfig& cfg) {
    es::FrameBatchConfig b;
    b.camera = cfg.camera();
    b.state = cfg.state();
    b.basis = cfg.frames_basis;
    b.region_a = cfg.region_a();
    b.region_b = cfg.region_b();
    b.calib_a = cfg.arm_calibration_a();
    b.calib_b = cfg.arm_calibration_b();
    b.pair_rate = cfg.pair_rate;
    b.single_rate_a = cfg.single_rate_a;
    b.single_rate_b = cfg.single_rate_b;
    b.n_frames = cfg.frame_count;
    b.seed = cfg.seed;
    return b;
}

int cmd_frames_synth(const std::string& cfg_path, const std::string& out_path) {
    es::RunConfig cfg = es::load_config(cfg_path);
    std::vector<es::Frame> frames = es::synthesize_frame_batch(batch_config(cfg));
    es::write_frames(out_path, frames, es::config_digest(cfg), cfg.seed);
    std::printf("wrote %zu %ux%u frames to %s (expected coincidence yield %.4f)\n",
                frames.size(), cfg.frame_width, cfg.frame_height, out_path.c_str(),
                es::expected_coincidence_yield(cfg.pair_rate, cfg.single_rate_a,
                                               cfg.single_rate_b));
    return 0;
}

int cmd_frames_detect(const std::string& cfg_path, const std::string& in_path,
                      const std::string& out_path) {
    es::RunConfig cfg = es::load_config(cfg_path);
    std::uint64_t digest = es::config_digest(cfg);
    es::FrameStackHeader header;
    std::vector<es::Frame> frames = es::read_frames(in_path, &header);
    warn_digest(in_path, header.digest, digest);
    if (header.width != cfg.frame_width || header.height != cfg.frame_height)
        es::fail(es::ErrorCategory::Input,
                 in_path + ": frame dimensions do not match the configuration");

    es::DetectOptions dopts;
    dopts.threshold_multiple = cfg.threshold_multiple;
    dopts.fit_radius = cfg.fit_radius;
    dopts.min_pixels_above = cfg.min_pixels_above;
    es::FrameTallies tallies;
    std::vector<es::CoincidenceEvent> events =
        es::frames_to_events(frames, cfg.camera(), dopts, cfg.region_a(), cfg.region_b(),
                             cfg.arm_calibration_a(), cfg.arm_calibration_b(), &tallies);
    es::write_events(out_path, events, cfg.frames_basis, digest, header.seed);
    double expected = es::expected_coincidence_yield(cfg.pair_rate, cfg.single_rate_a,
                                                     cfg.single_rate_b);
    std::printf("%" PRIu64 " frames -> %" PRIu64
                " events (yield %.4f, expected %.4f)\n",
                tallies.frames, tallies.accepted,
                tallies.frames ? double(tallies.accepted) / double(tallies.frames) : 0.0,
                expected);
    std::printf("rejected: %" PRIu64 " empty-A, %" PRIu64 " multi-A, %" PRIu64
                " empty-B, %" PRIu64 " multi-B\n",
                tallies.none_a, tallies.multi_a, tallies.none_b, tallies.multi_b);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int cmd_report(const std::string& in_path) {
    es::ReportFile rf = es::read_report(in_path);
    std::fputs(es::summarize_report(rf).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"entropy-witness toolkit for high-dimensional biphoton coincidence data"};
    app.require_subcommand(1);

    std::string kernels_choice = "auto";
    app.add_option("--kernels", kernels_choice, "numeric backend: auto, scalar, avx2")
        ->check(CLI::IsMember({"auto", "scalar", "avx2"}));

    std::string config_path, out_path, in_path;
    std::string events_pos, events_mom, hist_pos, hist_mom, save_hist_pos, save_hist_mom;
    double k_min = 1.0, k_max = 20.0, q_min = 0.0, q_max = 1.0;
    std::size_t nk = 50, nq = 50;

    CLI::App* c_init = app.add_subcommand("init", "write a configuration with defaults");
    c_init->add_option("output", out_path, "path to write")->required();

    CLI::App* c_sim = app.add_subcommand(
        "simulate", "draw coincidence pairs in both bases, herald, write event files");
    c_sim->add_option("-c,--config", config_path, "run configuration")->required();
    c_sim->add_option("-o,--out-dir", out_path, "output directory")->default_val(".");

    CLI::App* c_ana = app.add_subcommand(
        "analyze", "estimate conditional entropies and evaluate the witnesses");
    c_ana->add_option("-c,--config", config_path, "run configuration")->required();
    c_ana->add_option("--events-pos", events_pos, "position-basis event file");
    c_ana->add_option("--events-mom", events_mom, "momentum-basis event file");
    c_ana->add_option("--hist-pos", hist_pos, "position-basis histogram file");
    c_ana->add_option("--hist-mom", hist_mom, "momentum-basis histogram file");
    c_ana->add_option("-o,--out", out_path, "report file to write")->required();
    c_ana->add_option("--save-hist-pos", save_hist_pos, "also write the binned position histogram");
    c_ana->add_option("--save-hist-mom", save_hist_mom, "also write the binned momentum histogram");

    CLI::App* c_map = app.add_subcommand(
        "witness-map", "sweep the analytic witnesses over Schmidt number and purity");
    c_map->add_option("-c,--config", config_path, "run configuration")->required();
    c_map->add_option("-o,--out", out_path, "map file to write")->required();
    c_map->add_option("--k-min", k_min, "smallest Schmidt number")->default_val(1.0);
    c_map->add_option("--k-max", k_max, "largest Schmidt number")->default_val(20.0);
    c_map->add_option("--nk", nk, "Schmidt-axis samples")->default_val(50);
    c_map->add_option("--q-min", q_min, "smallest correlated fraction")->default_val(0.0);
    c_map->add_option("--q-max", q_max, "largest correlated fraction")->default_val(1.0);
    c_map->add_option("--nq", nq, "purity-axis samples")->default_val(50);

    CLI::App* c_frames = app.add_subcommand("frames", "raw camera-frame front end");
    c_frames->require_subcommand(1);
    CLI::App* c_synth = c_frames->add_subcommand("synth", "render a synthetic frame stack");
    c_synth->add_option("-c,--config", config_path, "run configuration")->required();
    c_synth->add_option("-o,--out", out_path, "frame stack to write")->required();
    CLI::App* c_detect =
        c_frames->add_subcommand("detect", "localize photons and pair them into events");
    c_detect->add_option("-c,--config", config_path, "run configuration")->required();
    c_detect->add_option("-i,--in", in_path, "frame stack to read")->required();
    c_detect->add_option("-o,--out", out_path, "event file to write")->required();

    CLI::App* c_rep = app.add_subcommand("report", "pretty-print a witness report");
    c_rep->add_option("-i,--in", in_path, "report file to read")->required();

    try {
        app.parse(argc, argv);

        if (kernels_choice == "scalar")
            es::kernels::set_backend(es::kernels::Backend::Scalar);
        else if (kernels_choice == "avx2")
            es::kernels::set_backend(es::kernels::Backend::Avx2);
        else
            es::kernels::set_backend(es::kernels::Backend::Auto);

        if (app.got_subcommand(c_init)) return cmd_init(out_path);
        if (app.got_subcommand(c_sim)) return cmd_simulate(config_path, out_path);
        if (app.got_subcommand(c_ana))
            return cmd_analyze(config_path, events_pos, events_mom, hist_pos, hist_mom,
                               out_path, save_hist_pos, save_hist_mom);
        if (app.got_subcommand(c_map))
            return cmd_witness_map(config_path, out_path, k_min, k_max, nk, q_min, q_max, nq);
        if (app.got_subcommand(c_frames)) {
            if (c_frames->got_subcommand(c_synth)) return cmd_frames_synth(config_path, out_path);
            return cmd_frames_detect(config_path, in_path, out_path);
        }
        if (app.got_subcommand(c_rep)) return cmd_report(in_path);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const es::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
