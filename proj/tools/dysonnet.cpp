// dysonnet: training, sweeps, benchmarks, validation and exact diagonalization.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dysonnet/checkpoint.hpp"
#include "dysonnet/config.hpp"
#include "dysonnet/evaluate.hpp"
#include "dysonnet/harness.hpp"

namespace fs = std::filesystem;
using namespace dyson;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumerical = 2, kValidation = 3 };

constexpr const char* kSchema = "# schema_version=1";

std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

class Csv {
public:
    Csv(const fs::path& path, const std::vector<std::string>& header) : f_(path) {
        if (!f_) throw ConfigError("cannot write '" + path.string() + "'");
        f_ << kSchema << "\n";
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) f_ << (i ? "," : "") << cells[i];
        f_ << "\n";
        f_.flush();
    }

private:
    std::ofstream f_;
};

fs::path output_dir(const std::string& dir) {
    const char* root = std::getenv("DYSONNET_OUTPUT_ROOT");
    fs::path p = root && *root ? fs::path(root) / dir : fs::path(dir);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p);
    if (!f) throw ConfigError("cannot write '" + p.string() + "'");
    f << s;
}

// Generic plotting script emitted next to every benchmark CSV: log-log plot of the
// listed columns against the first one.
const char* kPlotScript = R"(#!/usr/bin/env python3
import sys
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

csv = sys.argv[1] if len(sys.argv) > 1 else "%CSV%"
cols = sys.argv[2:] or %COLS%
df = pd.read_csv(csv, comment="#")
x = df.columns[0]
for c in cols:
    plt.loglog(df[x], df[c], "o-", label=c)
plt.xlabel(x)
plt.ylabel("seconds")
plt.legend()
plt.grid(True, which="both", alpha=0.3)
out = csv.rsplit(".", 1)[0] + ".png"
plt.savefig(out, dpi=150, bbox_inches="tight")
print(out)
)";

void emit_plot_script(const fs::path& dir, const std::string& csv, const std::vector<std::string>& cols) {
    std::string s = kPlotScript;
    std::string list = "[";
    for (size_t i = 0; i < cols.size(); ++i) list += (i ? ", \"" : "\"") + cols[i] + "\"";
    list += "]";
    s.replace(s.find("%CSV%"), 5, csv);
    s.replace(s.find("%COLS%"), 6, list);
    const fs::path p = dir / ("plot_" + fs::path(csv).stem().string() + ".py");
    write_text(p, s);
    fs::permissions(p, fs::perms::owner_exec, fs::perm_options::add);
}

std::vector<std::string> metrics_header() {
    return {"iter", "energy_mean", "energy_stderr", "variance", "v_score", "acceptance_rate", "throughput", "lr", "diag_shift",
            "wall_ms", "cg_iterations", "step_length", "measured_step", "backtracks"};
}

std::vector<std::string> metrics_row(const MetricsRow& r, bool deterministic) {
    return {std::to_string(r.iter), num(r.energy.mean), num(r.energy.stderr_), num(r.energy.variance), num(r.energy.v_score),
            num(r.acceptance), num(r.throughput), num(r.lr), num(r.shift), num(deterministic ? 0.0 : r.wall_ms),
            std::to_string(r.cg_iterations), num(r.fs_length), num(r.measured_step), std::to_string(r.backtracks)};
}

struct Common {
    std::string output;
    int threads = 0;
    bool deterministic = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-o,--output", c.output, "output directory (relative to $DYSONNET_OUTPUT_ROOT)");
    sub->add_option("--threads", c.threads, "worker threads (default: from config)")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", c.deterministic, "single-threaded reductions; wall_ms written as 0");
}

void apply_common(RunConfig& rc, const Common& c) {
    if (!c.output.empty()) rc.output_dir = c.output;
    if (c.threads > 0) rc.train.threads = c.threads;
    if (c.deterministic) rc.train.threads = 1;
}

// ---- train -------------------------------------------------------------------------------

struct TrainArgs {
    std::string config, init;
    int iterations = -1;
    Common common;
};

int cmd_train(const TrainArgs& a) {
    RunConfig rc = load_config(a.config);
    apply_common(rc, a.common);
    if (a.iterations >= 0) rc.train.optimizer.iterations = a.iterations;
    rc.train.validate();
    const fs::path dir = output_dir(rc.output_dir);
    write_text(dir / "config.resolved.yaml", resolved_snapshot(rc));
    const TrainConfig& tc = rc.train;
    Model m0 = a.init.empty() ? initial_model(tc) : load_checkpoint(a.init);
    if (m0.cfg.layers != tc.model.layers || m0.cfg.d != tc.model.d || m0.cfg.d_out != tc.model.d_out)
        throw ConfigError("--init: checkpoint architecture does not match the model block");

    Csv metrics(dir / "metrics.csv", metrics_header());
    std::unique_ptr<Csv> timings;
    if (a.common.deterministic) timings = std::make_unique<Csv>(dir / "timings.csv", std::vector<std::string>{"iter", "wall_ms"});
    const auto res = train(tc, m0, [&](const MetricsRow& r, const Model&) {
        metrics.row(metrics_row(r, a.common.deterministic));
        if (timings) timings->row({std::to_string(r.iter), num(r.wall_ms)});
        std::fprintf(stderr, "iter %4d  E = %.8f +- %.2e  var %.3e  acc %.2f  lr %.3g\n", r.iter, r.energy.mean,
                     r.energy.stderr_, r.energy.variance, r.acceptance, r.lr);
    });
    save_checkpoint((dir / "checkpoint.json").string(), res.model);
    if (res.aborted) {
        std::fprintf(stderr, "training aborted: %s (last good checkpoint written)\n", res.abort_reason.c_str());
        return kNumerical;
    }

    // observables from one fresh batch of the final state
    PreparedModel pm(res.model, tc.hamiltonian.n);
    ChainEnsemble ens(tc.hamiltonian, tc.sampling, tc.seed + 1);
    const auto batch = ens.draw(pm, tc.threads);
    const auto obs = measure_observables(batch.configs);
    Csv oc(dir / "observables.csv", {"quantity", "r", "value", "stderr"});
    oc.row({"m2", "", num(obs.m2), num(obs.m2_err)});
    for (size_t r = 0; r < obs.corr.size(); ++r) oc.row({"corr", std::to_string(r), num(obs.corr[r]), num(obs.corr_err[r])});
    std::printf("final energy %.10f +- %.2e (v-score %.3e); outputs in %s\n", res.rows.back().energy.mean,
                res.rows.back().energy.stderr_, res.rows.back().energy.v_score, dir.string().c_str());
    return kOk;
}

// ---- sweep -------------------------------------------------------------------------------

struct SweepArgs {
    std::string config;
    int runs = 0;
    int iterations = -1;
    Common common;
};

int cmd_sweep(const SweepArgs& a) {
    RunConfig rc = load_config(a.config);
    apply_common(rc, a.common);
    if (a.runs > 0) rc.sweep.runs = a.runs;
    if (a.iterations >= 0) rc.train.optimizer.iterations = a.iterations;
    rc.train.validate();
    const auto& H0 = rc.train.hamiltonian;
    if (rc.sweep.fidelity && H0.n > 14)
        throw ConfigError(a.config + ": sweep.fidelity: ED-backed sweeps need hamiltonian.N <= 14");
    const fs::path dir = output_dir(rc.output_dir);
    write_text(dir / "config.resolved.yaml", resolved_snapshot(rc));

    std::vector<HamiltonianSpec> grid;
    if (H0.kind == ModelKind::TFIM_LR) {
        const auto Js = rc.sweep.J.empty() ? std::vector<double>{H0.J} : rc.sweep.J;
        const auto as = rc.sweep.alpha.empty() ? std::vector<double>{H0.alpha} : rc.sweep.alpha;
        for (double J : Js)
            for (double al : as) {
                HamiltonianSpec H = H0;
                H.J = J;
                H.alpha = al;
                grid.push_back(H);
            }
    } else {
        const auto js = rc.sweep.j2_over_j1.empty() ? std::vector<double>{H0.j2_over_j1} : rc.sweep.j2_over_j1;
        for (double j2 : js) {
            HamiltonianSpec H = H0;
            H.j2_over_j1 = j2;
            grid.push_back(H);
        }
    }

    Csv out(dir / "grid.csv", {"J", "alpha", "J2_over_J1", "energy", "energy_ed", "rel_error", "infidelity", "v_score",
                               "degeneracy", "runs", "aborted_runs"});
    bool any_abort = false;
    for (const auto& H : grid) {
        struct Run {
            double energy, v_score;
            ExactComparison cmp;
        };
        std::vector<Run> runs;
        int aborted = 0;
        GroundStateResult gs;
        if (rc.sweep.fidelity) gs = ground_states(H, kEdStates);
        for (int k = 0; k < rc.sweep.runs; ++k) {
            TrainConfig tc = rc.train;
            tc.hamiltonian = H;
            tc.seed = rc.train.seed + static_cast<uint64_t>(k);
            const auto res = train(tc, initial_model(tc));
            if (res.aborted || res.rows.empty()) {
                ++aborted;
                continue;
            }
            Run r{res.rows.back().energy.mean, res.rows.back().energy.v_score, {}};
            if (rc.sweep.fidelity) r.cmp = compare_with_ed(tc, res.model, gs);
            runs.push_back(r);
        }
        any_abort = any_abort || aborted;
        if (runs.empty()) {
            out.row({num(H.J), num(H.alpha), num(H.j2_over_j1), "nan", "nan", "nan", "nan", "nan", "0",
                     std::to_string(rc.sweep.runs), std::to_string(aborted)});
            continue;
        }
        // median run by energy error when ED is available, by energy otherwise
        std::sort(runs.begin(), runs.end(), [&](const Run& x, const Run& y) {
            return rc.sweep.fidelity ? x.cmp.rel_error < y.cmp.rel_error : x.energy < y.energy;
        });
        const Run& med = runs[runs.size() / 2];
        const bool ed = rc.sweep.fidelity;
        out.row({num(H.J), num(H.alpha), num(H.j2_over_j1), num(ed ? med.cmp.energy : med.energy),
                 ed ? num(med.cmp.energy_ed) : "", ed ? num(med.cmp.rel_error) : "", ed ? num(med.cmp.infidelity) : "",
                 num(med.v_score), ed ? std::to_string(med.cmp.degeneracy) : "", std::to_string(rc.sweep.runs),
                 std::to_string(aborted)});
        std::fprintf(stderr, "J=%g alpha=%g J2/J1=%g  rel_error %s  infidelity %s\n", H.J, H.alpha, H.j2_over_j1,
                     ed ? num(med.cmp.rel_error).c_str() : "-", ed ? num(med.cmp.infidelity).c_str() : "-");
    }
    std::printf("grid written to %s\n", (dir / "grid.csv").string().c_str());
    return any_abort ? kNumerical : kOk;
}

// ---- benchmarks ----------------------------------------------------------------------------

struct BenchArgs {
    std::vector<int> ns;
    int reps = 11;
    int sweeps = 5;
    int burn_in = 20;
    uint64_t seed = 1;
    std::string mode = "adaptive_buffer";
    std::string checkpoint;
    int spacing = 10;
    ModelConfig model;
    Common common;
};

void add_model_flags(CLI::App* sub, BenchArgs& b) {
    sub->add_option("--layers", b.model.layers, "network depth")->check(CLI::PositiveNumber);
    sub->add_option("--d", b.model.d, "embedding dimension")->check(CLI::PositiveNumber);
    sub->add_option("--seed", b.seed, "parameter / configuration seed");
    sub->add_option("--reps", b.reps, "timed repetitions (median reported)")->check(CLI::PositiveNumber);
    add_common(sub, b.common);
}

int cmd_bench_update(BenchArgs& b) {
    if (b.ns.empty()) b.ns = {256, 512, 1024, 2048, 4096};
    const fs::path dir = output_dir(b.common.output.empty() ? "bench" : b.common.output);
    Csv out(dir / "bench_update.csv", {"n", "full_median_s", "full_p90_s", "delta_median_s", "delta_p90_s", "build_median_s",
                                       "build_p90_s"});
    std::vector<double> n, full, delta, build, nlogn;
    for (int N : b.ns) {
        const auto r = harness::bench_update(b.model, N, b.reps, b.seed);
        out.row({std::to_string(N), num(r.full_forward.median), num(r.full_forward.p90), num(r.abacus_delta.median),
                 num(r.abacus_delta.p90), num(r.cache_build.median), num(r.cache_build.p90)});
        n.push_back(N);
        full.push_back(r.full_forward.median);
        delta.push_back(r.abacus_delta.median);
        build.push_back(r.cache_build.median);
        nlogn.push_back(N * std::log2(static_cast<double>(N)));
        std::fprintf(stderr, "N=%5d  full %.3e s  delta %.3e s  build %.3e s\n", N, full.back(), delta.back(), build.back());
    }
    emit_plot_script(dir, "bench_update.csv", {"full_median_s", "delta_median_s", "build_median_s"});
    if (n.size() >= 2) {
        std::printf("delta time ratio (largest / smallest N): %.2f\n", delta.back() / delta.front());
        std::printf("full forward ratio: %.2f, log-log slope %.2f\n", full.back() / full.front(), harness::loglog_slope(n, full));
        std::printf("cache build vs N log N: max residual %.1f%%\n", 100.0 * harness::fit_proportional(nlogn, build).max_residual);
    }
    return kOk;
}

int cmd_bench_estimator(BenchArgs& b) {
    if (b.ns.empty()) b.ns = {128, 256, 512, 1024, 2048};
    const fs::path dir = output_dir(b.common.output.empty() ? "bench" : b.common.output);
    Csv out(dir / "bench_estimator.csv", {"n", "elements", "abacus_per_element_s", "full_per_element_s", "speedup"});
    for (int N : b.ns) {
        const auto r = harness::bench_estimator(b.model, N, b.reps, b.seed);
        out.row({std::to_string(N), std::to_string(r.elements), num(r.abacus_per_element), num(r.full_per_element),
                 num(r.speedup)});
        std::fprintf(stderr, "N=%5d  abacus %.3e s/elem  full %.3e s/elem  speedup %.1fx\n", N, r.abacus_per_element,
                     r.full_per_element, r.speedup);
    }
    emit_plot_script(dir, "bench_estimator.csv", {"abacus_per_element_s", "full_per_element_s"});
    return kOk;
}

int cmd_bench_sampler(BenchArgs& b) {
    if (b.ns.empty()) b.ns = {128, 256, 512, 1024};
    const fs::path dir = output_dir(b.common.output.empty() ? "bench" : b.common.output);
    const Model m = b.checkpoint.empty() ? harness::random_params(b.model, b.seed, 0.05) : load_checkpoint(b.checkpoint);
    SamplerConfig sc;
    sc.mode = sampler_mode_from_string(b.mode);
    sc.spacing = b.spacing;
    Csv out(dir / "bench_sampler.csv", {"n", "mode", "throughput", "ideal", "ratio", "acceptance", "seconds_per_sweep"});
    for (int N : b.ns) {
        const auto r = harness::bench_sampler(m, N, sc, b.sweeps, b.seed, b.burn_in);
        out.row({std::to_string(N), r.mode, num(r.throughput.measured), num(r.throughput.ideal), num(r.throughput.ratio),
                 num(r.acceptance), num(r.seconds_per_sweep)});
        std::fprintf(stderr, "N=%5d  %s  throughput %.2f / ideal %.2f (%.0f%%)\n", N, r.mode.c_str(), r.throughput.measured,
                     r.throughput.ideal, 100.0 * r.throughput.ratio);
    }
    emit_plot_script(dir, "bench_sampler.csv", {"seconds_per_sweep"});
    return kOk;
}

// ---- validate ----------------------------------------------------------------------------

struct ValidateArgs {
    bool quick = false;
    bool corrupt = false;
    uint64_t seed = 7;
    Common common;
};

int cmd_validate(const ValidateArgs& a) {
    harness::ValidationOptions o;
    o.quick = a.quick;
    o.corrupt_cache = a.corrupt;
    o.seed = a.seed;
    const auto results = harness::run_validation(o);
    nlohmann::ordered_json rep;
    rep["schema_version"] = 1;
    bool ok = true;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : results) {
        ok = ok && r.pass;
        arr.push_back({{"suite", r.name}, {"pass", r.pass}, {"max_error", r.max_error}, {"tolerance", r.tolerance},
                       {"checks", r.checks}, {"detail", r.detail}});
        std::printf("%-20s %s  max_error %.3e  (tolerance %.1e, %ld checks)\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.max_error, r.tolerance, r.checks);
    }
    rep["pass"] = ok;
    rep["suites"] = arr;
    const fs::path dir = output_dir(a.common.output.empty() ? "validate" : a.common.output);
    write_text(dir / "validate.json", rep.dump(2) + "\n");
    return ok ? kOk : kValidation;
}

// ---- ed ------------------------------------------------------------------------------------

struct EdArgs {
    std::string config, kind = "TFIM_LR";
    HamiltonianSpec H;
    int k = kEdStates;
};

int cmd_ed(EdArgs& a) {
    HamiltonianSpec H = a.H;
    if (!a.config.empty()) {
        H = load_config(a.config).train.hamiltonian;
    } else if (a.kind == "J1J2") {
        H.kind = ModelKind::J1J2;
    } else if (a.kind != "TFIM_LR") {
        throw ConfigError("--kind: expected TFIM_LR or J1J2, got '" + a.kind + "'");
    }
    H.validate();
    if (H.n > kMaxEdSites) throw ConfigError("--n: exact diagonalization is limited to " + std::to_string(kMaxEdSites) + " sites");
    const auto gs = ground_states(H, a.k);
    std::printf("# %s N=%d J=%g h=%g alpha=%g J2/J1=%g\n", to_string(H.kind).c_str(), H.n, H.J, H.h, H.alpha, H.j2_over_j1);
    for (size_t i = 0; i < gs.energies.size(); ++i)
        std::printf("E[%zu] = %.12f  (residual %.1e)\n", i, gs.energies[i], gs.residuals[i]);
    std::printf("ground-state degeneracy %zu\n", gs.ground_group().size());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DysonNet variational Monte Carlo with cached local updates"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a state from a YAML config");
    train_cmd->add_option("config", ta.config, "run configuration")->required();
    train_cmd->add_option("--init", ta.init, "start from a checkpoint instead of a fresh initialization");
    train_cmd->add_option("--iterations", ta.iterations, "override optimizer.iterations");
    add_common(train_cmd, ta.common);

    SweepArgs sa;
    auto* sweep_cmd = app.add_subcommand("sweep", "train over a parameter grid with ED-backed errors");
    sweep_cmd->add_option("config", sa.config, "run configuration with a sweep block")->required();
    sweep_cmd->add_option("--runs", sa.runs, "independent runs per point (median reported)");
    sweep_cmd->add_option("--iterations", sa.iterations, "override optimizer.iterations");
    add_common(sweep_cmd, sa.common);

    BenchArgs bu, be, bs;
    auto* bu_cmd = app.add_subcommand("bench-update", "full forward vs cached update vs cache build timings");
    bu_cmd->add_option("--ns", bu.ns, "system sizes")->delimiter(',');
    add_model_flags(bu_cmd, bu);
    auto* be_cmd = app.add_subcommand("bench-estimator", "local-energy cost per connected element");
    be_cmd->add_option("--ns", be.ns, "system sizes")->delimiter(',');
    add_model_flags(be_cmd, be);
    auto* bs_cmd = app.add_subcommand("bench-sampler", "screened sampler throughput vs N");
    bs_cmd->add_option("--ns", bs.ns, "system sizes")->delimiter(',');
    bs_cmd->add_option("--sweeps", bs.sweeps, "timed sweeps per size")->check(CLI::PositiveNumber);
    bs_cmd->add_option("--burn-in", bs.burn_in, "untimed sweeps before measuring")->check(CLI::NonNegativeNumber);
    bs_cmd->add_option("--mode", bs.mode, "exact_bound, adaptive_buffer or exact_ratio");
    bs_cmd->add_option("--spacing", bs.spacing, "block spacing in tokens")->check(CLI::PositiveNumber);
    bs_cmd->add_option("--checkpoint", bs.checkpoint, "sample a trained state instead of random parameters");
    add_model_flags(bs_cmd, bs);

    ValidateArgs va;
    auto* val_cmd = app.add_subcommand("validate", "run the exactness and consistency suites");
    val_cmd->add_flag("--quick", va.quick, "smaller suites");
    val_cmd->add_flag("--corrupt-cache", va.corrupt, "negative control: perturb every link cache");
    val_cmd->add_option("--seed", va.seed, "suite seed");
    add_common(val_cmd, va.common);

    EdArgs ea;
    auto* ed_cmd = app.add_subcommand("ed", "exact ground states of a small chain");
    ed_cmd->add_option("config", ea.config, "take the hamiltonian block from a config");
    ed_cmd->add_option("--kind", ea.kind, "TFIM_LR or J1J2");
    ed_cmd->add_option("--n", ea.H.n, "sites");
    ed_cmd->add_option("--J", ea.H.J, "coupling");
    ed_cmd->add_option("--field", ea.H.h, "transverse field h");
    ed_cmd->add_option("--alpha", ea.H.alpha, "decay exponent");
    ed_cmd->add_option("--j2", ea.H.j2_over_j1, "J2 / J1");
    ed_cmd->add_option("--k", ea.k, "number of states")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfig;
    }

    try {
        if (*train_cmd) return cmd_train(ta);
        if (*sweep_cmd) return cmd_sweep(sa);
        if (*bu_cmd) return cmd_bench_update(bu);
        if (*be_cmd) return cmd_bench_estimator(be);
        if (*bs_cmd) return cmd_bench_sampler(bs);
        if (*val_cmd) return cmd_validate(va);
        if (*ed_cmd) return cmd_ed(ea);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const DomainError& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return kConfig;
    } catch (const ResourceError& e) {
        std::fprintf(stderr, "too large: %s\n", e.what());
        return kConfig;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kNumerical;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kConfig;
    }
    return kOk;
}
