"""Command-line front end.

    python -m optofeedback <command> --config PATH [--out DIR] [--seed N]
                           [--no-timestamp] [--jobs N]

Commands: spectrum, sweep, occupation, stability-map, calibrate,
oracle-compare. ``--config paper-defaults`` loads the built-in reference
configuration. Exit codes: 0 success, 1 configuration error, 2 numerical
failure, 3 instability guard.
"""
from __future__ import annotations

import argparse
import datetime
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analytic, fitting, linsolve, tdoracle
from .config import ConfigError, load
from .model import FeedbackFilter, NoiseBudget, ParameterError, ProbeTone, hz, to_hz

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNSTABLE = 0, 1, 2, 3

SUMMARY_COLUMNS = (
    "stable", "omega_eff_hz", "gamma_eff_hz", "fit_fwhm_hz", "area_lower", "area_upper",
    "n_T", "n_qba", "n_fb", "n_m",
)


class InstabilityGuard(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- output ----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def write_csv(path: Path, columns, rows, meta, timestamp=True):
    """Comma-separated table with ``# key = value`` metadata lines first."""
    lines = []
    if timestamp:
        lines.append(f"# timestamp = {datetime.datetime.now(datetime.timezone.utc).isoformat()}")
    for k, v in meta.items():
        lines.append(f"# {k} = {v}")
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def _meta(cfg, command, args, **extra):
    m = {"code_version": f"optofeedback {__version__}", "command": command}
    if args.seed is not None:
        m["seed"] = args.seed
    m.update({f"config.{k}": v for k, v in cfg.resolved().items()})
    m.update({k: _fmt(v) for k, v in extra.items()})
    return m


def _spectrum_rows(spec):
    return np.column_stack([to_hz(spec.omega), spec.values])


# -- shared computations --------------------------------------------------------


def _grid(device, probe, filt, grid_opts):
    return linsolve.default_grid(device, probe, filt, **grid_opts)


def summarize(device, probe, filt, noise, grid_opts=None):
    """Peak parameters, sideband areas and occupation split for one operating point.

    Unstable points return the damping with every other entry NaN.
    """
    grid_opts = grid_opts or {}
    stable, ge, we = linsolve.stability(device, probe, filt)
    row = dict.fromkeys(SUMMARY_COLUMNS, math.nan)
    row.update(stable=bool(stable), omega_eff_hz=to_hz(we), gamma_eff_hz=to_hz(ge))
    if not stable:
        return row
    tr = linsolve.solve_closed_loop(device, probe, filt, _grid(device, probe, filt, grid_opts))
    out = linsolve.output_spectrum(tr, noise)
    floor = noise.amplifier_noise + 0.5
    for side, c in (("lower", -1), ("upper", 1)):
        win = out.window(c * we - 20 * ge, c * we + 20 * ge)
        row[f"area_{side}"] = np.trapezoid(win.values - floor, win.omega) / (2 * math.pi)
    try:
        fit = fitting.fit_lorentzian(out, (we - 20 * ge, we + 20 * ge))
        row["fit_fwhm_hz"] = to_hz(fit.fwhm) if not fit.distorted else math.nan
    except fitting.FitError:
        pass
    b = linsolve.occupation_breakdown(tr, noise)
    row.update(n_T=b.n_T, n_qba=b.n_qba, n_fb=b.n_fb, n_m=b.n_m)
    return row


def _summary_task(args):
    device, probe, filt, noise, grid_opts = args
    return summarize(device, probe, filt, noise, grid_opts)


def _map(fn, tasks, jobs):
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))  # results come back in submission order
    return [fn(t) for t in tasks]


def _require_stable(device, probe, filt, label=""):
    stable, ge, we = linsolve.stability(device, probe, filt)
    if not stable:
        raise InstabilityGuard(
            f"closed loop unstable{label}: gamma_eff/2pi = {to_hz(ge):.6g} Hz "
            f"(pole at {to_hz(we):.9g} Hz); increase the feedback gain or adjust the phase"
        )
    return ge, we


# -- commands ---------------------------------------------------------------------


def cmd_spectrum(cfg, args):
    out = Path(args.out)
    grid_opts = cfg.grid
    points = []
    for i, gain in enumerate(cfg.gains):
        filt = FeedbackFilter(gain, cfg.phase)
        _require_stable(cfg.device, cfg.probe, filt, f" at A0/2pi = {to_hz(gain):.6g} Hz")
        points.append((i, gain, filt, cfg.noise_at(gain)))
    written = []
    rows = []
    for i, gain, filt, noise in points:
        tr = linsolve.solve_closed_loop(cfg.device, cfg.probe, filt,
                                        _grid(cfg.device, cfg.probe, filt, grid_opts))
        extra = {"gain_hz": to_hz(gain), "bath_occupation": noise.bath_occupation}
        for kind, spec in (("displacement", linsolve.displacement_spectrum(tr, noise)),
                           ("heterodyne", linsolve.output_spectrum(tr, noise))):
            meta = _meta(cfg, "spectrum", args, kind=kind, onesided="false", **extra)
            written.append(write_csv(out / f"{kind}_{i:02d}.csv", ("freq_hz", "value_quanta"),
                                     _spectrum_rows(spec), meta, not args.no_timestamp))
        row = summarize(cfg.device, cfg.probe, filt, noise, grid_opts)
        rows.append([to_hz(gain)] + [row[c] for c in SUMMARY_COLUMNS])
    written.append(write_csv(out / "summary.csv", ("gain_hz",) + SUMMARY_COLUMNS, rows,
                             _meta(cfg, "spectrum", args), not args.no_timestamp))
    return written


def _sweep_point(cfg, variable, value):
    """(probe, filter, noise) for one sweep value in user units."""
    probe, filt, noise = cfg.probe, cfg.filter, cfg.noise_at(cfg.filter.gain)
    if variable == "phase":
        filt = filt.with_phase(math.radians(value))
    elif variable == "gain":
        filt = filt.with_gain(hz(value))
        noise = cfg.noise_at(filt.gain)
    elif variable == "detuning":
        probe = replace(probe, detuning=hz(value), photon_number=None)
    elif variable == "power":
        pc = cfg.calibration.get("p_coeff")
        if pc is None:
            raise ConfigError("power sweep needs [calibration] p_coeff (Hz per W)")
        g_rsb = fitting.coupling_from_damping(hz(pc) * value, cfg.device.kappa, cfg.device.omega_m)
        G = fitting.transfer_coupling(float(g_rsb), probe.detuning, cfg.device)
        probe = ProbeTone(probe.detuning, G)
    elif variable == "feedback_detuning":
        if cfg.chain is None:
            raise ConfigError("feedback_detuning sweep needs a [chain] section")
        chain = replace(cfg.chain, detuning_f=hz(value))
        filt = analytic.feedback_chain_reduce(cfg.device, chain).as_filter()
    return probe, filt, noise


def cmd_sweep(cfg, args):
    if cfg.sweep is None:
        raise ConfigError(f"{cfg.source}: sweep needs a [sweep] section")
    sw = cfg.sweep
    values = sw.values()
    tasks = []
    for v in values:
        probe, filt, noise = _sweep_point(cfg, sw.variable, v)
        tasks.append((cfg.device, probe, filt, noise, cfg.grid))
    results = _map(_summary_task, tasks, args.jobs)
    rows = [[v] + [r[c] for c in SUMMARY_COLUMNS] for v, r in zip(values, results)]
    unit = {"phase": "deg", "gain": "hz", "detuning": "hz", "power": "w",
            "feedback_detuning": "hz"}[sw.variable]
    return [write_csv(Path(args.out) / "sweep.csv", (f"{sw.variable}_{unit}",) + SUMMARY_COLUMNS,
                      rows, _meta(cfg, "sweep", args, variable=sw.variable),
                      not args.no_timestamp)]


def cmd_occupation(cfg, args):
    rows = []
    for gain in cfg.gains:
        filt = FeedbackFilter(gain, cfg.phase)
        noise = cfg.noise_at(gain)
        _require_stable(cfg.device, cfg.probe, filt, f" at A0/2pi = {to_hz(gain):.6g} Hz")
        tr = linsolve.solve(cfg.device, cfg.probe, filt)
        b = linsolve.occupation_breakdown(tr, noise)
        closed = math.nan
        if cfg.probe.detuning == 0:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    closed = analytic.occupation_resonant(cfg.device, cfg.probe.coupling, filt,
                                                          noise).n_m
            except analytic.UnstableError:
                pass
        rows.append([to_hz(gain), noise.bath_occupation, b.n_T, b.n_qba, b.n_fb, b.n_m, closed])
    cols = ("gain_hz", "bath_occupation", "n_T", "n_qba", "n_fb", "n_m", "n_m_closed_form")
    return [write_csv(Path(args.out) / "occupation.csv", cols, rows,
                      _meta(cfg, "occupation", args), not args.no_timestamp)]


def _map_task(a):
    device, probe, filt = a
    stable, ge, we = linsolve.stability(device, probe, filt)
    return stable, ge, we


def cmd_stability_map(cfg, args):
    m = cfg.stability_map
    if m is None:
        raise ConfigError(f"{cfg.source}: stability-map needs a [map] section")
    phases = np.linspace(m["phase_start"], m["phase_stop"], m["phase_steps"])
    gains = np.linspace(m["gain_start"], m["gain_stop"], m["gain_steps"])
    pts = [(p, g) for p in phases for g in gains]
    tasks = [(cfg.device, cfg.probe, FeedbackFilter(hz(g), math.radians(p))) for p, g in pts]
    res = _map(_map_task, tasks, args.jobs)
    rows = [[p, g, bool(s), to_hz(ge), to_hz(we)] for (p, g), (s, ge, we) in zip(pts, res)]
    cols = ("phase_deg", "gain_hz", "stable", "gamma_eff_hz", "omega_eff_hz")
    return [write_csv(Path(args.out) / "stability_map.csv", cols, rows,
                      _meta(cfg, "stability-map", args), not args.no_timestamp)]


def _table(path, needed):
    try:
        cols, _ = fitting.read_table(path)
    except (OSError, fitting.FitError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    for c in needed:
        if c not in cols or cols[c].dtype == object:
            raise ConfigError(f"{path}: needs numeric column '{c}'")
    return cols


def cmd_calibrate(cfg, args):
    cal = cfg.calibration
    if not cal or not ({"power_file", "gain_file"} & cal.keys()):
        raise ConfigError(f"{cfg.source}: calibrate needs [calibration] power_file or gain_file")
    rows = []
    dev = cfg.device
    if "power_file" in cal:
        cols = _table(cal["power_file"], ("power_w", "gamma_opt_hz"))
        model, g_rsb = fitting.calibrate_power(cols["power_w"], hz(cols["gamma_opt_hz"]), dev)
        rows.append(["P_coeff", to_hz(model.P_coeff), "hz_per_w"])
        for p, g in zip(cols["power_w"], g_rsb):
            rows.append([f"G_rsb@{p:.6g}W", to_hz(g), "hz"])
            G = fitting.transfer_coupling(g, cfg.probe.detuning, dev)
            rows.append([f"G@{p:.6g}W", to_hz(G), "hz"])
    if "gain_file" in cal:
        cols = _table(cal["gain_file"], ("gain", "linewidth_hz"))
        G = hz(cal["coupling"]) if "coupling" in cal else cfg.probe.coupling
        model = fitting.calibrate_gain(cols["gain"], hz(cols["linewidth_hz"]), G, dev,
                                       probe=cal["probe"])
        rows.append(["L_coeff", to_hz(model.L_coeff), "hz_per_gain"])
        rows.append(["A0_per_gain", to_hz(float(model.electronic_gain_map(1.0))), "hz_per_gain"])
        if cal["probe"] == "blue":
            gc = fitting.critical_gain(model, dev.gamma)
            rows.append(["critical_gain", gc, "gain"])
            rows.append(["critical_A0", to_hz(float(model.electronic_gain_map(gc))), "hz"])
    return [write_csv(Path(args.out) / "calibration.csv", ("quantity", "value", "unit"), rows,
                      _meta(cfg, "calibrate", args), not args.no_timestamp)]


def cmd_oracle_compare(cfg, args):
    o = cfg.oracle
    seed = args.seed if args.seed is not None else 0
    try:
        report, res = tdoracle.cross_validate(
            cfg.device, cfg.probe, cfg.filter, cfg.noise_at(cfg.filter.gain), seed=seed,
            linewidths=o.get("linewidths", 1e4), tolerance=o.get("tolerance", 0.05),
            segment_linewidths=o.get("segment_linewidths", 20.0),
            correlator_scale=o.get("correlator_scale", 1.0), dt=o.get("dt"),
            duration=o.get("duration"),
        )
    except tdoracle.RunTooShort as exc:
        raise NumericalFailure(str(exc)) from None
    except tdoracle.SimulationDiverged as exc:
        raise InstabilityGuard(str(exc)) from None
    rows = [[c.observable, c.linsolve, c.tdoracle, c.rel_dev, c.tolerance,
             "pass" if c.ok else "FAIL"] for c in report]
    path = write_csv(Path(args.out) / "oracle_compare.csv",
                     ("observable", "linsolve", "tdoracle", "rel_dev", "tolerance", "result"), rows,
                     _meta(cfg, "oracle-compare", args, sim_hash=res.meta["hash"],
                           delay_taps=res.meta["delay_taps"]),
                     not args.no_timestamp)
    files = [path]
    n_series = int(o.get("save_series", 0))
    if n_series > 0:
        # first n_series samples of the simulated record
        files.append(res.save_csv(Path(args.out) / "oracle_series.csv", max_samples=n_series))
    for r in rows:
        print(f"{r[0]:<11} linsolve={r[1]:.6g} tdoracle={r[2]:.6g} dev={r[3]:+.2%} {r[5]}")
    bad = [r[0] for r in rows if r[5] != "pass"]
    if bad:
        raise NumericalFailure("oracle mismatch in " + ", ".join(bad))
    return files


COMMANDS = {
    "spectrum": cmd_spectrum,
    "sweep": cmd_sweep,
    "occupation": cmd_occupation,
    "stability-map": cmd_stability_map,
    "calibrate": cmd_calibrate,
    "oracle-compare": cmd_oracle_compare,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="optofeedback", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI file or 'paper-defaults'")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-timestamp", action="store_true")
        p.add_argument("--jobs", type=int, default=1)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        files = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityGuard as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (NumericalFailure, ArithmeticError, linsolve.GridError, fitting.FitError,
            tdoracle.SimulationError, ParameterError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
