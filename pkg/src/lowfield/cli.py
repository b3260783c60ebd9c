"""``lowfield`` command line: magnet design, shimming, pulse simulation, signal simulation, reconstruction.

Every command takes a JSON config layered over packaged defaults, plus
``--set key.sub=value`` overrides, and writes ``resolved_config.json``
into its output directory.  Re-running with ``--config`` pointing at that
file replays the run.

Exit codes: 0 success, 2 usage or config error, 3 I/O or format error,
4 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import DivergenceError, FormatError, RankDeficiencyError, SingularityError, TimingError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "LOWFIELD_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def load_default(name):
    text = resources.files("lowfield").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, item):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return cfg


def resolve_config(command, config_path=None, overrides=(), seed=None):
    cfg = load_default(command.replace("-", "_"))
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc
        user.pop("_meta", None)
        cfg = deep_merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _output_dir(args):
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "lowfield_out")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _say(msg):
    print(msg, flush=True)


def _linspace(spec, name):
    try:
        return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{name} needs start, stop and num") from exc


# ---------------------------------------------------------------- magnet

def _sphere(spec):
    from .fieldmap import Sphere

    return Sphere(tuple(spec.get("center", (0.0, 0.0, 0.0))), float(spec["radius"]))


def _geometry(spec):
    from .magnet_opt import HalbachGeometry

    if spec == "desk":
        return HalbachGeometry.desk()
    if spec == "prototype":
        return HalbachGeometry.prototype()
    if isinstance(spec, dict):
        return HalbachGeometry.from_dict(spec)
    raise ConfigError(f"geometry must be 'desk', 'prototype' or a geometry object, got {spec!r}")


def cmd_design_magnet(cfg, out):
    from .fieldmap import Grid3
    from .io import write_csv, write_fmap
    from .magnet_opt import FitnessTargets, GAParams, design_field, run_ga

    geom = _geometry(cfg["geometry"])
    roi = _sphere(cfg["roi"])
    targets = FitnessTargets(**cfg["targets"])
    ga = dict(cfg["ga"])
    if "seed" in cfg:
        ga["seed"] = cfg["seed"]
    params = GAParams(**ga)
    rem = {k: float(v) for k, v in cfg["remanence"].items()}
    best, report, history = run_ga(geom, roi, targets, params, float(cfg["spacing"]), rem)
    _write_json(out / "geometry.json", geom.to_dict())
    _write_json(out / "chromosome.json", {"alleles": best.to_dict(), "counts": best.counts()})
    _write_json(out / "fitness.json", report.__dict__)
    write_csv(out / "history.csv", ["generation", "best_score", "mean_score"], history)
    fg = cfg["field_grid"]
    c = np.asarray(roi.center)
    grid = Grid3.centered(fg["shape"], fg["spacing"])
    grid = Grid3(*grid.shape, *grid.spacing, origin=tuple(np.asarray(grid.origin) + c))
    fmap = design_field(geom, best, grid, targets.component, rem)
    write_fmap(out / "field.fmap", fmap)
    _say(f"mean B0 {report.mean_b0 * 1e3:.3f} mT, monotonic {report.monotonic}, range "
         f"{report.field_range * 1e3:.3f} mT, score {report.score:.6g}, feasible {report.feasible}")
    return EXIT_OK


# ---------------------------------------------------------------- shim

def _shim_sites(spec):
    if isinstance(spec, dict) and "ring" in spec:
        r = spec["ring"]
        az = 2 * np.pi * np.arange(int(r["n_azimuth"])) / int(r["n_azimuth"])
        return np.array([(r["radius"] * np.cos(a), r["radius"] * np.sin(a), z) for z in r["z"] for a in az])
    arr = np.asarray(spec, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ConfigError("sites must be a ring spec or a list of [x, y, z]")
    return arr


def cmd_shim(cfg, out):
    from .fieldmap import LinearFit, linear_fit
    from .io import read_fmap, write_fmap
    from .magnet_opt import shim_field, solve_shims

    if not cfg.get("base_map"):
        raise ConfigError("shim requires base_map (FMAP path)")
    base_path = Path(cfg["base_map"])
    if not base_path.exists():
        raise FileNotFoundError(f"base map not found: {base_path}")
    base = read_fmap(base_path)
    roi = _sphere(cfg["roi"]) if cfg.get("roi") else None
    if cfg.get("target"):
        t = cfg["target"]
        target = LinearFit(float(t["b0"]), np.asarray(t["g"], dtype=float), 0.0, roi)
    else:
        target = linear_fit(base, roi)
    sites = _shim_sites(cfg["sites"])
    layout = solve_shims(base, sites, cfg["bounds"], target, roi, cfg["component"], float(cfg["tol"]),
                         int(cfg["max_iter"]))
    shimmed = base.with_values(base.values + shim_field(layout, base.grid, cfg["component"]).values,
                               label=f"{base.label} shimmed")
    write_fmap(out / "shimmed.fmap", shimmed)
    _write_json(out / "shim_layout.json", layout.to_dict())
    report = {"rmse_before": layout.rmse_before, "rmse_after": layout.rmse_after,
              "reduction": 1 - layout.rmse_after / layout.rmse_before if layout.rmse_before > 0 else 0.0,
              "iterations": layout.iterations,
              "target": {"b0": target.b0, "g": target.g.tolist()}}
    _write_json(out / "shim_report.json", report)
    _say(f"RMSE before {layout.rmse_before:.6e} T")
    _say(f"RMSE after  {layout.rmse_after:.6e} T")
    return EXIT_OK


# ---------------------------------------------------------------- pulses

def _pulse(spec):
    from .rf_sim import make_hard, make_ideal, make_wurst

    kind = spec.get("kind")
    if kind == "wurst":
        return make_wurst(float(spec["duration"]), float(spec["sweep_bw"]), int(spec.get("order", 40)),
                          spec.get("peak_b1"), float(spec.get("dt", 1e-6)), spec.get("role", "excitation"))
    if kind == "hard":
        p = make_hard(float(spec["duration"]), float(spec["flip"]), float(spec.get("dt", 1e-6)))
        if spec.get("peak_b1") is not None:
            p = p.scaled(float(spec["peak_b1"]) / p.peak_b1 if p.peak_b1 > 0 else 0.0)
        return p
    if kind == "ideal":
        return make_ideal(float(spec["flip"]), float(spec.get("phase", 0.0)))
    raise ConfigError(f"pulse kind must be wurst, hard or ideal, got {kind!r}")


def cmd_pulse_profile(cfg, out):
    from .io import write_csv, write_pgm, write_png
    from .rf_sim import excitation_profile, refocusing_profile, write_profile, write_pulse_csv

    b1 = _linspace(cfg["b1_scales"], "b1_scales")
    offs = _linspace(cfg["offsets"], "offsets")
    prov = {}
    for name, spec in cfg["pulses"].items():
        pulse = _pulse(spec)
        which = spec.get("profile", "excitation")
        if which == "excitation":
            prof = excitation_profile(pulse, b1, offs)
        elif which == "refocusing":
            prof = refocusing_profile(pulse, b1, offs)
        else:
            raise ConfigError(f"profile must be excitation or refocusing, got {which!r}")
        write_profile(out / f"{name}_profile.fmap", prof)
        window = (0.0, 1.0)
        # rows = B1 scale (top = largest), columns = offset
        raster = prof.values[::-1, :]
        write_pgm(out / f"{name}_profile.pgm", raster, window)
        write_png(out / f"{name}_profile.png", raster, window)
        nominal = prof.row(1.0)
        write_csv(out / f"{name}_nominal.csv", ["offset_hz", prof.quantity], zip(offs, nominal))
        write_pulse_csv(out / f"{name}_waveform.csv", pulse)
        hw = prof.band_halfwidth(float(cfg.get("threshold", 0.9)))
        prov[name] = {"pulse": pulse.metadata(), "quantity": prof.quantity, "window": list(window),
                      "band_halfwidth_hz": hw}
        _say(f"{name}: peak B1 {pulse.peak_b1 * 1e6:.2f} uT, {prof.quantity} >= {cfg.get('threshold', 0.9)} "
             f"half-width {hw / 1e3:.2f} kHz")
    _write_json(out / "provenance.json", prov)
    return EXIT_OK


def cmd_echo_train(cfg, out):
    from .io import write_csv
    from .rf_sim import phase_linearity_rms, simulate_echo_train

    exc = _pulse(cfg["excitation"])
    ref = _pulse(cfg["refocusing"])
    offs = _linspace(cfg["offsets"], "offsets")
    res = simulate_echo_train(exc, ref, int(cfg["n_echoes"]), float(cfg["echo_spacing"]), offs,
                              bool(cfg["phase_cycle"]), ref_phase=np.deg2rad(float(cfg["ref_phase_deg"])),
                              b1_scale=float(cfg["b1_scale"]))
    rows = []
    summary = []
    for k in range(len(res.labels)):
        ph = np.unwrap(res.phases[k])
        rows += [(k + 1, res.labels[k], float(f), float(p)) for f, p in zip(offs, ph)]
        dev = phase_linearity_rms(offs, res.phases[k])
        summary.append((k + 1, res.labels[k], float(res.echo_times[k]), float(abs(res.signals[k])),
                        float(np.angle(res.signals[k])), dev))
        _say(f"echo {k + 1} ({res.labels[k]}): |s| {abs(res.signals[k]):.4f}, phase nonlinearity {dev:.3f} rad")
    write_csv(out / "echo_phases.csv", ["echo", "label", "offset_hz", "phase_rad"], rows)
    write_csv(out / "echo_summary.csv", ["echo", "label", "time_s", "magnitude", "phase_rad", "nonlinear_rms_rad"],
              summary)
    return EXIT_OK


# ---------------------------------------------------------------- simulate / recon

def _protocol_from(cfg_protocol):
    from .sequence import build_protocol

    p = dict(cfg_protocol)
    return build_protocol(p.pop("contrast"), tuple(p.pop("matrix")), **p)


def _map_hash(fmap):
    return hashlib.sha256(np.ascontiguousarray(fmap.values, dtype="<f8").tobytes()).hexdigest()


def _build_maps(maps_cfg, protocol, planar):
    """Encoding maps and their grid from a synthetic spec or FMAP files."""
    from .io import read_fmap
    from .sequence import GRADIENT_LIMITS
    from .synthetic import coil_map, matched_grid, quadratic_for_deviation, readout_map

    src = maps_cfg.get("source", "synthetic")
    if src == "files":
        gx, gz = read_fmap(maps_cfg["gx"]), read_fmap(maps_cfg["gz"])
        gy = read_fmap(maps_cfg["gy"]) if maps_cfg.get("gy") and not planar else None
        return gx, gy, gz
    if src != "synthetic":
        raise ConfigError(f"maps.source must be synthetic or files, got {src!r}")
    limits = {a: GRADIENT_LIMITS[a][0] * GRADIENT_LIMITS[a][1] for a in "yz"}
    g = float(maps_cfg["gx"]["g"])
    gy = maps_cfg.get("gy", {}).get("g") or limits["y"]
    gz = maps_cfg.get("gz", {}).get("g") or limits["z"]
    grid = matched_grid(protocol, g, gz, gy, planar)
    half = (grid.nx // 2) * grid.dx
    q = quadratic_for_deviation(g, half, float(maps_cfg["gx"].get("q_fraction", 0.0)))
    mx = readout_map(grid, g, q, float(maps_cfg["gx"].get("b0", 0.0)))
    mz = coil_map(grid, gz, 2)
    my = None if planar else coil_map(grid, gy, 1)
    return mx, my, mz


def canonical_hash_obj(protocol, table, maps):
    from .io import canonical_hash

    return canonical_hash({"protocol": protocol.to_dict(), "table": table.to_dict(),
                           "maps": {k: _map_hash(v) for k, v in maps.items() if v is not None}})


def cmd_simulate(cfg, out, full=False):
    from .encode import EncodingOperator, add_noise, make_phantom
    from .io import write_fmap, write_sigdat

    pcfg = dict(cfg["protocol"])
    if full or cfg.get("full"):
        pcfg.update(cfg["full_matrix"])
    protocol, table = _protocol_from(pcfg)
    mode = cfg.get("mode", "3d")
    if mode not in ("3d", "slice"):
        raise ConfigError("mode must be '3d' or 'slice'")
    planar = mode == "slice"
    gx, gy, gz = _build_maps(cfg["maps"], protocol, planar)
    ph = cfg["phantom"]
    seed = cfg.get("seed", ph.get("seed"))
    phantom = make_phantom(ph["kind"], gx.grid, ph.get("params"), seed)
    op = EncodingOperator(gx, gz, protocol, table, gy)
    maps = {"gx": gx, "gy": gy, "gz": gz}
    h = canonical_hash_obj(protocol, table, maps)
    data = op.simulate(phantom, h)
    noise = cfg.get("noise", {})
    sigma = float(noise.get("sigma", 0.0))
    nseed = cfg.get("seed", noise.get("seed"))
    if protocol.averages > 1:
        acc = np.zeros(data.shape, dtype=complex)
        for a in range(protocol.averages):
            acc += add_noise(data, sigma, None if nseed is None else int(nseed) + a).samples
        data = data.with_samples(acc / protocol.averages, noise_sigma=sigma / np.sqrt(protocol.averages))
    else:
        data = add_noise(data, sigma, nseed)
    write_sigdat(out / "signal.sigdat", data.samples, data.dwell, h,
                 {"noise_sigma": data.noise_sigma, "mode": mode})
    for name, m in maps.items():
        if m is not None:
            write_fmap(out / f"{name}.fmap", m)
    write_fmap(out / "phantom.fmap", phantom.to_fieldmap())
    table.write_csv(out / "encode_table.csv")
    acq = {"protocol": protocol.to_dict(), "table": table.to_dict(), "mode": mode, "maps": cfg["maps"],
           "protocol_hash": h}
    _write_json(out / "acquisition.json", acq)
    _say(f"simulated {data.shape[0]} shots x {data.shape[1]} echoes x {data.shape[2]} samples, hash {h[:12]}")
    return EXIT_OK


def _roi_mask(grid, spec):
    pts = grid.points()
    c = np.asarray(spec["center"], dtype=float)
    if c.size == 2:
        c = np.array([c[0], pts[0, 1], c[1]])
    return ((pts - c) ** 2).sum(axis=1) <= float(spec["radius"]) ** 2


def cmd_recon(cfg, out, snr_file=None):
    from .encode import EncodingOperator, SignalData, partition_y
    from .fieldmap import deformation_map, linear_fit, spanned_axes
    from .io import read_fmap, read_sigdat, write_csv, write_fmap, write_pgm, write_png
    from .recon import build_preconditioner, cg_solve, compute_snr, fft_recon, intensity_correct, relative_rmse
    from .sequence import AcquisitionProtocol, PhaseEncodeTable

    if not cfg.get("signal") or not cfg.get("protocol"):
        raise ConfigError("recon requires signal (SIGDAT path) and protocol (acquisition.json path)")
    samples, header = read_sigdat(cfg["signal"])
    acq_path = Path(cfg["protocol"])
    if not acq_path.exists():
        raise FileNotFoundError(f"acquisition file not found: {acq_path}")
    acq = json.loads(acq_path.read_text(encoding="utf-8"))
    protocol = AcquisitionProtocol.from_dict(acq["protocol"])
    table = PhaseEncodeTable(acq["table"]["y_order"], acq["table"]["z_order"])
    mode = acq.get("mode", cfg.get("mode", "3d"))
    maps_cfg = cfg.get("maps") or acq["maps"]
    gx, gy, gz = _build_maps(maps_cfg, protocol, mode == "slice")
    h = canonical_hash_obj(protocol, table, {"gx": gx, "gy": gy, "gz": gz})
    if h != header["protocol_hash"]:
        raise ConfigError(
            f"protocol hash mismatch: SIGDAT was acquired with {header['protocol_hash'][:12]}, the configured "
            f"protocol and maps give {h[:12]}; refusing to reconstruct with a different encoding model"
        )
    data = SignalData(samples, header["dwell"], h, float(header.get("noise_sigma", 0.0)))
    truth = read_fmap(cfg["truth"]) if cfg.get("truth") else None
    if mode == "slice":
        parts, ys = [data], [0]
    else:
        parts = partition_y(data, table, unitary=False)
        ys = list(range(len(parts)))
    wanted = cfg.get("partitions", "all")
    if wanted != "all":
        ys = [int(j) for j in wanted]
    snr_spec = None
    if snr_file or cfg.get("snr_rois"):
        snr_spec = json.loads(Path(snr_file or cfg["snr_rois"]).read_text(encoding="utf-8"))
    report, prov, snr_rows = [], {}, []
    for j in ys:
        sx = gx.slice_y(j) if gx.grid.ny > 1 else gx
        sz = gz.slice_y(j) if gz.grid.ny > 1 else gz
        b0 = linear_fit(gx, axes=spanned_axes(gx.grid)).b0
        op = EncodingOperator(sx, sz, protocol, table, None, b0)
        pre = build_preconditioner(op) if cfg.get("precondition", True) else None
        part = parts[j] if mode != "slice" else parts[0]
        img = cg_solve(part, op, pre, float(cfg["tol"]), int(cfg["max_iter"]), float(cfg.get("lam", 0.0)))
        row = {"partition": j, "cg_iterations": img.provenance["iterations"],
               "cg_relative_residual": img.provenance["relative_residual"]}
        outputs = {"cg": img}
        ax = spanned_axes(sx.grid)
        fx, fz = linear_fit(sx, axes=ax), linear_fit(sz, axes=ax)
        if cfg.get("fft", True):
            outputs["fft"] = fft_recon(part, fx, fz, protocol, table, sx.grid, b0)
        if cfg.get("intensity_correct"):
            outputs = {k: intensity_correct(v) if k == "cg" else v for k, v in outputs.items()}
        for name, im in outputs.items():
            mag = im.magnitude
            write_fmap(out / f"{name}_p{j:02d}.fmap", sx.with_values(mag, label=f"{name} |m|", units="a.u."))
            window = (0.0, float(mag.max()) if mag.max() > 0 else 1.0)
            raster = im.plane().T[::-1, :]
            write_pgm(out / f"{name}_p{j:02d}.pgm", raster, window)
            write_png(out / f"{name}_p{j:02d}.png", raster, window)
            prov[f"{name}_p{j:02d}"] = {k: v for k, v in im.provenance.items()
                                        if k not in ("residual_history", "data_residual_history")}
            prov[f"{name}_p{j:02d}"]["window"] = list(window)
            if name == "cg":
                prov[f"{name}_p{j:02d}"]["residual_history"] = im.provenance["residual_history"]
        if truth is not None:
            tv = truth.slice_y(j).values if truth.grid.ny > 1 else truth.values
            for name, im in outputs.items():
                row[f"{name}_rmse"] = relative_rmse(im.magnitude, tv)
        dm = deformation_map(sx, fx, "x")
        row["max_readout_deformation_m"] = float(np.nanmax(np.abs(dm.values)))
        row["max_readout_deformation_px"] = row["max_readout_deformation_m"] / sx.grid.dx
        if snr_spec is not None and "fft" in outputs:
            snr = compute_snr(outputs["fft"], _roi_mask(sx.grid, snr_spec["signal"]),
                              _roi_mask(sx.grid, snr_spec["background"]))
            snr_rows.append((f"partition_{j:02d}", snr))
            row["snr"] = snr
        report.append(row)
        msg = f"partition {j}: CG {row['cg_iterations']} it, residual {row['cg_relative_residual']:.2e}"
        if "cg_rmse" in row:
            msg += f", RMSE CG {row['cg_rmse']:.4f}"
            if "fft_rmse" in row:
                msg += f" FFT {row['fft_rmse']:.4f}"
        _say(msg)
    _write_json(out / "provenance.json", prov)
    _write_json(out / "report.json", report)
    keys = sorted({k for r in report for k in r})
    write_csv(out / "report.csv", keys, [[r.get(k, "") for k in keys] for r in report])
    if snr_rows:
        write_csv(out / "snr.csv", ["acquisition", "snr"], snr_rows)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

COMMANDS = ("design-magnet", "shim", "pulse-profile", "echo-train", "simulate", "recon")


def build_parser():
    p = argparse.ArgumentParser(prog="lowfield", description="Low-field MRI simulation and reconstruction toolkit")
    p.add_argument("--version", action="version", version=f"lowfield {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config layered over the packaged defaults")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted key, JSON value)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
        if name == "simulate":
            sp.add_argument("--full", action="store_true", help="use the full 256 x 23 x 97 matrix")
        if name == "recon":
            sp.add_argument("--snr", metavar="ROI_JSON", help="ROI file with signal/background circles")
        if name == "design-magnet":
            sp.add_argument("--prototype", action="store_true", help="start from the prototype geometry config")
    return p


def _run(args):
    command = args.command
    if command == "design-magnet" and args.prototype:
        base = load_default("prototype_magnet")
        cfg = deep_merge(base, json.loads(Path(args.config).read_text()) if args.config else {})
        for item in args.set:
            apply_override(cfg, item)
        if args.seed is not None:
            cfg["seed"] = args.seed
    else:
        cfg = resolve_config(command, args.config, args.set, args.seed)
    if command == "simulate" and args.full:
        cfg["full"] = True
    out = _output_dir(args)
    echo = copy.deepcopy(cfg)
    echo["_meta"] = {"command": command, "version": __version__}
    _write_json(out / "resolved_config.json", echo)
    handlers = {
        "design-magnet": lambda: cmd_design_magnet(cfg, out),
        "shim": lambda: cmd_shim(cfg, out),
        "pulse-profile": lambda: cmd_pulse_profile(cfg, out),
        "echo-train": lambda: cmd_echo_train(cfg, out),
        "simulate": lambda: cmd_simulate(cfg, out),
        "recon": lambda: cmd_recon(cfg, out, getattr(args, "snr", None)),
    }
    if args.threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=int(args.threads)):
            return handlers[command]()
    return handlers[command]()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (DivergenceError, SingularityError, RankDeficiencyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"lowfield: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"lowfield: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, TimingError, KeyError, TypeError, ValueError) as exc:
        detail = f"missing config key {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"lowfield: configuration error: {detail}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
