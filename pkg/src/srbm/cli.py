"""Command line front end.

Every subcommand reads an optional JSON config (``--config``); flags given
on the command line override it. Exit codes: 0 success, 1 falsify ran but
did not certify a violation, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SpecError, SRError
from .hamiltonian import IntegratorConfig, trajectory, write_trajectory_csv

EXIT_OK, EXIT_NO_VIOLATION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _vector(v):
    if isinstance(v, str):
        v = [float(t) for t in v.replace(",", " ").split()]
    if not isinstance(v, (list, tuple)) or not all(isinstance(t, (int, float)) for t in v):
        raise ValueError("expected a list of numbers")
    return [float(t) for t in v]


def _positive(v):
    v = float(v)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _count(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError("must be an integer")
    v = int(v)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _structure(v):
    if isinstance(v, (str, dict)):
        return v
    raise ValueError("expected a built-in name, a file path or an inline frame spec")


# key -> (converter, default, help); None default means required
COMMON = {
    "structure": (_structure, None, "built-in name, FrameSpec JSON path"),
    "step": (_positive, 1e-3, "integrator step"),
    "max_steps": (_count, 1_000_000, "integrator step budget"),
}
COMMANDS = {
    "exp": {
        "point": (_vector, None, "base point x"),
        "covector": (_vector, None, "initial covector p"),
        "time": (float, 1.0, "final time"),
        "samples": (_count, 101, "rows in the trajectory dump"),
        "out": (str, "-", "CSV path, - for stdout"),
    },
    "growth": {
        "point": (_vector, None, "base point x"),
        "covector": (_vector, [], "covector; empty scans sampled covectors"),
        "time": (_positive, 1.0, "segment length in time when a covector is given"),
        "grid": (_count, 33, "grid times along the segment"),
        "count": (_count, 64, "sampled covectors when none is given"),
        "out": (str, "-", "JSON path, - for stdout"),
    },
    "fit": {
        "point": (_vector, None, "base point a"),
        "covector": (_vector, None, "covector with E_a(p) = b"),
        "t_grid": (_vector, np.geomspace(1e-3, 1e-1, 9).tolist(), "log-spaced times in (0, 1)"),
        "epsilon": (_positive, 0.1, "bracket half-width for alpha"),
        "out": (str, "-", "JSON path, - for stdout"),
    },
    "findr": {
        "point": (_vector, None, "base point a"),
        "covector": (_vector, None, "covector with E_a(p) = b"),
        "out": (str, "-", "JSON path, - for stdout"),
    },
    "midpoint": {
        "point": (_vector, None, "base point x"),
        "covector": (_vector, None, "covector with E_x(p) = y"),
        "t": (float, 0.5, "ratio"),
        "out": (str, "-", "JSON path, - for stdout"),
    },
    "invgeo": {
        "point": (_vector, None, "mid point m"),
        "covector": (_vector, None, "covector with E_m(q) = y"),
        "t": (float, 0.5, "ratio in [0, 1)"),
        "out": (str, "-", "JSON path, - for stdout"),
    },
    "falsify": {
        "point": (_vector, [], "seed point; empty uses the chart centre"),
        "radius": (_positive, 2.0, "size parameter R"),
        "epsilon": (_positive, 0.1, "tolerance epsilon"),
        "seed": (int, 0, "random seed"),
        "K": (_vector, [0.0, -1.0, -10.0], "curvature grid"),
        "N": (_vector, [1.5, 2.0, 3.0, 5.0, 10.0], "dimension grid"),
        "resolution": (int, 0, "cells across the diameter 2 rho of the mid set cover; 0 picks by dimension"),
        "set_step": (_positive, 1.0 / 16, "integrator step for set construction"),
        "out": (str, "-", "JSON report path, - for stdout"),
        "cloud": (str, "", "CSV path for mid point samples"),
    },
    "tau": {
        "K": (float, None, "curvature K <= 0"),
        "N": (float, None, "dimension N >= 1"),
        "t": (float, None, "ratio in [0, 1]"),
        "theta": (float, None, "distance bound"),
    },
}
NO_STRUCTURE = {"tau"}


def _schema(cmd):
    keys = dict(COMMANDS[cmd])
    if cmd not in NO_STRUCTURE:
        keys = {**COMMON, **keys}
    if cmd == "falsify":
        keys["step"] = (_positive, 1e-3, "integrator step")
    return keys


def build_parser():
    parser = argparse.ArgumentParser(prog="srbm", description="SubRiemannian Brunn-Minkowski laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="JSON file with any of the options below")
        for key, (_, default, text) in _schema(cmd).items():
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            help=f"{text} (default: {default!r})" if default is not None else f"{text} (required)")
    return parser


def resolve_config(cmd, args):
    """Defaults < config file < command line flags, each key converted and checked."""
    schema = _schema(cmd)
    raw = {}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r} for {cmd}")
        raw.update(loaded)
    for key in schema:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    out = {}
    for key, (conv, default, _) in schema.items():
        if key not in raw:
            if default is None:
                raise ConfigError(f"missing required key {key!r}")
            out[key] = default
            continue
        try:
            out[key] = conv(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return out


# destinations do not change the computation, so they stay out of records and hashes
OUTPUT_KEYS = ("out", "cloud")


def config_hash(conf):
    kept = {k: v for k, v in conf.items() if k not in OUTPUT_KEYS}
    return hashlib.sha256(json.dumps(kept, sort_keys=True).encode()).hexdigest()[:16]


def _record(cmd, conf, body):
    return {
        "command": cmd,
        "version": __version__,
        "config_hash": config_hash(conf),
        "seed": conf.get("seed", 0),
        "config": {k: v for k, v in conf.items() if k not in OUTPUT_KEYS},
        **body,
    }


def _emit(path, record):
    text = json.dumps(record, indent=2) + "\n"
    if path in ("-", ""):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _structure_from(conf):
    from .structures import load_structure

    return load_structure(conf["structure"])


def _integrator(conf):
    return IntegratorConfig(step=conf["step"], max_steps=conf["max_steps"])


def _dim_check(s, conf, *keys):
    for key in keys:
        if len(conf[key]) != s.dim:
            raise ConfigError(f"bad value for {key!r}: expected {s.dim} numbers")


def cmd_exp(conf):
    s = _structure_from(conf)
    _dim_check(s, conf, "point", "covector")
    rows = trajectory(s, conf["point"], conf["covector"], conf["time"], _integrator(conf), conf["samples"])
    write_trajectory_csv(sys.stdout if conf["out"] == "-" else conf["out"], rows, s.dim)


def cmd_growth(conf):
    from .flag import ampleness_on_grid, minimal_geodesic_covector
    from .geodesy import GeodesicSegment

    s = _structure_from(conf)
    _dim_check(s, conf, "point")
    cfg = _integrator(conf)
    if conf["covector"]:
        _dim_check(s, conf, "covector")
        seg = GeodesicSegment(s, conf["point"], conf["covector"], 0.0, conf["time"], cfg)
        data = ampleness_on_grid(s, seg, conf["grid"])
        finite = [g.geodesic_dimension for g in data if g.ample]
        body = {
            "structure": s.name,
            "records": [g.as_dict() for g in data],
            "ample": all(g.ample for g in data),
            "geodesic_dimension": int(min(finite)) if finite else "inf",
        }
    else:
        p, g = minimal_geodesic_covector(s, conf["point"], count=conf["count"], cfg=cfg)
        body = {
            "structure": s.name,
            "covector": p.tolist(),
            "growth_vector": list(g.growth_vector),
            "geodesic_dimension": int(g.geodesic_dimension),
        }
    _emit(conf["out"], _record("growth", conf, body))


def cmd_fit(conf):
    from .counterexample import contraction_fit

    s = _structure_from(conf)
    _dim_check(s, conf, "point", "covector")
    try:
        fit = contraction_fit(s, conf["point"], conf["covector"], conf["t_grid"], _integrator(conf), conf["epsilon"])
    except ValueError as exc:
        raise ConfigError(f"bad value for 't_grid': {exc}") from None
    _emit(conf["out"], _record("fit", conf, {"structure": s.name, "fit": fit.as_dict()}))


def cmd_findr(conf):
    from .counterexample import find_unit_ratio

    s = _structure_from(conf)
    _dim_check(s, conf, "point", "covector")
    ur = find_unit_ratio(s, conf["point"], conf["covector"], _integrator(conf))
    _emit(conf["out"], _record("findr", conf, {"structure": s.name, **ur.as_dict()}))


def cmd_midpoint(conf):
    from .geodesy import midpoint, midpoint_jacobian, reverse

    s = _structure_from(conf)
    _dim_check(s, conf, "point", "covector")
    if not 0 <= conf["t"] <= 1:
        raise ConfigError("bad value for 't': must lie in [0, 1]")
    cfg = _integrator(conf)
    x, p, t = conf["point"], conf["covector"], conf["t"]
    y, _ = reverse(s, x, p, cfg)
    body = {
        "structure": s.name,
        "y": y.tolist(),
        "midpoint": midpoint(s, x, p, t, cfg).tolist(),
        "jacobian": midpoint_jacobian(s, x, p, t, cfg),
    }
    _emit(conf["out"], _record("midpoint", conf, body))


def cmd_invgeo(conf):
    from .geodesy import inverse_geodesic, inverse_geodesic_jacobian, reverse

    s = _structure_from(conf)
    _dim_check(s, conf, "point", "covector")
    if not 0 <= conf["t"] < 1:
        raise ConfigError("bad value for 't': must lie in [0, 1)")
    cfg = _integrator(conf)
    m, q, t = conf["point"], conf["covector"], conf["t"]
    y, _ = reverse(s, m, q, cfg)
    body = {
        "structure": s.name,
        "y": y.tolist(),
        "image": inverse_geodesic(s, m, q, t, cfg).tolist(),
        "jacobian": inverse_geodesic_jacobian(s, m, q, t, cfg),
    }
    _emit(conf["out"], _record("invgeo", conf, body))


def cmd_tau(conf):
    from .counterexample import tau

    value = tau(conf["K"], conf["N"], conf["t"], conf["theta"])
    _emit("-", _record("tau", conf, {"tau": value}))


def cmd_falsify(conf):
    from .counterexample import PipelineConfig, run_pipeline

    s = _structure_from(conf)
    point = conf["point"] or s.chart_bounds.mean(axis=1).tolist()
    if len(point) != s.dim:
        raise ConfigError(f"bad value for 'point': expected {s.dim} numbers")
    try:
        pcfg = PipelineConfig(
            radius=conf["radius"],
            epsilon=conf["epsilon"],
            K_grid=tuple(conf["K"]),
            N_grid=tuple(conf["N"]),
            seed=conf["seed"],
            set_step=conf["set_step"],
            resolution=conf["resolution"] or None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if any(k > 0 for k in pcfg.K_grid) or any(n < 1 for n in pcfg.N_grid):
        raise ConfigError("bad value for 'K' or 'N': need K <= 0 and N >= 1")
    report = run_pipeline(s, point, pcfg, _integrator(conf))
    record = _record("falsify", conf, {"report": report.as_dict()})
    _emit(conf["out"], record)
    timing = {"config_hash": record["config_hash"], "timings": report.timings}
    if conf["out"] in ("-", ""):
        sys.stderr.write(json.dumps(timing) + "\n")
    else:
        Path(conf["out"] + ".timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    if conf["cloud"] and report.cloud is not None:
        header = ",".join(f"x{i + 1}" for i in range(s.dim))
        np.savetxt(conf["cloud"], report.cloud, delimiter=",", header=header, comments="", fmt="%.17g")
    if report.status != "ok":
        sys.stderr.write(f"stage {report.failed_stage} failed: {report.diagnostics.get('message', '')}\n")
        return EXIT_NUMERIC
    return EXIT_OK if report.ratio_test_passed and report.all_margins_negative else EXIT_NO_VIOLATION


HANDLERS = {
    "exp": cmd_exp,
    "growth": cmd_growth,
    "fit": cmd_fit,
    "findr": cmd_findr,
    "midpoint": cmd_midpoint,
    "invgeo": cmd_invgeo,
    "falsify": cmd_falsify,
    "tau": cmd_tau,
}

STAGES = {"exp": "integration", "growth": "flag", "fit": "contraction", "findr": "ratio",
          "midpoint": "midpoint", "invgeo": "inverse geodesic", "tau": "tau"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd = args.command
    try:
        conf = resolve_config(cmd, args)
        code = HANDLERS[cmd](conf)
    except (ConfigError, SpecError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except SRError as exc:
        sys.stderr.write(f"stage {STAGES.get(cmd, cmd)} failed: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
