"""Command-line front end.

Every command writes its result as JSON (default) or CSV, to stdout or to
files under ``--out``. Each artifact embeds the hash of a run manifest that
records the command, inputs (with content digests), resolved configuration,
seed and tool version.

Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 I/O error. On
failure a JSON error object is written to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .dataio import (
    fixture_names,
    infer_gap,
    load_device,
    load_frequencies,
    load_gap_table,
    load_loss_vector,
    load_participation_matrix,
    read_json,
    resolve_path,
)
from .errors import ResolveQError, SolverError, ValidationError
from .extraction import BOUND_RULES, ExtractionConfig, monte_carlo_extract
from .loss_model import CHANNELS, forward_loss_rates, loss_budget, predict_quality_factors
from .sensitivity import (
    DEFAULT_RANGES,
    MAP_PLANES,
    MAP_SLICES,
    SensitivityGridSpec,
    minimum_resolvable,
    sensitivity_grid,
)
from .spectral_fit import circle_fit_resonance, fit_to_measurement, read_trace_csv, read_trace_json

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3

#: Built-in defaults; a ``--config`` JSON file overrides them, flags override both.
DEFAULTS = {
    "seed": 20231,
    "mc_samples": 5000,
    "bound_rule": "mc_percentile",
    "bound_percentile": 0.95,
    "eps_y": None,
    "format": "json",
    "points": 50,
    "eps_floor": 0.05,
    "flag_threshold": 0.05,
}

UNIT_TAGS = {"r_s": "ohm", "tan_delta": "", "r_seam": "ohm_m"}


class CliError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- manifest ----------------------------------------------------------------

def _digest(path):
    try:
        data = resolve_path(path).read_bytes()
    except (OSError, AttributeError):
        return None
    return hashlib.sha256(data).hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    seconds = int(epoch) if epoch and epoch.isdigit() else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(seconds))


@dataclass
class RunManifest:
    """Provenance of one run. The hash covers everything but the timestamp."""

    command: str
    inputs: list
    config: dict
    seed: int
    outputs: list = field(default_factory=list)
    tool_version: str = __version__
    timestamp: str = field(default_factory=_timestamp)

    def digest(self) -> str:
        body = asdict(self)
        body.pop("timestamp")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def to_dict(self):
        return {**asdict(self), "hash": self.digest()}


# -- helpers -----------------------------------------------------------------

def _finite_or_inf(value):
    """JSON has no infinity; infinite values are rendered as the string "inf"."""
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _fmt(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    return "" if value is None else str(value)


def _csv_text(header, rows, manifest_hash):
    buf = io.StringIO()
    buf.write(f"# manifest_hash={manifest_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_text(doc):
    return json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _parse_eps(items):
    """``["0.05", "CAV-2=0.2"]`` -> (global or None, {label: eps})."""
    global_eps, per_mode = None, {}
    for item in items or ():
        if "=" in item:
            label, _, value = item.partition("=")
            per_mode[label.strip()] = _float(value, "--eps-y")
        else:
            global_eps = _float(item, "--eps-y")
    return global_eps, per_mode


def _float(text, flag):
    try:
        return float(text)
    except ValueError:
        raise CliError(f"{flag}: not a number: {text!r}") from None


def _parse_assignments(items, flag):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"{flag}: expected name=value, got {item!r}")
        out[key.strip()] = _float(value, flag)
    return out


def resolve_config(args) -> dict:
    """Merge defaults, the optional config file and explicit flags, in that order."""
    config = dict(DEFAULTS)
    if getattr(args, "config", None):
        doc = read_json(args.config)
        if not isinstance(doc, dict):
            raise CliError("--config must hold a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise CliError(f"--config: unknown keys {sorted(unknown)}")
        config.update(doc)
    for key in ("seed", "mc_samples", "bound_rule", "format", "points", "eps_floor",
                "flag_threshold"):
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    if getattr(args, "eps_y", None):
        global_eps, per_mode = _parse_eps(args.eps_y)
        merged = config["eps_y"] if isinstance(config["eps_y"], dict) else {}
        if global_eps is not None:
            merged = {"*": global_eps}
        elif isinstance(config["eps_y"], (int, float)):
            merged = {"*": float(config["eps_y"])}
        merged = {**merged, **per_mode}
        config["eps_y"] = merged
    elif isinstance(config["eps_y"], (int, float)):
        config["eps_y"] = {"*": float(config["eps_y"])}
    if config["format"] not in ("json", "csv"):
        raise CliError("--format must be json or csv")
    return config


def _apply_eps(record, eps_config):
    if not eps_config:
        return record
    if "*" in eps_config:
        record = record.with_eps_y(eps_config["*"])
    per_mode = {k: v for k, v in eps_config.items() if k != "*"}
    return record.with_eps_y(per_mode) if per_mode else record


class _Output:
    """Collects named artifacts and writes them to stdout or ``--out``."""

    def __init__(self, args, manifest: RunManifest):
        self.out_dir = Path(args.out) if getattr(args, "out", None) else None
        self.manifest = manifest
        self.artifacts = []

    def add(self, name, text):
        self.artifacts.append((name, text))

    def flush(self, stdout):
        if self.out_dir is None:
            for k, (_, text) in enumerate(self.artifacts):
                if k:
                    stdout.write("\n")
                stdout.write(text)
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.artifacts:
            (self.out_dir / name).write_text(text)
        (self.out_dir / "manifest.json").write_text(_json_text(self.manifest.to_dict()))


def _manifest(args, command, inputs, config):
    return RunManifest(
        command=command,
        inputs=[{"path": str(p), "sha256": _digest(p)} for p in inputs],
        config=config,
        seed=int(config["seed"]),
    )


# -- commands ----------------------------------------------------------------

def cmd_extract(args, config, stdout):
    record = _apply_eps(load_device(args.device), config["eps_y"])
    ext_config = ExtractionConfig(
        mc_samples=int(config["mc_samples"]), seed=int(config["seed"]),
        bound_rule=config["bound_rule"], bound_percentile=float(config["bound_percentile"]),
    )
    result = monte_carlo_extract(record.participation, record.modes, ext_config)
    manifest = _manifest(args, "extract", [args.device], config)
    names = ["extract.json"] if config["format"] == "json" else ["losses.csv", "residuals.csv"]
    manifest.outputs = names
    out = _Output(args, manifest)

    predicted = forward_loss_rates(record.participation, result.x_hat)
    predicted_unc = forward_loss_rates(record.participation, result.x_unconstrained)
    residual_rows = [
        (m.label, float(y), float(p), float((p - y) / y), float((q - y) / y))
        for m, y, p, q in zip(record.modes, result.measured_rates, predicted, predicted_unc)
    ]
    if config["format"] == "json":
        doc = {
            "manifest_hash": manifest.digest(),
            "device_id": record.device_id,
            "units": {c: UNIT_TAGS[c] or "1" for c in CHANNELS},
            "eps_y": {m.label: m.q_int_rel_sigma for m in record.modes},
            **result.to_dict(),
            "residual_table": [
                {"mode": r[0], "measured_rate": r[1], "predicted_rate": r[2],
                 "relative_residual": r[3], "relative_residual_unconstrained": r[4]}
                for r in residual_rows
            ],
            "manifest": manifest.to_dict(),
        }
        out.add(names[0], _json_text(doc))
    else:
        rows = []
        for name, c in zip(CHANNELS, result.classification):
            rows.append((name, UNIT_TAGS[name] or "1", c.status, c.value, c.sigma, c.bound))
        out.add(names[0], _csv_text(["channel", "unit", "status", "value", "sigma", "bound"], rows,
                                    manifest.digest()))
        out.add(names[1], _csv_text(["mode", "measured_rate", "predicted_rate", "relative_residual",
                                     "relative_residual_unconstrained"], residual_rows,
                                    manifest.digest()))
    out.flush(stdout)


def _plane(args, channel):
    if not args.plane:
        return MAP_PLANES[channel]
    parts = [p.strip() for p in args.plane.split(",")]
    if len(parts) != 2:
        raise CliError("--plane expects two channel names separated by a comma")
    return tuple(parts)


def cmd_sensitivity(args, config, stdout):
    matrix = load_participation_matrix(args.pmatrix)
    channel = args.channel
    if channel not in CHANNELS:
        raise CliError(f"--channel must be one of {CHANNELS}")
    axis_a, axis_b = _plane(args, channel)
    fixed_flags = _parse_assignments(args.fixed, "--fixed")
    ranges = {k: (lo, hi) for k, (lo, hi) in DEFAULT_RANGES.items()}
    for item in args.range or ():
        key, _, span = item.partition("=")
        lo, _, hi = span.partition(":")
        ranges[key.strip()] = (_float(lo, "--range"), _float(hi, "--range"))
    out_of_plane = [c for c in CHANNELS if c not in (axis_a, axis_b)]
    fixed = {c: fixed_flags.get(c, MAP_SLICES[channel].get(c))
             for c in out_of_plane}
    if any(v is None for v in fixed.values()):
        raise CliError(f"--fixed must set {out_of_plane}")
    eps_cfg = config["eps_y"] or {}
    eps = [eps_cfg.get(label, eps_cfg.get("*", 0.05)) for label in matrix.labels]
    points = int(config["points"])
    spec = SensitivityGridSpec(channel, axis_a, (*ranges[axis_a], points), axis_b,
                               (*ranges[axis_b], points), fixed, eps)
    grid = sensitivity_grid(matrix, spec)

    slice_values = {**MAP_SLICES[channel], **{k: v for k, v in fixed_flags.items() if k != channel}}
    try:
        minimum = minimum_resolvable(matrix, eps, channel, slice_values)
    except SolverError:
        minimum = None
    tested = CHANNELS.index(channel)
    axis = 0 if tested == CHANNELS.index(axis_a) else (1 if tested == CHANNELS.index(axis_b) else None)
    boundary_min = (float(grid.boundary[:, axis].min())
                    if axis is not None and len(grid.boundary) else None)

    manifest = _manifest(args, "sensitivity", [args.pmatrix], {
        **config, "channel": channel, "plane": [axis_a, axis_b], "fixed": fixed,
        "ranges": {k: list(v) for k, v in ranges.items()},
    })
    manifest.outputs = ["sensitivity_grid.csv", "sensitivity_boundary.csv", "sensitivity.json"]
    out = _Output(args, manifest)
    summary = {
        "manifest_hash": manifest.digest(),
        "channel": channel,
        "plane": [axis_a, axis_b],
        "fixed": fixed,
        "eps_y": dict(zip(matrix.labels, eps)),
        "boundary_min": boundary_min,
        "minimum_resolvable": minimum,
        "minimum_resolvable_slice": slice_values,
        "boundary_points": len(grid.boundary),
        "manifest": manifest.to_dict(),
    }
    grid_rows = [(float(a), float(b), float(grid.values[i, j]))
                 for i, a in enumerate(grid.a_values) for j, b in enumerate(grid.b_values)]
    grid_csv = _csv_text([axis_a, axis_b, "sigma_over_x"], grid_rows, manifest.digest())
    boundary_csv = _csv_text([axis_a, axis_b], [tuple(map(float, p)) for p in grid.boundary],
                             manifest.digest())
    if out.out_dir is None:
        out.add("", _json_text(summary) if config["format"] == "json" else boundary_csv)
    else:
        out.add("sensitivity_grid.csv", grid_csv)
        out.add("sensitivity_boundary.csv", boundary_csv)
        out.add("sensitivity.json", _json_text(summary))
    out.flush(stdout)


def cmd_predict(args, config, stdout):
    matrix = load_participation_matrix(args.pmatrix)
    x = load_loss_vector(args.losses)
    rates = forward_loss_rates(matrix, x)
    table = [(label, q, float(r)) for (label, q), r in zip(predict_quality_factors(matrix, x), rates)]
    manifest = _manifest(args, "predict", [args.pmatrix, args.losses], config)
    out = _Output(args, manifest)
    if config["format"] == "json":
        manifest.outputs = ["predict.json"]
        doc = {"manifest_hash": manifest.digest(),
               "modes": [{"mode": label, "q_int": _finite_or_inf(q), "loss_rate": r}
                         for label, q, r in table],
               "manifest": manifest.to_dict()}
        out.add("predict.json", _json_text(doc))
    else:
        manifest.outputs = ["predict.csv"]
        out.add("predict.csv", _csv_text(["mode", "q_int", "loss_rate"], table, manifest.digest()))
    out.flush(stdout)


def cmd_budget(args, config, stdout):
    matrix = load_participation_matrix(args.pmatrix)
    x = load_loss_vector(args.losses)
    rows = [(label, *loss_budget(row, x)) for label, row in matrix]
    manifest = _manifest(args, "budget", [args.pmatrix, args.losses], config)
    out = _Output(args, manifest)
    if config["format"] == "json":
        manifest.outputs = ["budget.json"]
        doc = {"manifest_hash": manifest.digest(),
               "modes": [{"mode": r[0], "cond": r[1], "ma": r[2], "seam": r[3]} for r in rows],
               "manifest": manifest.to_dict()}
        out.add("budget.json", _json_text(doc))
    else:
        manifest.outputs = ["budget.csv"]
        out.add("budget.csv", _csv_text(["mode", "cond", "ma", "seam"], rows, manifest.digest()))
    out.flush(stdout)


def cmd_fit_spectrum(args, config, stdout):
    path = str(args.trace)
    trace = read_trace_json(path) if path.endswith(".json") else read_trace_csv(path)
    fit = circle_fit_resonance(trace)
    measurement = None
    if fit.ok:
        m = fit_to_measurement(fit, float(config["eps_floor"]), args.label,
                               trace.metadata.get("photon_number"))
        measurement = {"label": m.label, "freq_hz": m.frequency, "q_int": m.q_int,
                       "eps_y": m.q_int_rel_sigma, "q_c": m.q_c}
    manifest = _manifest(args, "fit-spectrum", [path], config)
    out = _Output(args, manifest)
    report = fit.to_dict()
    if config["format"] == "json":
        manifest.outputs = ["fit.json"]
        doc = {"manifest_hash": manifest.digest(), "fit": report, "measurement": measurement,
               "manifest": manifest.to_dict()}
        out.add("fit.json", _json_text(doc))
    else:
        manifest.outputs = ["fit.csv"]
        header = ["f0_hz", "q_loaded", "q_c_mag", "phi_rad", "q_int", "sigma_q_int",
                  "residual_rms", "flags"]
        row = (fit.f0, fit.q_loaded, fit.q_c_mag, fit.phi, fit.q_int, fit.errors["q_int"],
               fit.residual_rms, ";".join(report["flags"]))
        out.add("fit.csv", _csv_text(header, [row], manifest.digest()))
    out.flush(stdout)


def cmd_infer_gap(args, config, stdout):
    table = load_gap_table(args.gap_table)
    measured = load_frequencies(args.frequencies)
    result = infer_gap(table, measured, float(config["flag_threshold"]))
    manifest = _manifest(args, "infer-gap", [args.gap_table, args.frequencies], config)
    out = _Output(args, manifest)
    if config["format"] == "json":
        manifest.outputs = ["gap.json"]
        doc = {"manifest_hash": manifest.digest(), **result.to_dict(), "synthetic_table": table.synthetic,
               "manifest": manifest.to_dict()}
        out.add("gap.json", _json_text(doc))
    else:
        manifest.outputs = ["gap.csv"]
        rows = [(label, result.gap, value) for label, value in result.mismatch.items()]
        out.add("gap.csv", _csv_text(["mode", "gap_m", "mismatch"], rows, manifest.digest()))
    out.flush(stdout)


def cmd_fixtures(args, config, stdout):
    if args.name:
        doc = read_json("fixtures://" + args.name)
        stdout.write(_json_text(doc))
        return
    rows = []
    for name in fixture_names():
        doc = read_json("fixtures://" + name)
        kind = doc.get("schema", "").split("/")[0].split(".")[-1]
        label = doc.get("device_id") or doc.get("name") or name
        rows.append((name, kind, label, len(doc.get("modes", ()))))
    if config["format"] == "json":
        stdout.write(_json_text([{"name": r[0], "kind": r[1], "id": r[2], "modes": r[3]} for r in rows]))
    else:
        writer = csv.writer(stdout, lineterminator="\n")
        writer.writerow(["name", "kind", "id", "modes"])
        writer.writerows(rows)


# -- parser ------------------------------------------------------------------

def build_parser():
    # SUPPRESS keeps a subcommand from resetting options given before it.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="Monte-Carlo seed (default 20231)")
    common.add_argument("--mc-samples", type=int, dest="mc_samples", help="Monte-Carlo samples (default 5000)")
    common.add_argument("--eps-y", action="append", dest="eps_y", metavar="EPS|MODE=EPS",
                        help="relative loss-rate uncertainty, global or per mode; repeatable")
    common.add_argument("--bound-rule", choices=BOUND_RULES, dest="bound_rule")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--out", help="write artifacts and manifest.json into this directory")
    common.add_argument("--config", help="JSON file of defaults (overridden by flags)")
    common.add_argument("--show-config", action="store_true", dest="show_config",
                        help="print the resolved configuration and exit")

    parser = _Parser(prog="resolveq", parents=[common],
                     description="Material-loss extraction from multi-mode resonator measurements.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", parents=[common], help="extract loss factors of one device")
    p.add_argument("device", help="device JSON or fixtures://<device>")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sensitivity", parents=[common], help="sigma_x/x map and resolvable boundary")
    p.add_argument("pmatrix")
    p.add_argument("--channel", required=True, choices=CHANNELS)
    p.add_argument("--plane", help="two swept channels, e.g. r_s,tan_delta")
    p.add_argument("--fixed", action="append", metavar="CHANNEL=VALUE",
                   help="value (SI) of a channel that is not swept; repeatable")
    p.add_argument("--range", action="append", metavar="CHANNEL=LO:HI", help="sweep range (SI)")
    p.add_argument("--points", type=int, help="grid points per axis (default 50)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("predict", parents=[common], help="predicted Q_int per mode")
    p.add_argument("pmatrix")
    p.add_argument("losses")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("budget", parents=[common], help="per-mode loss fractions")
    p.add_argument("pmatrix")
    p.add_argument("losses")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("fit-spectrum", parents=[common], help="circle fit of a reflection trace")
    p.add_argument("trace", help="CSV (frequency_hz, re_s11, im_s11) or JSON trace")
    p.add_argument("--label", default="mode")
    p.add_argument("--eps-floor", type=float, dest="eps_floor")
    p.set_defaults(func=cmd_fit_spectrum)

    p = sub.add_parser("infer-gap", parents=[common], help="assembly gap from mode frequencies")
    p.add_argument("gap_table")
    p.add_argument("frequencies")
    p.add_argument("--flag-threshold", type=float, dest="flag_threshold")
    p.set_defaults(func=cmd_infer_gap)

    p = sub.add_parser("fixtures", parents=[common], help="list or dump bundled data")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_fixtures)
    return parser


def _error_payload(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("dependent_rows", "residual", "diagnostics"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = value
    return payload


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        if getattr(args, "show_config", False):
            stdout.write(_json_text(config))
            return EXIT_OK
        if not getattr(args, "command", None):
            raise CliError("a subcommand is required (see --help)")
        args.func(args, config, stdout)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        error, code = exc, EXIT_VALIDATION
    except SolverError as exc:
        error, code = exc, EXIT_SOLVER
    except OSError as exc:
        error, code = exc, EXIT_IO
    except ResolveQError as exc:
        error, code = exc, EXIT_SOLVER
    stderr.write(json.dumps(_error_payload(error, code), default=str) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
