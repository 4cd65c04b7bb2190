"""Device records, participation tables, gap tables and their JSON forms.

Every numeric JSON field carries its unit in its name, e.g. ``freq_ghz``,
``r_s_uohm`` or ``q_int_1e6``. Dimensionless fields (``p_ma``, ``tan_delta``,
``eps_y``, ``q_int``) may appear bare. Values are converted to SI on load;
:func:`save_device` writes SI tags so that a save/load cycle is exact.

Bundled data is addressed with ``fixtures://<name>``; see :func:`fixture_names`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from .errors import UnitTagError, ValidationError
from .loss_model import (
    CHANNELS,
    MaterialLossVector,
    ModeMeasurement,
    ParticipationMatrix,
    ParticipationRow,
)

FIXTURE_SCHEME = "fixtures://"
DEVICE_SCHEMA = "resolveq.device/1"
PARTICIPATION_SCHEMA = "resolveq.participation/1"
GAP_TABLE_SCHEMA = "resolveq.gap_table/1"

#: Unit suffixes accepted per quantity, with the factor converting to SI.
#: An empty suffix means the bare name is accepted (dimensionless quantities).
UNITS = {
    "freq": {"hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9},
    "q_int": {"": 1.0, "1e6": 1e6},
    "q_c": {"": 1.0, "1e6": 1e6},
    "inv_g": {"per_ohm": 1.0},
    "p_ma": {"": 1.0},
    "y_seam": {"per_ohm_m": 1.0},
    "p_diel": {"": 1.0},
    "r_s": {"ohm": 1.0, "mohm": 1e-3, "uohm": 1e-6, "nohm": 1e-9},
    "tan_delta": {"": 1.0},
    "r_seam": {"ohm_m": 1.0, "uohm_m": 1e-6, "nohm_m": 1e-9},
    "gap": {"m": 1.0, "mm": 1e-3, "um": 1e-6},
    "eps_y": {"": 1.0},
    "photon_number": {"": 1.0},
}
#: Tags used when writing SI values.
SI_TAGS = {
    "freq": "freq_hz", "q_int": "q_int", "q_c": "q_c", "inv_g": "inv_g_per_ohm",
    "p_ma": "p_ma", "y_seam": "y_seam_per_ohm_m", "p_diel": "p_diel", "r_s": "r_s_ohm",
    "tan_delta": "tan_delta", "r_seam": "r_seam_ohm_m", "gap": "gap_m", "eps_y": "eps_y",
    "photon_number": "photon_number",
}


def _tag_matches(obj, base):
    """Keys of `obj` that name quantity `base`, known unit or not."""
    out = []
    for key in obj:
        if key == base or key.startswith(base + "_"):
            suffix = key[len(base) + 1:] if key != base else ""
            # "q_int_rel..." style keys belong to other quantities sharing a prefix.
            if any(key == other or key.startswith(other + "_") for other in UNITS
                   if other != base and other.startswith(base + "_")):
                continue
            out.append((key, suffix))
    return out


def read_quantity(obj, base, where, required=True, default=None):
    """Fetch quantity `base` from a JSON object and convert it to SI.

    Raises
    ------
    UnitTagError
        If the field is present without a recognised unit tag, or absent
        while `required`.
    ValidationError
        If the field appears more than once or is not a finite number.
    """
    matches = _tag_matches(obj, base)
    known = [(k, s) for k, s in matches if s in UNITS[base]]
    unknown = [k for k, s in matches if s not in UNITS[base]]
    if unknown:
        allowed = ", ".join(f"{base}_{u}" if u else base for u in UNITS[base])
        raise UnitTagError(f"{where}.{unknown[0]}: unknown unit tag (expected one of {allowed})")
    if len(known) > 1:
        raise ValidationError(f"{where}: {base} given more than once ({[k for k, _ in known]})")
    if not known:
        if required:
            allowed = ", ".join(f"{base}_{u}" if u else base for u in UNITS[base])
            raise UnitTagError(f"{where}: missing unit-tagged field for {base} ({allowed})")
        return default
    key, suffix = known[0]
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}.{key}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{where}.{key}: value must be finite")
    factor = UNITS[base][suffix]
    return value if factor == 1.0 else value * factor


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class ReportedValue:
    """A reference loss factor: a value with one-sigma error, or an upper bound (SI)."""

    value: float
    sigma: float | None = None
    upper_bound: bool = False

    def __post_init__(self):
        if self.upper_bound and self.sigma is not None:
            raise ValidationError("an upper bound carries no sigma")
        if not self.upper_bound and self.sigma is None:
            raise ValidationError("a reported value needs a sigma")


@dataclass(frozen=True)
class DeviceRecord:
    """Measured modes of one device together with their participation rows."""

    device_id: str
    geometry: str
    material: str
    treatments: tuple
    modes: tuple
    participation: ParticipationMatrix
    gap: float | None = None
    reported: dict = field(default_factory=dict)

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ValidationError(f"{self.device_id}: device has no modes")
        labels = [m.label for m in modes]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"{self.device_id}: mode labels must be unique")
        if tuple(labels) != tuple(self.participation.labels):
            raise ValidationError(f"{self.device_id}: measurement and participation rows not aligned")
        if self.gap is not None and not self.gap > 0:
            raise ValidationError(f"{self.device_id}: gap must be > 0")
        for key in self.reported:
            if key not in CHANNELS:
                raise ValidationError(f"{self.device_id}: unknown reported channel {key!r}")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "treatments", tuple(self.treatments))
        object.__setattr__(self, "reported", dict(self.reported))

    @property
    def labels(self):
        return tuple(m.label for m in self.modes)

    def with_eps_y(self, eps_y) -> "DeviceRecord":
        """Copy with per-mode relative uncertainties replaced.

        `eps_y` is a float applied to every mode or a ``{label: eps}`` mapping.
        """
        if isinstance(eps_y, dict):
            unknown = set(eps_y) - set(self.labels)
            if unknown:
                raise ValidationError(f"{self.device_id}: eps_y for unknown modes {sorted(unknown)}")
            lookup = eps_y
        else:
            lookup = {label: eps_y for label in self.labels}
        modes = tuple(
            ModeMeasurement(m.label, m.frequency, m.q_int, float(lookup.get(m.label, m.q_int_rel_sigma)),
                            m.q_c, m.photon_number)
            for m in self.modes
        )
        return DeviceRecord(self.device_id, self.geometry, self.material, self.treatments, modes,
                            self.participation, self.gap, self.reported)


def _require(obj, key, where, kind=str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ValidationError(f"{where}.{key}: expected {kind.__name__}")
    return value


def _row_from_json(obj, where):
    try:
        return ParticipationRow(
            read_quantity(obj, "inv_g", where),
            read_quantity(obj, "p_ma", where),
            read_quantity(obj, "y_seam", where),
        )
    except UnitTagError:
        raise
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _mode_from_json(obj, where, default_eps):
    label = _require(obj, "label", where)
    try:
        measurement = ModeMeasurement(
            label,
            read_quantity(obj, "freq", where),
            read_quantity(obj, "q_int", where),
            read_quantity(obj, "eps_y", where, required=False, default=default_eps),
            read_quantity(obj, "q_c", where, required=False),
            read_quantity(obj, "photon_number", where, required=False),
        )
    except UnitTagError:
        raise
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    return measurement, _row_from_json(obj, where)


def _reported_from_json(obj, where):
    out = {}
    for channel in CHANNELS:
        matches = [k for k, s in _tag_matches(obj, channel)]
        if not matches:
            continue
        if len(matches) > 1:
            raise ValidationError(f"{where}: {channel} reported more than once")
        key = matches[0]
        entry = obj[key]
        if not isinstance(entry, dict):
            raise ValidationError(f"{where}.{key}: expected an object")
        if "upper_bound" in entry:
            value = read_quantity({key: entry["upper_bound"]}, channel, f"{where}.{key}")
            out[channel] = ReportedValue(value, None, True)
        else:
            value = read_quantity({key: entry.get("value")}, channel, f"{where}.{key}")
            sigma = read_quantity({key: entry.get("sigma")}, channel, f"{where}.{key}")
            out[channel] = ReportedValue(value, sigma, False)
    unknown = set(obj) - {k for c in CHANNELS for k, _ in _tag_matches(obj, c)}
    if unknown:
        raise ValidationError(f"{where}: unknown fields {sorted(unknown)}")
    return out


def device_from_dict(doc, where="device") -> DeviceRecord:
    """Validate a parsed device document and convert it to a :class:`DeviceRecord`."""
    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: expected a JSON object")
    schema = doc.get("schema", DEVICE_SCHEMA)
    if schema != DEVICE_SCHEMA:
        raise ValidationError(f"{where}: unsupported schema {schema!r}")
    device_id = _require(doc, "device_id", where)
    modes_doc = _require(doc, "modes", where, list)
    if not modes_doc:
        raise ValidationError(f"{where}.modes: empty mode list")
    default_eps = read_quantity(doc, "eps_y", where, required=False, default=0.05)
    measurements, rows = [], []
    for k, mode in enumerate(modes_doc):
        if not isinstance(mode, dict):
            raise ValidationError(f"{where}.modes[{k}]: expected an object")
        m, row = _mode_from_json(mode, f"{where}.modes[{k}]", default_eps)
        measurements.append(m)
        rows.append(row)
    labels = [m.label for m in measurements]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"{where}.modes: duplicate mode labels {labels}")
    reported = _reported_from_json(doc.get("reported", {}), f"{where}.reported")
    return DeviceRecord(
        device_id=device_id,
        geometry=doc.get("geometry", ""),
        material=doc.get("material", ""),
        treatments=tuple(doc.get("treatments", ())),
        modes=tuple(measurements),
        participation=ParticipationMatrix(tuple(labels), tuple(rows)),
        gap=read_quantity(doc, "gap", where, required=False),
        reported=reported,
    )


def device_to_dict(record: DeviceRecord) -> dict:
    """SI-tagged JSON form of a record."""
    modes = []
    for m, row in zip(record.modes, record.participation.rows):
        entry = {"label": m.label, SI_TAGS["freq"]: m.frequency, SI_TAGS["q_int"]: m.q_int,
                 SI_TAGS["eps_y"]: m.q_int_rel_sigma}
        if m.q_c is not None:
            entry[SI_TAGS["q_c"]] = m.q_c
        if m.photon_number is not None:
            entry[SI_TAGS["photon_number"]] = m.photon_number
        entry[SI_TAGS["inv_g"]] = row.inv_g
        entry[SI_TAGS["p_ma"]] = row.p_ma
        entry[SI_TAGS["y_seam"]] = row.y_seam
        modes.append(entry)
    reported = {}
    for channel, rep in record.reported.items():
        tag = SI_TAGS[channel]
        reported[tag] = ({"upper_bound": rep.value} if rep.upper_bound
                         else {"value": rep.value, "sigma": rep.sigma})
    doc = {"schema": DEVICE_SCHEMA, "device_id": record.device_id, "geometry": record.geometry,
           "material": record.material, "treatments": list(record.treatments)}
    if record.gap is not None:
        doc[SI_TAGS["gap"]] = record.gap
    doc["modes"] = modes
    if reported:
        doc["reported"] = reported
    return doc


# -- file access -------------------------------------------------------------

def _fixture_dir():
    return resources.files("resolveq") / "fixtures"


def _normalise_name(name):
    return name.replace("(", "").replace(")", "").replace(".json", "")


def fixture_names():
    """Names addressable as ``fixtures://<name>``."""
    return sorted(p.name[:-5] for p in _fixture_dir().iterdir() if p.name.endswith(".json"))


def resolve_path(path):
    """Return a readable path for a filesystem path or a ``fixtures://`` URI."""
    text = str(path)
    if text.startswith(FIXTURE_SCHEME):
        name = _normalise_name(text[len(FIXTURE_SCHEME):])
        lookup = {n.lower(): n for n in fixture_names()}
        if name.lower() not in lookup:
            raise FileNotFoundError(f"no bundled fixture {name!r}; available: {fixture_names()}")
        return _fixture_dir() / f"{lookup[name.lower()]}.json"
    return Path(text)


def read_json(path):
    """Parse JSON from a path or fixture URI; OSError propagates for missing files."""
    target = resolve_path(path)
    with target.open() as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def load_device(path, format="json") -> DeviceRecord:
    """Load and validate a device file (or ``fixtures://<device>``)."""
    if format != "json":
        raise ValidationError(f"device records are JSON only, not {format!r}")
    return device_from_dict(read_json(path), where=str(path))


def save_device(record: DeviceRecord, path):
    with open(path, "w") as fh:
        json.dump(device_to_dict(record), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class CatalogMode:
    """A simulated mode: frequency, participation row and optional bulk dielectric participation."""

    label: str
    frequency: float | None
    row: ParticipationRow
    p_diel: float | None = None


def load_mode_catalog(path) -> list:
    """Modes of a participation file, keeping extra columns such as ``p_diel``."""
    doc = read_json(path)
    if isinstance(doc, dict) and doc.get("schema", DEVICE_SCHEMA) == DEVICE_SCHEMA and "device_id" in doc:
        record = device_from_dict(doc, str(path))
        return [CatalogMode(m.label, m.frequency, row) for m, row in zip(record.modes, record.participation.rows)]
    if not isinstance(doc, dict) or doc.get("schema") != PARTICIPATION_SCHEMA:
        raise ValidationError(f"{path}: expected a participation or device document")
    modes = _require(doc, "modes", str(path), list)
    if not modes:
        raise ValidationError(f"{path}.modes: empty mode list")
    out = []
    for k, mode in enumerate(modes):
        where = f"{path}.modes[{k}]"
        out.append(CatalogMode(
            _require(mode, "label", where),
            read_quantity(mode, "freq", where, required=False),
            _row_from_json(mode, where),
            read_quantity(mode, "p_diel", where, required=False),
        ))
    return out


def load_participation_matrix(path) -> ParticipationMatrix:
    """Participation matrix from a participation file or a device file."""
    catalog = load_mode_catalog(path)
    return ParticipationMatrix(tuple(m.label for m in catalog), tuple(m.row for m in catalog))


def load_loss_vector(path) -> MaterialLossVector:
    """Read ``{"r_s_<unit>": .., "tan_delta": .., "r_seam_<unit>": ..}``."""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    where = str(path)
    return MaterialLossVector(*(read_quantity(doc, c, where) for c in CHANNELS))


def loss_vector_to_dict(x: MaterialLossVector) -> dict:
    return {SI_TAGS[c]: float(x[c]) for c in CHANNELS}


def load_frequencies(path) -> list:
    """``(label, frequency_hz)`` pairs from ``{"modes": [{"label", "freq_<unit>"}]}`` or a device file."""
    doc = read_json(path)
    modes = doc.get("modes") if isinstance(doc, dict) else doc
    if not isinstance(modes, list) or not modes:
        raise ValidationError(f"{path}: expected a non-empty list of modes")
    out = []
    for k, mode in enumerate(modes):
        where = f"{path}.modes[{k}]"
        if not isinstance(mode, dict):
            raise ValidationError(f"{where}: expected an object")
        out.append((_require(mode, "label", where), read_quantity(mode, "freq", where)))
    return out


# -- gap inference -----------------------------------------------------------

@dataclass(frozen=True)
class GapFrequencyTable:
    """Simulated mode frequency versus assembly gap, per mode (SI units)."""

    modes: dict
    description: str = ""
    synthetic: bool = False

    def __post_init__(self):
        clean = {}
        if not self.modes:
            raise ValidationError("gap table has no modes")
        for label, (gaps, freqs) in self.modes.items():
            gaps = np.asarray(gaps, dtype=float)
            freqs = np.asarray(freqs, dtype=float)
            if gaps.ndim != 1 or gaps.shape != freqs.shape:
                raise ValidationError(f"{label}: gap and frequency samples differ in shape")
            if len(gaps) < 2:
                raise ValidationError(f"{label}: need at least 2 samples")
            if not np.all(np.diff(gaps) > 0):
                raise ValidationError(f"{label}: gaps must be strictly increasing")
            if not (np.all(freqs > 0) and np.all(np.isfinite(freqs)) and np.all(gaps > 0)):
                raise ValidationError(f"{label}: gaps and frequencies must be positive")
            gaps.flags.writeable = False
            freqs.flags.writeable = False
            clean[str(label)] = (gaps, freqs)
        object.__setattr__(self, "modes", clean)

    def interpolator(self, label):
        gaps, freqs = self.modes[label]
        return PchipInterpolator(gaps, freqs, extrapolate=False)

    def is_gap_sensitive(self, label, threshold=0.01):
        """True when the mode frequency varies by more than `threshold` over the table."""
        freqs = self.modes[label][1]
        return (freqs.max() - freqs.min()) / freqs.mean() > threshold

    def to_dict(self):
        return {
            "schema": GAP_TABLE_SCHEMA,
            "synthetic": self.synthetic,
            "description": self.description,
            "modes": {label: {"gap_m": gaps.tolist(), "freq_hz": freqs.tolist()}
                      for label, (gaps, freqs) in self.modes.items()},
        }


def _array_quantity(obj, base, where):
    matches = [(k, s) for k, s in _tag_matches(obj, base) if s in UNITS[base]]
    if len(matches) != 1:
        raise UnitTagError(f"{where}: need exactly one unit-tagged {base} array")
    key, suffix = matches[0]
    values = obj[key]
    if not isinstance(values, list):
        raise ValidationError(f"{where}.{key}: expected an array")
    return np.asarray(values, dtype=float) * UNITS[base][suffix]


def load_gap_table(path) -> GapFrequencyTable:
    doc = read_json(path)
    where = str(path)
    if not isinstance(doc, dict) or doc.get("schema") != GAP_TABLE_SCHEMA:
        raise ValidationError(f"{where}: expected schema {GAP_TABLE_SCHEMA!r}")
    modes = _require(doc, "modes", where, dict)
    parsed = {label: (_array_quantity(entry, "gap", f"{where}.modes.{label}"),
                      _array_quantity(entry, "freq", f"{where}.modes.{label}"))
              for label, entry in modes.items()}
    return GapFrequencyTable(parsed, doc.get("description", ""), bool(doc.get("synthetic", False)))


@dataclass(frozen=True)
class GapInference:
    """``mismatch[label] = (f_meas - f_model(gap)) / f_meas``."""

    gap: float
    mismatch: dict
    rms_mismatch: float
    flagged: bool
    threshold: float

    def to_dict(self):
        return {"gap_m": self.gap, "gap_um": self.gap * 1e6, "mismatch": dict(self.mismatch),
                "rms_mismatch": self.rms_mismatch, "flagged": self.flagged,
                "flag_threshold": self.threshold}


def infer_gap(table: GapFrequencyTable, measured, flag_threshold=0.05,
              samples_per_interval=16) -> GapInference:
    """Gap that best matches the measured mode frequencies.

    Minimises ``sum(((f_meas - f_model(g)) / f_meas) ** 2)`` with ``f_model``
    the monotone cubic interpolant of each mode's table. The result is
    flagged when any single mode mismatches by more than `flag_threshold`.

    Raises
    ------
    ValidationError
        Unknown modes, no gap-sensitive mode among the measured ones, or every
        gap-sensitive frequency lies outside its table's range.
    """
    measured = [(str(label), float(f)) for label, f in measured]
    if not measured:
        raise ValidationError("no measured frequencies")
    unknown = [label for label, _ in measured if label not in table.modes]
    if unknown:
        raise ValidationError(f"modes not in gap table: {unknown}")
    if any(not f > 0 for _, f in measured):
        raise ValidationError("measured frequencies must be positive")
    sensitive = [label for label, _ in measured if table.is_gap_sensitive(label)]
    if not sensitive:
        raise ValidationError("no gap-sensitive mode among the measured modes")
    reachable = [label for label, f in measured if label in sensitive
                 and table.modes[label][1].min() <= f <= table.modes[label][1].max()]
    if not reachable:
        raise ValidationError("measured frequencies of the gap-sensitive modes lie outside the table range")

    lo = max(table.modes[label][0][0] for label, _ in measured)
    hi = min(table.modes[label][0][-1] for label, _ in measured)
    if not lo < hi:
        raise ValidationError("measured modes share no common gap range")
    interps = {label: table.interpolator(label) for label, _ in measured}
    f_meas = np.array([f for _, f in measured])

    def mismatches(gap):
        model = np.array([float(interps[label](gap)) for label, _ in measured])
        return (f_meas - model) / f_meas

    def cost(gap):
        return float(np.sum(mismatches(gap) ** 2))

    nodes = np.unique(np.concatenate([g[(g >= lo) & (g <= hi)] for g, _ in
                                      (table.modes[label] for label, _ in measured)] + [[lo, hi]]))
    fine = np.unique(np.concatenate([np.linspace(a, b, samples_per_interval + 1)
                                     for a, b in zip(nodes[:-1], nodes[1:])]))
    costs = np.array([cost(g) for g in fine])
    k = int(np.argmin(costs))
    best_gap, best_cost = float(fine[k]), float(costs[k])
    if best_cost > 0:
        left, right = fine[max(k - 1, 0)], fine[min(k + 1, len(fine) - 1)]
        res = minimize_scalar(cost, bounds=(left, right), method="bounded",
                              options={"xatol": (right - left) * 1e-10})
        if res.fun < best_cost:
            best_gap, best_cost = float(res.x), float(res.fun)
    resid = mismatches(best_gap)
    return GapInference(
        gap=best_gap,
        mismatch={label: float(r) for (label, _), r in zip(measured, resid)},
        rms_mismatch=float(np.sqrt(np.mean(resid**2))),
        flagged=bool(np.max(np.abs(resid)) > flag_threshold),
        threshold=flag_threshold,
    )


# -- bundled data --------------------------------------------------------------

#: Device fixtures in table order.
DEVICE_FIXTURES = ("F1", "F1e", "F2", "F2e", "F2ed", "F5d", "F3", "F3d", "F4",
                   "E1", "E1e", "E2", "E3eb", "E4d", "E4eb", "E4sp")


def builtin_fixtures() -> list:
    """All bundled device records."""
    return [load_device(FIXTURE_SCHEME + name) for name in DEVICE_FIXTURES]


def builtin_participation(name) -> ParticipationMatrix:
    """A bundled participation matrix: ``P_FWGMR``, ``P_ellip`` or a mode catalog."""
    return load_participation_matrix(FIXTURE_SCHEME + name)


def builtin_gap_table() -> GapFrequencyTable:
    return load_gap_table(FIXTURE_SCHEME + "gap_table_synthetic")


__all__ = [
    "CatalogMode", "DeviceRecord", "GapFrequencyTable", "GapInference", "ReportedValue",
    "builtin_fixtures", "builtin_gap_table", "builtin_participation", "device_from_dict",
    "device_to_dict", "fixture_names", "infer_gap", "load_device", "load_frequencies",
    "load_gap_table", "load_loss_vector", "load_mode_catalog", "load_participation_matrix",
    "loss_vector_to_dict", "read_quantity", "resolve_path", "save_device",
]
