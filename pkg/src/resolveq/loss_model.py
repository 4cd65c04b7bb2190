"""Domain types and the forward loss model.

The internal loss rate of every mode is a linear combination of three
material loss factors::

    1/Q_int = (1/G) * R_s + p_MA * tan_delta + y_seam * r_seam

All quantities are SI internally: ohms for the surface resistance, ohm-metres
for the seam resistance per unit length, hertz for frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

#: Loss channels in matrix-column order.
CHANNELS = ("r_s", "tan_delta", "r_seam")
#: Participation factor belonging to each channel, same order.
PARTICIPATIONS = ("inv_g", "p_ma", "y_seam")
N_CHANNELS = len(CHANNELS)


def channel_index(channel) -> int:
    """Map a channel name or integer index onto its column index."""
    if isinstance(channel, (int, np.integer)):
        if not 0 <= channel < N_CHANNELS:
            raise ValidationError(f"channel index {channel} out of range")
        return int(channel)
    try:
        return CHANNELS.index(channel)
    except ValueError:
        raise ValidationError(
            f"unknown channel {channel!r}; expected one of {CHANNELS}"
        ) from None


def _check_nonneg_finite(name, value):
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class MaterialLossVector:
    """Material loss factors of one material/process combination.

    Parameters
    ----------
    r_s : float
        Surface resistance in ohms.
    tan_delta : float
        Loss tangent of the surface oxide, scaled to the reference oxide
        (3 nm thick, relative permittivity 10).
    r_seam : float
        Seam resistance per unit length in ohm-metres.
    """

    r_s: float
    tan_delta: float
    r_seam: float

    def __post_init__(self):
        for name in CHANNELS:
            value = float(getattr(self, name))
            _check_nonneg_finite(name, value)
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.r_s, self.tan_delta, self.r_seam])

    @classmethod
    def from_array(cls, values) -> "MaterialLossVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_CHANNELS,):
            raise ValidationError(f"expected {N_CHANNELS} loss factors, got shape {values.shape}")
        return cls(*values)

    def __getitem__(self, channel):
        return getattr(self, CHANNELS[channel_index(channel)])


@dataclass(frozen=True)
class ParticipationRow:
    """Loss participation factors of one mode.

    Parameters
    ----------
    inv_g : float
        Inverse geometric factor, 1/ohm.
    p_ma : float
        Metal-air surface dielectric participation (dimensionless).
    y_seam : float
        Seam admittance per unit length, 1/(ohm m).
    """

    inv_g: float
    p_ma: float
    y_seam: float

    def __post_init__(self):
        for name in PARTICIPATIONS:
            value = float(getattr(self, name))
            _check_nonneg_finite(name, value)
            object.__setattr__(self, name, value)
        if not (self.inv_g > 0 or self.p_ma > 0 or self.y_seam > 0):
            raise ValidationError("participation row must have at least one positive entry")

    def as_array(self) -> np.ndarray:
        return np.array([self.inv_g, self.p_ma, self.y_seam])


@dataclass(frozen=True)
class ParticipationMatrix:
    """Ordered, labelled participation rows of a multi-mode system."""

    labels: tuple
    rows: tuple

    def __post_init__(self):
        labels = tuple(str(label) for label in self.labels)
        rows = tuple(self.rows)
        if not rows:
            raise ValidationError("participation matrix needs at least one row")
        if len(labels) != len(rows):
            raise ValidationError("labels and rows differ in length")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"mode labels must be unique: {labels}")
        for row in rows:
            if not isinstance(row, ParticipationRow):
                raise ValidationError(f"expected ParticipationRow, got {type(row).__name__}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_rows(cls, items: Sequence) -> "ParticipationMatrix":
        """Build from ``(label, row)`` pairs, where row is a ParticipationRow or 3 numbers."""
        labels, rows = [], []
        for label, row in items:
            if not isinstance(row, ParticipationRow):
                row = ParticipationRow(*row)
            labels.append(label)
            rows.append(row)
        return cls(tuple(labels), tuple(rows))

    @classmethod
    def from_array(cls, array, labels=None) -> "ParticipationMatrix":
        array = np.atleast_2d(np.asarray(array, dtype=float))
        if array.shape[1] != N_CHANNELS:
            raise ValidationError(f"expected {N_CHANNELS} columns, got {array.shape[1]}")
        if labels is None:
            labels = [f"mode-{i}" for i in range(len(array))]
        return cls.from_rows(zip(labels, array))

    def as_array(self) -> np.ndarray:
        return np.array([row.as_array() for row in self.rows])

    def subset(self, labels) -> "ParticipationMatrix":
        lookup = dict(zip(self.labels, self.rows))
        missing = [label for label in labels if label not in lookup]
        if missing:
            raise ValidationError(f"unknown modes {missing}")
        return ParticipationMatrix(tuple(labels), tuple(lookup[label] for label in labels))

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(zip(self.labels, self.rows))


@dataclass(frozen=True)
class ModeMeasurement:
    """Measured internal quality factor of one mode.

    ``q_int_rel_sigma`` is the relative uncertainty of the loss rate
    ``1/q_int`` (equivalently of ``q_int`` to first order).
    """

    label: str
    frequency: float
    q_int: float
    q_int_rel_sigma: float = 0.05
    q_c: float | None = None
    photon_number: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ValidationError(f"{self.label}: frequency must be > 0")
        if not (math.isfinite(self.q_int) and self.q_int > 0):
            raise ValidationError(f"{self.label}: q_int must be > 0")
        if not 0 < self.q_int_rel_sigma < 1:
            raise ValidationError(f"{self.label}: q_int_rel_sigma must lie in (0, 1)")
        if self.q_c is not None and not self.q_c > 0:
            raise ValidationError(f"{self.label}: q_c must be > 0")
        if self.photon_number is not None and not self.photon_number >= 0:
            raise ValidationError(f"{self.label}: photon_number must be >= 0")

    @property
    def loss_rate(self) -> float:
        return 1.0 / self.q_int

    @property
    def loss_rate_sigma(self) -> float:
        return self.q_int_rel_sigma / self.q_int


@dataclass(frozen=True)
class OxideAssumptions:
    """Surface-oxide thickness (m) and relative permittivity."""

    t_ma: float = 3e-9
    eps_r: float = 10.0

    def __post_init__(self):
        if not (math.isfinite(self.t_ma) and self.t_ma > 0):
            raise ValidationError("oxide thickness must be > 0")
        if not (math.isfinite(self.eps_r) and self.eps_r >= 1):
            raise ValidationError("oxide permittivity must be >= 1")


REFERENCE_OXIDE = OxideAssumptions()


class LossBudget(NamedTuple):
    cond: float
    ma: float
    seam: float


def _as_matrix(p) -> np.ndarray:
    if isinstance(p, ParticipationMatrix):
        return p.as_array()
    if isinstance(p, ParticipationRow):
        return p.as_array()[None, :]
    array = np.atleast_2d(np.asarray(p, dtype=float))
    if not np.all(np.isfinite(array)):
        raise ValidationError("participation matrix contains non-finite entries")
    return array


def _as_vector(x) -> np.ndarray:
    if isinstance(x, MaterialLossVector):
        return x.as_array()
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("loss vector contains non-finite entries")
    return x


def forward_loss_rates(p, x) -> np.ndarray:
    """Per-mode internal loss rates ``1/Q_int = P @ x``."""
    matrix = _as_matrix(p)
    vector = _as_vector(x)
    if matrix.shape[1] != vector.shape[-1]:
        raise ValidationError(
            f"dimension mismatch: {matrix.shape[1]} channels vs {vector.shape[-1]} loss factors"
        )
    return matrix @ vector


def predict_quality_factors(p: ParticipationMatrix, x: MaterialLossVector) -> list:
    """Predicted ``(label, Q_int)`` per mode; loss-free modes get ``inf``."""
    if not isinstance(x, MaterialLossVector):
        x = MaterialLossVector.from_array(x)
    rates = forward_loss_rates(p, x)
    with np.errstate(divide="ignore"):
        q = np.where(rates > 0, 1.0 / np.where(rates > 0, rates, 1.0), np.inf)
    labels = p.labels if isinstance(p, ParticipationMatrix) else [f"mode-{i}" for i in range(len(q))]
    return list(zip(labels, q.tolist()))


def loss_budget(p_row: ParticipationRow, x: MaterialLossVector) -> LossBudget:
    """Fractions of a mode's total loss from conductor, MA dielectric and seam."""
    if not isinstance(p_row, ParticipationRow):
        p_row = ParticipationRow(*p_row)
    if not isinstance(x, MaterialLossVector):
        x = MaterialLossVector.from_array(x)
    parts = p_row.as_array() * x.as_array()
    total = parts.sum()
    if not total > 0:
        raise ValidationError("total loss is zero; budget undefined")
    return LossBudget(*(parts / total).tolist())


def scale_loss_tangent(tan_delta_actual, actual: OxideAssumptions,
                       assumed: OxideAssumptions = REFERENCE_OXIDE):
    """Convert an oxide's actual loss tangent to the scaled loss tangent.

    The scaled value is what the loss model reports when the participation
    was computed with the ``assumed`` oxide while the real oxide is ``actual``.
    """
    return (actual.t_ma / assumed.t_ma) * (assumed.eps_r / actual.eps_r) * tan_delta_actual


def unscale_loss_tangent(tan_delta_scaled, actual: OxideAssumptions,
                         assumed: OxideAssumptions = REFERENCE_OXIDE):
    """Inverse of :func:`scale_loss_tangent`."""
    return (assumed.t_ma / actual.t_ma) * (actual.eps_r / assumed.eps_r) * tan_delta_scaled
