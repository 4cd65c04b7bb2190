"""Measurement sensitivity of a multi-mode system over material-loss space.

The figure of merit is the relative uncertainty ``sigma_x,i / x_i`` of the
weighted least-squares estimate, evaluated with the loss rates the system
would show at ``x``, i.e. ``sigma_y = eps_y * (P @ x)``. Where it exceeds one
the channel can only be upper-bounded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .errors import NoCrossingError, UnsolvableSystemError, ValidationError
from .loss_model import CHANNELS, N_CHANNELS, ParticipationMatrix, channel_index

#: Reference slices for the standard maps. For each channel under test the other
#: two channels are pinned here: the out-of-plane channel at the reference slice
#: and the in-plane partner deep in its plateau regime.
MAP_SLICES = {
    "r_s": {"tan_delta": 1e-6, "r_seam": 1e-4},
    "tan_delta": {"r_s": 1e-8, "r_seam": 1e-4},
    "r_seam": {"r_s": 1e-8, "tan_delta": 5e-2},
}
#: Default swept plane per channel under test.
MAP_PLANES = {
    "r_s": ("r_s", "tan_delta"),
    "tan_delta": ("r_s", "tan_delta"),
    "r_seam": ("r_s", "r_seam"),
}
#: Default log ranges (min, max) per channel, SI units.
DEFAULT_RANGES = {
    "r_s": (1e-10, 1e-4),
    "tan_delta": (1e-6, 1e0),
    "r_seam": (1e-10, 1e-3),
}


def _matrix(p):
    if isinstance(p, ParticipationMatrix):
        return p.as_array()
    return np.atleast_2d(np.asarray(p, dtype=float))


def _eps(eps_y, n_modes):
    eps = np.broadcast_to(np.asarray(eps_y, dtype=float), (n_modes,)).copy()
    if not np.all((eps > 0) & (eps < 1)):
        raise ValidationError("eps_y must lie in (0, 1)")
    return eps


def relative_uncertainty_batch(p, eps_y, points, channel, rank_tolerance=1e-10):
    """Vectorised ``sigma_x / x`` for one channel at many loss vectors.

    Parameters
    ----------
    points : array_like, shape (N, 3)
        Loss vectors in SI units.

    Returns
    -------
    ndarray, shape (N,)
    """
    matrix = _matrix(p)
    eps = _eps(eps_y, len(matrix))
    i = channel_index(channel)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rates = points @ matrix.T
    if np.any(rates <= 0):
        raise ValidationError("some mode has zero loss rate at the requested point")
    weighted = matrix[None, :, :] / (eps * rates)[:, :, None]
    norms = np.linalg.norm(weighted, axis=1)
    if np.any(norms == 0):
        raise UnsolvableSystemError("a loss channel has no participating mode")
    scaled = weighted / norms[:, None, :]
    s = np.linalg.svd(scaled, compute_uv=False)
    if np.any(s[:, -1] < rank_tolerance * s[:, 0]):
        raise UnsolvableSystemError("weighted participation matrix is rank deficient")
    gram_inv = np.linalg.inv(np.swapaxes(scaled, 1, 2) @ scaled)
    c_ii = gram_inv[:, i, i] / norms[:, i] ** 2
    return np.sqrt(c_ii) / points[:, i]


def relative_uncertainty_at(p, eps_y, x, channel, rank_tolerance=1e-10) -> float:
    """``sqrt(C_ii) / x_i`` with ``C`` evaluated at the loss rates implied by `x`."""
    x = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    i = channel_index(channel)
    if not x[i] > 0:
        raise ValidationError("channel under test must have a positive value")
    return float(relative_uncertainty_batch(p, eps_y, x[None, :], i, rank_tolerance)[0])


def _point(fixed, channel, value):
    x = np.empty(N_CHANNELS)
    for j in range(N_CHANNELS):
        x[j] = value if j == channel else fixed[j]
    return x


def _fixed_map(fixed_values, exclude):
    out = {}
    for key, value in (fixed_values or {}).items():
        out[channel_index(key)] = float(value)
    needed = [j for j in range(N_CHANNELS) if j not in exclude]
    missing = [CHANNELS[j] for j in needed if j not in out]
    if missing:
        raise ValidationError(f"fixed values missing for {missing}")
    return out


def minimum_resolvable(p, eps_y, channel, fixed_values=None, search_range=(1e-15, 1e3),
                       points_per_decade=20, rtol=1e-3) -> float:
    """Smallest value of `channel` at which ``sigma_x / x = 1``.

    The other channels are pinned at `fixed_values` (defaults:
    :data:`MAP_SLICES`). The range is scanned on a log grid and the first
    sign change is refined by bisection in log space to `rtol`.

    Raises
    ------
    NoCrossingError
        If ``sigma_x / x - 1`` does not change sign over `search_range`.
    """
    i = channel_index(channel)
    if fixed_values is None:
        fixed_values = MAP_SLICES[CHANNELS[i]]
    fixed = _fixed_map(fixed_values, exclude={i})
    lo, hi = search_range
    if not 0 < lo < hi:
        raise ValidationError("search range must satisfy 0 < min < max")
    n = max(2, int(math.ceil(points_per_decade * math.log10(hi / lo))) + 1)
    grid = np.geomspace(lo, hi, n)
    points = np.array([_point(fixed, i, v) for v in grid])
    excess = relative_uncertainty_batch(p, eps_y, points, i) - 1.0
    change = np.flatnonzero(np.sign(excess[:-1]) != np.sign(excess[1:]))
    if change.size == 0:
        raise NoCrossingError(
            f"sigma/x for {CHANNELS[i]} stays {'above' if excess[0] > 0 else 'below'} 1 "
            f"over [{lo:g}, {hi:g}]"
        )
    k = change[0]

    def f(log_value):
        return relative_uncertainty_at(p, eps_y, _point(fixed, i, math.exp(log_value)), i) - 1.0

    root = bisect(f, math.log(grid[k]), math.log(grid[k + 1]), xtol=math.log1p(rtol) / 2)
    return math.exp(root)


@dataclass(frozen=True)
class SensitivityGridSpec:
    """A 2-D log-spaced slice of loss space.

    ``range_a`` and ``range_b`` are ``(min, max, points)`` for the two swept
    channels; ``fixed_values`` pins every channel that is not swept.
    """

    channel: str
    axis_a: str
    range_a: tuple
    axis_b: str
    range_b: tuple
    fixed_values: dict = field(default_factory=dict)
    eps_y: object = 0.05

    def __post_init__(self):
        a, b = channel_index(self.axis_a), channel_index(self.axis_b)
        channel_index(self.channel)
        if a == b:
            raise ValidationError("swept channels must be distinct")
        for rng in (self.range_a, self.range_b):
            lo, hi, n = rng
            if not 0 < lo < hi:
                raise ValidationError(f"invalid range {rng}: need 0 < min < max")
            if int(n) < 2:
                raise ValidationError("need at least 2 points per axis")
        _fixed_map(self.fixed_values, exclude={a, b})

    @classmethod
    def for_channel(cls, channel, points=50, fixed_values=None, eps_y=0.05, ranges=None):
        """Default map for one channel, in the standard plane and slice."""
        name = CHANNELS[channel_index(channel)]
        axis_a, axis_b = MAP_PLANES[name]
        ranges = {**DEFAULT_RANGES, **(ranges or {})}
        out_of_plane = next(c for c in CHANNELS if c not in (axis_a, axis_b))
        fixed = {out_of_plane: MAP_SLICES[name][out_of_plane]}
        if fixed_values:
            fixed.update({CHANNELS[channel_index(k)]: v for k, v in fixed_values.items()})
        return cls(name, axis_a, (*ranges[axis_a], points), axis_b, (*ranges[axis_b], points),
                   fixed, eps_y)


@dataclass
class SensitivityGrid:
    """Grid of ``sigma_x / x``; ``values[i, j]`` sits at ``(a_values[i], b_values[j])``.

    ``boundary`` holds ``(a, b)`` points on the ``sigma_x / x = 1`` contour.
    """

    spec: SensitivityGridSpec
    a_values: np.ndarray
    b_values: np.ndarray
    values: np.ndarray
    boundary: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["swept1", "swept2", "sigma_over_x"])
            for i, a in enumerate(self.a_values):
                for j, b in enumerate(self.b_values):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.values[i, j]))])

    def write_boundary_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["swept1", "swept2"])
            for a, b in self.boundary:
                writer.writerow([repr(float(a)), repr(float(b))])


def _grid_points(spec, a_values, b_values):
    a, b = channel_index(spec.axis_a), channel_index(spec.axis_b)
    fixed = _fixed_map(spec.fixed_values, exclude={a, b})
    aa, bb = np.meshgrid(a_values, b_values, indexing="ij")
    points = np.empty(aa.shape + (N_CHANNELS,))
    for j in range(N_CHANNELS):
        points[..., j] = fixed.get(j, 0.0)
    points[..., a] = aa
    points[..., b] = bb
    return points, fixed


def sensitivity_grid(p, spec: SensitivityGridSpec, log_tol=1e-3) -> SensitivityGrid:
    """Evaluate ``sigma_x / x`` over the grid and trace the ``= 1`` contour.

    The contour is followed along lines parallel to the channel under test
    when that channel is swept (otherwise along the second axis): every sign
    change of ``sigma_x / x - 1`` between neighbouring nodes is bisected in
    log coordinates to `log_tol`.
    """
    a_values = np.geomspace(spec.range_a[0], spec.range_a[1], int(spec.range_a[2]))
    b_values = np.geomspace(spec.range_b[0], spec.range_b[1], int(spec.range_b[2]))
    points, fixed = _grid_points(spec, a_values, b_values)
    channel = channel_index(spec.channel)
    shape = points.shape[:2]
    values = relative_uncertainty_batch(p, spec.eps_y, points.reshape(-1, N_CHANNELS),
                                        channel).reshape(shape)

    a, b = channel_index(spec.axis_a), channel_index(spec.axis_b)
    along_a = channel == a
    boundary = []
    # Each line varies one swept channel while the other is held at a node value.
    if along_a:
        lines = [(b_values[j], values[:, j], a_values) for j in range(len(b_values))]
        moving, held = a, b
    else:
        lines = [(a_values[i], values[i, :], b_values) for i in range(len(a_values))]
        moving, held = b, a
    for held_value, line, coords in lines:
        excess = line - 1.0
        for k in np.flatnonzero(np.sign(excess[:-1]) != np.sign(excess[1:])):
            base = points[0, 0].copy()
            base[held] = held_value

            def f(log_value, base=base):
                x = base.copy()
                x[moving] = math.exp(log_value)
                return relative_uncertainty_batch(p, spec.eps_y, x[None, :], channel)[0] - 1.0

            root = math.exp(bisect(f, math.log(coords[k]), math.log(coords[k + 1]),
                                   xtol=log_tol / 2))
            boundary.append((root, held_value) if along_a else (held_value, root))
    boundary = np.array(boundary, dtype=float).reshape(-1, 2)
    return SensitivityGrid(spec, a_values, b_values, values, boundary)
