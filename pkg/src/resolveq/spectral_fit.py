"""Single-port reflection spectra: synthesis and circle fitting.

Model of a reflection trace near one resonance::

    S11(f) = a e^{i alpha} e^{-2 pi i f tau}
             * [1 - (2 Q_l / |Q_c|) e^{i phi} / (1 + 2 i Q_l (f - f0) / f0)]

    1/Q_l = 1/Q_int + cos(phi) / |Q_c|

The fit follows the usual circle-fit recipe: remove the cable delay by making
the trace as circular as possible, fit a circle algebraically, fit the phase
around the circle centre against frequency for ``f0`` and ``Q_l``, then read
``|Q_c|`` and ``phi`` off the circle once it is normalised to the
off-resonant point.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .errors import FitFailure, ValidationError
from .loss_model import ModeMeasurement

MIN_POINTS = 32


class FitFlag(str, Enum):
    OFF_RESONANCE_SPAN = "off_resonance_span"
    UNDERCOUPLED_EXTREME = "undercoupled_extreme"
    LOW_SNR = "low_snr"
    NONPOSITIVE_QINT = "nonpositive_q_int"


@dataclass(frozen=True)
class ReflectionTrace:
    """Complex reflection coefficient sampled on a strictly increasing grid (Hz)."""

    frequencies: np.ndarray
    s11: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        s = np.asarray(self.s11, dtype=complex)
        if f.ndim != 1 or s.shape != f.shape:
            raise ValidationError("frequencies and s11 must be 1-D arrays of equal length")
        if len(f) < MIN_POINTS:
            raise ValidationError(f"trace needs at least {MIN_POINTS} points, got {len(f)}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(s))):
            raise ValidationError("trace contains non-finite values")
        if not np.all(np.diff(f) > 0):
            raise ValidationError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "s11", s)
        object.__setattr__(self, "metadata", dict(self.metadata))


@dataclass(frozen=True)
class ResonanceFit:
    """Result of :func:`circle_fit_resonance`.

    ``errors`` maps parameter names to one-sigma standard errors.
    ``circle_radius`` is the radius in the canonical frame (environment
    removed), equal to ``Q_l / |Q_c|``.
    """

    f0: float
    q_loaded: float
    q_c_mag: float
    phi: float
    q_int: float
    errors: dict
    residual_rms: float
    amplitude: float
    alpha: float
    tau: float
    circle_radius: float
    flags: frozenset = frozenset()

    @property
    def q_c_complex(self) -> complex:
        return self.q_c_mag * complex(math.cos(self.phi), -math.sin(self.phi))

    @property
    def ok(self) -> bool:
        return FitFlag.NONPOSITIVE_QINT not in self.flags

    def to_dict(self):
        return {
            "f0_hz": self.f0,
            "q_loaded": self.q_loaded,
            "q_c_mag": self.q_c_mag,
            "phi_rad": self.phi,
            "q_int": self.q_int,
            "errors": dict(self.errors),
            "residual_rms": self.residual_rms,
            "environment": {"amplitude": self.amplitude, "alpha_rad": self.alpha,
                            "tau_s": self.tau},
            "circle_radius": self.circle_radius,
            "flags": sorted(flag.value for flag in self.flags),
        }


def loaded_q(q_int, q_c, phi=0.0):
    """``Q_l`` from ``1/Q_l = 1/Q_int + cos(phi)/|Q_c|``."""
    inv = 1.0 / q_int + (math.cos(phi) / q_c if math.isfinite(q_c) else 0.0)
    if not inv > 0:
        raise ValidationError("mismatch phase makes the loaded Q non-positive")
    return 1.0 / inv


def reflection_model(frequencies, f0, q_loaded, q_c, phi=0.0, amplitude=1.0, alpha=0.0, tau=0.0):
    f = np.asarray(frequencies, dtype=float)
    env = amplitude * np.exp(1j * alpha) * np.exp(-2j * np.pi * f * tau)
    if not math.isfinite(q_c):
        return env
    resonance = (2 * q_loaded / q_c) * np.exp(1j * phi) / (1 + 2j * q_loaded * (f - f0) / f0)
    return env * (1 - resonance)


def synthesize_reflection(f0, q_int, q_c, mismatch_phase=0.0, environment=(1.0, 0.0, 0.0),
                          noise_sigma=0.0, freq_grid=None, rng=None, metadata=None):
    """Generate a reflection trace from the model, with optional complex noise.

    Parameters
    ----------
    environment : (amplitude, global_phase, cable_delay)
    noise_sigma : float
        Standard deviation of the Gaussian noise added to each quadrature.
    freq_grid : array_like
        Frequencies in Hz.
    rng : numpy Generator or seed, optional
    """
    if not (q_int > 0 and q_c > 0):
        raise ValidationError("quality factors must be positive")
    if freq_grid is None:
        raise ValidationError("freq_grid is required")
    amplitude, alpha, tau = environment
    q_l = loaded_q(q_int, q_c, mismatch_phase)
    s11 = reflection_model(freq_grid, f0, q_l, q_c, mismatch_phase, amplitude, alpha, tau)
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        s11 = s11 + noise_sigma * (rng.standard_normal(s11.shape) + 1j * rng.standard_normal(s11.shape))
    return ReflectionTrace(np.asarray(freq_grid, dtype=float), s11, metadata or {})


def linewidth_grid(f0, q_loaded, n_points=201, n_linewidths=10.0):
    """Grid of `n_points` centred on `f0`, spanning `n_linewidths` full linewidths."""
    half = 0.5 * n_linewidths * f0 / q_loaded
    return np.linspace(f0 - half, f0 + half, n_points)


# -- circle fit --------------------------------------------------------------

def taubin_circle(z):
    """Algebraic (Taubin) circle fit to complex points; returns ``(centre, radius)``."""
    z = np.asarray(z, dtype=complex)
    centroid = z.mean()
    x, y = (z - centroid).real, (z - centroid).imag
    zz = x * x + y * y
    zmean = zz.mean()
    z0 = (zz - zmean) / (2.0 * math.sqrt(zmean))
    _, _, vt = np.linalg.svd(np.column_stack([z0, x, y]), full_matrices=False)
    a = vt[2].copy()
    a[0] /= 2.0 * math.sqrt(zmean)
    a3 = -zmean * a[0]
    centre = complex(-a[1] / a[0] / 2, -a[2] / a[0] / 2) + centroid
    radius = math.sqrt(a[1] ** 2 + a[2] ** 2 - 4 * a[0] * a3) / abs(a[0]) / 2
    return centre, radius


def _circle_residual(z):
    centre, radius = taubin_circle(z)
    return float(np.sqrt(np.mean((np.abs(z - centre) - radius) ** 2)))


def _edge_delay_guess(df, s11):
    n_edge = max(3, len(df) // 10)
    phase = np.unwrap(np.angle(s11))
    slopes = [np.polyfit(df[sl], phase[sl], 1)[0]
              for sl in (slice(0, n_edge), slice(-n_edge, None))]
    return -np.mean(slopes) / (2 * np.pi)


def fit_cable_delay(df, s11, n_scan=161):
    """Delay ``tau`` (relative to the grid origin) that makes the trace most circular."""
    span = df[-1] - df[0]
    guess = _edge_delay_guess(df, s11)
    width = 2.0 / span
    taus = guess + np.linspace(-width, width, n_scan)

    def cost(tau):
        return _circle_residual(s11 * np.exp(2j * np.pi * df * tau))

    costs = np.array([cost(t) for t in taus])
    k = int(np.argmin(costs))
    step = taus[1] - taus[0]
    res = minimize_scalar(cost, bounds=(taus[k] - step, taus[k] + step), method="bounded",
                          options={"xatol": abs(step) * 1e-10})
    return float(res.x) if res.fun <= costs[k] else float(taus[k])


def _phase_model(params, df, f_ref):
    theta0, q_l, d0 = params
    return theta0 + 2 * np.arctan(2 * q_l * (d0 - df) / (f_ref + d0))


def _phase_guess(df, theta, f_ref):
    theta_u = np.unwrap(theta)
    window = max(1, len(df) // 40)
    smooth = np.convolve(theta_u, np.ones(window) / window, mode="same")
    grad = np.gradient(smooth, df)
    inner = slice(window, len(df) - window) if len(df) > 4 * window else slice(None)
    k = np.arange(len(df))[inner][np.argmax(np.abs(grad[inner]))]
    d0 = df[k]
    q_l = max(abs(grad[k]) * (f_ref + d0) / 4.0, 1.0)
    return np.array([theta_u[k], q_l, d0])


def _fit_phase(df, theta, f_ref):
    guess = _phase_guess(df, theta, f_ref)

    def residuals(params):
        return np.angle(np.exp(1j * (theta - _phase_model(params, df, f_ref))))

    best = None
    span = df[-1] - df[0]
    for scale in (1.0, 0.3, 3.0):
        start = guess * np.array([1.0, scale, 1.0])
        res = least_squares(residuals, start, x_scale=np.array([1.0, start[1], span / 50]),
                            method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=4000)
        if best is None or res.cost < best.cost:
            best = res
    return best


def circle_fit_resonance(trace: ReflectionTrace, failure_threshold=0.25) -> ResonanceFit:
    """Extract ``f0``, ``Q_l``, ``|Q_c|``, ``phi`` and ``Q_int`` from a reflection trace.

    Raises
    ------
    FitFailure
        If the delay-corrected trace is not circular (rms radial residual
        above `failure_threshold` times the smaller of the fitted radius and
        the rms spread of the points) or the phase fit
        does not produce a positive loaded Q.
    """
    f = trace.frequencies
    f_ref = float(np.median(f))
    df = f - f_ref
    tau = fit_cable_delay(df, trace.s11)
    z = trace.s11 * np.exp(2j * np.pi * df * tau)
    centre, radius = taubin_circle(z)
    radial = np.abs(z - centre) - radius
    residual_rms = float(np.sqrt(np.mean(radial**2)))
    # A point cloud also admits a huge circle with small relative scatter, so
    # the scatter is judged against the spread of the points as well.
    spread = float(np.sqrt(np.mean(np.abs(z - z.mean()) ** 2)))
    if not residual_rms <= failure_threshold * min(radius, spread):
        raise FitFailure("trace is not circular", {"residual_rms": residual_rms, "radius": float(radius),
                                                    "spread": spread})

    theta = np.angle(z - centre)
    phase = _fit_phase(df, theta, f_ref)
    theta0, q_l, d0 = phase.x
    if not q_l > 0:
        raise FitFailure("phase fit returned a non-positive loaded Q", {"q_loaded": q_l})

    off = centre + radius * np.exp(1j * (theta0 - np.pi))
    r_n = radius / abs(off)
    phi = float(np.angle(1 - centre / off))

    # Joint refinement of every model parameter on the complex data; the
    # circle-fit values are the starting point and the Jacobian gives errors.
    start = np.array([off.real, off.imag, tau, d0, q_l, r_n, phi])
    scale = np.array([abs(off), abs(off), 1.0 / (f[-1] - f[0]), (f_ref + d0) / q_l, q_l,
                      max(r_n, 1e-3), 0.1])

    def joint(params):
        re_a, im_a, tau_, d0_, q_l_, r_n_, phi_ = params
        model = complex(re_a, im_a) * np.exp(-2j * np.pi * df * tau_) * (
            1 - 2 * r_n_ * np.exp(1j * phi_) / (1 + 2j * q_l_ * (df - d0_) / (f_ref + d0_)))
        diff = trace.s11 - model
        return np.concatenate([diff.real, diff.imag])

    refined = least_squares(joint, start, x_scale=scale, method="lm", xtol=1e-15,
                            ftol=1e-15, gtol=1e-15, max_nfev=2000)
    re_a, im_a, tau, d0, q_l, r_n, phi = refined.x
    if r_n < 0:
        r_n, phi = -r_n, phi + np.pi
    phi = float(np.angle(np.exp(1j * phi)))
    if not q_l > 0:
        raise FitFailure("joint fit returned a non-positive loaded Q", {"q_loaded": q_l})
    f0 = f_ref + d0
    off = complex(re_a, im_a)
    amplitude = abs(off)
    alpha = float(np.angle(off * np.exp(2j * np.pi * f_ref * tau)))
    q_c_mag = q_l / r_n
    denom = 1 - r_n * math.cos(phi)
    q_int = q_l / denom if denom != 0 else math.inf

    n = len(f)
    s2 = 2 * refined.cost / max(2 * n - len(start), 1)
    jac = refined.jac * scale  # unit-scale columns before inverting
    try:
        cov = np.linalg.inv(jac.T @ jac) * s2 * np.outer(scale, scale)
    except np.linalg.LinAlgError:
        cov = np.full((7, 7), np.inf)
    # Gradients with respect to (d0, q_l, r_n, phi) -> parameter slots 3..6.
    grads = {
        "f0": np.array([1.0, 0, 0, 0]),
        "q_loaded": np.array([0, 1.0, 0, 0]),
        "q_c_mag": np.array([0, 1 / r_n, -q_l / r_n**2, 0]),
        "phi": np.array([0, 0, 0, 1.0]),
        "q_int": np.array([0, 1 / denom, q_l * math.cos(phi) / denom**2,
                           -q_l * r_n * math.sin(phi) / denom**2]),
    }
    sub = cov[3:, 3:]
    errors = {k: float(math.sqrt(max(g @ sub @ g, 0.0))) for k, g in grads.items()}
    radius = r_n * amplitude
    residual_rms = float(np.sqrt(2 * refined.cost / n))

    flags = set()
    linewidth = f0 / q_l
    if not (f[0] <= f0 <= f[-1]) or (f[-1] - f[0]) < 3 * linewidth:
        flags.add(FitFlag.OFF_RESONANCE_SPAN)
    if 2 * r_n < 0.02:
        flags.add(FitFlag.UNDERCOUPLED_EXTREME)
    if residual_rms > 0.1 * radius:
        flags.add(FitFlag.LOW_SNR)
    if not q_int > 0:
        flags.add(FitFlag.NONPOSITIVE_QINT)

    return ResonanceFit(
        f0=float(f0), q_loaded=float(q_l), q_c_mag=float(q_c_mag), phi=phi, q_int=float(q_int),
        errors=errors,
        residual_rms=residual_rms, amplitude=float(amplitude), alpha=alpha, tau=float(tau),
        circle_radius=float(r_n), flags=frozenset(flags),
    )


def fit_to_measurement(fit: ResonanceFit, eps_floor=0.05, label="mode",
                       photon_number=None) -> ModeMeasurement:
    """Turn a fit into a :class:`ModeMeasurement`.

    The relative uncertainty is ``max(sigma_Qint / Q_int, eps_floor)``.
    """
    if not fit.ok or not fit.q_int > 0:
        raise ValidationError(f"{label}: fit has non-positive Q_int; cannot build a measurement")
    rel = fit.errors.get("q_int", 0.0) / fit.q_int
    eps = max(rel, eps_floor)
    if not 0 < eps < 1:
        raise ValidationError(f"{label}: relative uncertainty {eps:g} outside (0, 1)")
    return ModeMeasurement(label, fit.f0, fit.q_int, eps, q_c=fit.q_c_mag,
                           photon_number=photon_number)


# -- trace I/O ---------------------------------------------------------------

def read_trace_csv(path, metadata=None) -> ReflectionTrace:
    """Read ``frequency_hz, re_s11, im_s11`` columns (header row required)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.lstrip().startswith("#"))
        missing = {"frequency_hz", "re_s11", "im_s11"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        try:
            rows = [(float(r["frequency_hz"]), float(r["re_s11"]), float(r["im_s11"]))
                    for r in reader]
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: line {reader.line_num}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(-1, 3)
    return ReflectionTrace(data[:, 0], data[:, 1] + 1j * data[:, 2], metadata or {})


def write_trace_csv(trace: ReflectionTrace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frequency_hz", "re_s11", "im_s11"])
        for f, s in zip(trace.frequencies, trace.s11):
            writer.writerow([repr(float(f)), repr(float(s.real)), repr(float(s.imag))])


def read_trace_json(path) -> ReflectionTrace:
    """Read a JSON trace: either a list of ``{frequency_hz, re_s11, im_s11}``
    records or an object with those keys as arrays plus optional ``metadata``."""
    with open(path) as fh:
        doc = json.load(fh)
    metadata = {}
    if isinstance(doc, dict):
        metadata = doc.get("metadata", {})
        try:
            f, re, im = doc["frequency_hz"], doc["re_s11"], doc["im_s11"]
        except KeyError as exc:
            raise ValidationError(f"{path}: missing key {exc}") from None
    else:
        try:
            f = [r["frequency_hz"] for r in doc]
            re = [r["re_s11"] for r in doc]
            im = [r["im_s11"] for r in doc]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: bad trace record ({exc})") from None
    return ReflectionTrace(np.asarray(f, float), np.asarray(re, float) + 1j * np.asarray(im, float),
                           metadata)
