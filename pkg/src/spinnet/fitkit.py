"""Nonlinear least-squares and statistical utilities shared by the analysis paths.

The fitters wrap :func:`scipy.optimize.least_squares` (trust-region reflective,
finite-difference Jacobian) behind a small model registry.  Every model carries
its parameter names, bounds and an automatic initial-guess heuristic, so the
callers can fit traces without hand-tuning start values.  Guesses are computed
on data sorted by abscissa, which keeps the whole fit invariant under
reordering of the input points.

Uncertainty convention: if per-point standard deviations are supplied the
reported covariance is absolute (the weights are trusted); otherwise the
covariance is scaled by the reduced chi-square, as is customary for
unweighted fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .constants import TWO_PI

__all__ = [
    "FitError",
    "FitResult",
    "ModelSpec",
    "STRETCHED_EXP",
    "EXP_SATURATION",
    "LORENTZIAN",
    "DAMPED_COSINE",
    "multi_lorentzian",
    "fit",
    "linear_fit",
    "mc_propagate",
    "McResult",
    "fft_spectrum",
    "spectrum_peak",
    "reduce_mean_sem",
]


class FitError(ValueError):
    """Raised for underdetermined or otherwise unusable fit input."""


@dataclass
class FitResult:
    """Parameters, 1-sigma uncertainties and covariance of a least-squares fit."""

    model: str
    param_names: tuple[str, ...]
    params: np.ndarray
    sigmas: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int

    def __getitem__(self, name: str) -> float:
        return float(self.params[self.param_names.index(name)])

    def sigma(self, name: str) -> float:
        return float(self.sigmas[self.param_names.index(name)])

    def as_dict(self) -> dict:
        """JSON-ready summary: per-parameter value/sigma plus fit diagnostics."""
        return {
            "model": self.model,
            "params": {n: float(v) for n, v in zip(self.param_names, self.params)},
            "sigmas": {n: float(s) for n, s in zip(self.param_names, self.sigmas)},
            "residual_norm": float(self.residual_norm),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }


@dataclass(frozen=True)
class ModelSpec:
    """A fittable model: y = func(x, *params) with bounds and a guess heuristic.

    ``guess(x, y)`` receives data sorted by x and returns a start vector
    clipped into the bounds before use.
    """

    name: str
    func: Callable
    param_names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    guess: Callable[[np.ndarray, np.ndarray], Sequence[float]]


def _stretched_exp(t, amp, t2, beta):
    ratio = np.clip(np.asarray(t, dtype=float) / t2, 0.0, None)
    return amp * np.exp(-(ratio**beta))


def _guess_stretched_exp(x, y):
    amp = y[0] if y[0] != 0 else float(np.max(np.abs(y)) or 1.0)
    target = amp / math.e
    below = np.nonzero(y <= target if amp > 0 else y >= target)[0]
    t2 = x[below[0]] if below.size and below[0] > 0 else (x[-1] - x[0]) / 2 + x[0]
    return [amp, max(t2, 1e-9), 1.0]


STRETCHED_EXP = ModelSpec(
    name="stretched_exp",
    func=_stretched_exp,
    param_names=("amp", "t2", "beta"),
    lower=(0.0, 1e-12, 0.3),
    upper=(np.inf, np.inf, 3.0),
    guess=_guess_stretched_exp,
)


def _exp_saturation(x, amp, tau):
    return amp * (1.0 - np.exp(-np.asarray(x, dtype=float) / tau))


def _guess_exp_saturation(x, y):
    amp = float(np.mean(y[-max(1, y.size // 4):]))
    target = amp * (1.0 - 1.0 / math.e)
    crossed = np.nonzero(y >= target if amp > 0 else y <= target)[0]
    tau = x[crossed[0]] if crossed.size and x[crossed[0]] > 0 else (x[-1] - x[0]) / 3
    return [amp if amp != 0 else 1.0, max(tau, 1e-9)]


EXP_SATURATION = ModelSpec(
    name="exp_saturation",
    func=_exp_saturation,
    param_names=("amp", "tau"),
    lower=(-np.inf, 1e-12),
    upper=(np.inf, np.inf),
    guess=_guess_exp_saturation,
)


def _lorentzian(x, center, hwhm, amp, offset):
    return offset + amp * hwhm**2 / ((np.asarray(x, dtype=float) - center) ** 2 + hwhm**2)


def _guess_lorentzian(x, y):
    offset = float(np.median(y))
    idx = int(np.argmax(np.abs(y - offset)))
    amp = float(y[idx] - offset)
    half = np.abs(y - offset) > abs(amp) / 2
    span = x[-1] - x[0]
    width = 0.5 * span * half.sum() / max(len(x), 1)
    return [float(x[idx]), max(width, span / 50 if span > 0 else 1e-3), amp, offset]


LORENTZIAN = ModelSpec(
    name="lorentzian",
    func=_lorentzian,
    param_names=("center", "hwhm", "amp", "offset"),
    lower=(-np.inf, 1e-12, -np.inf, -np.inf),
    upper=(np.inf, np.inf, np.inf, np.inf),
    guess=_guess_lorentzian,
)


def _damped_cosine(t, amp, freq, phase, tau, offset):
    t = np.asarray(t, dtype=float)
    return offset + amp * np.cos(TWO_PI * freq * t + phase) * np.exp(-np.clip(t, 0, None) / tau)


def _guess_damped_cosine(x, y):
    offset = float(np.mean(y))
    amp = (float(np.max(y)) - float(np.min(y))) / 2
    dt = float(np.median(np.diff(x))) if len(x) > 1 else 1.0
    freqs, mag = fft_spectrum(y - offset, dt)
    f0 = spectrum_peak(freqs, mag)
    if f0 is None:
        f0 = 1.0 / max(x[-1] - x[0], 1e-9)
    return [amp if amp > 0 else 1.0, f0, 0.0, max(x[-1] - x[0], 1e-9), offset]


DAMPED_COSINE = ModelSpec(
    name="damped_cosine",
    func=_damped_cosine,
    param_names=("amp", "freq", "phase", "tau", "offset"),
    lower=(0.0, 0.0, -np.pi, 1e-12, -np.inf),
    upper=(np.inf, np.inf, np.pi, np.inf, np.inf),
    guess=_guess_damped_cosine,
)


def multi_lorentzian(n_components: int) -> ModelSpec:
    """Sum of ``n_components`` Lorentzians on a shared offset.

    Parameters are center_i, hwhm_i, amp_i for each component plus one
    offset.  The guess splits the x range into equal windows and seats one
    component on the largest excursion from the median inside each window.
    """
    if n_components < 1:
        raise FitError("need at least one component")

    def func(x, *p):
        x = np.asarray(x, dtype=float)
        out = np.full_like(x, p[-1])
        for k in range(n_components):
            c, w, a = p[3 * k], p[3 * k + 1], p[3 * k + 2]
            out = out + a * w**2 / ((x - c) ** 2 + w**2)
        return out

    def guess(x, y):
        offset = float(np.median(y))
        edges = np.linspace(0, len(x), n_components + 1).astype(int)
        p = []
        span = x[-1] - x[0]
        for k in range(n_components):
            sl = slice(edges[k], max(edges[k + 1], edges[k] + 1))
            idx = edges[k] + int(np.argmax(np.abs(y[sl] - offset)))
            p += [float(x[idx]), span / (6 * n_components), float(y[idx] - offset)]
        return p + [offset]

    names = []
    lower = []
    upper = []
    for k in range(1, n_components + 1):
        names += [f"center{k}", f"hwhm{k}", f"amp{k}"]
        lower += [-np.inf, 1e-12, -np.inf]
        upper += [np.inf, np.inf, np.inf]
    return ModelSpec(
        name=f"multi_lorentzian_{n_components}",
        func=func,
        param_names=tuple(names + ["offset"]),
        lower=tuple(lower + [-np.inf]),
        upper=tuple(upper + [np.inf]),
        guess=guess,
    )


def _covariance(jac, cost, n_points, n_params, absolute):
    jtj = jac.T @ jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj)
    if not absolute and n_points > n_params:
        cov = cov * (2.0 * cost / (n_points - n_params))
    return cov


def fit(
    model: ModelSpec,
    xdata,
    ydata,
    sigma=None,
    p0: Optional[Sequence[float]] = None,
    max_nfev: int = 2000,
) -> FitResult:
    """Weighted least-squares fit of ``model`` to (xdata, ydata).

    ``sigma`` gives per-point 1-sigma errors; when present the covariance is
    absolute, otherwise it is scaled by the reduced chi-square.  A fit that
    exhausts its iteration budget comes back with ``converged=False`` rather
    than raising; only structurally unusable input raises :class:`FitError`.
    """
    x = np.asarray(xdata, dtype=float).ravel()
    y = np.asarray(ydata, dtype=float).ravel()
    if x.size != y.size:
        raise FitError("xdata and ydata lengths differ")
    n_params = len(model.param_names)
    if x.size < n_params:
        raise FitError(
            f"{model.name}: {x.size} points cannot determine {n_params} parameters"
        )
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float).ravel()
        if np.any(sigma <= 0):
            raise FitError("sigma values must be positive")
        weights = 1.0 / sigma
    else:
        weights = None

    # sort by x up front: makes the fit bit-identical under input reordering
    order = np.argsort(x, kind="stable")
    x = x[order]
    y = y[order]
    if weights is not None:
        weights = weights[order]
    if p0 is None:
        p0 = model.guess(x, y)
    p0 = np.clip(np.asarray(p0, dtype=float), model.lower, model.upper)
    # strictly inside the bounds, as required by the trf start point
    lo = np.asarray(model.lower)
    hi = np.asarray(model.upper)
    at_lo = p0 <= lo
    p0[at_lo] = np.where(np.isfinite(hi[at_lo]), lo[at_lo] + 1e-12 * (hi[at_lo] - lo[at_lo]), lo[at_lo] + 1e-12)

    def residuals(p):
        r = model.func(x, *p) - y
        return r * weights if weights is not None else r

    res = least_squares(
        residuals,
        p0,
        bounds=(model.lower, model.upper),
        method="trf",
        max_nfev=max_nfev,
    )
    cov = _covariance(res.jac, res.cost, x.size, n_params, absolute=sigma is not None)
    sigmas = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(
        model=model.name,
        param_names=model.param_names,
        params=res.x,
        sigmas=sigmas,
        covariance=cov,
        residual_norm=float(np.sqrt(2.0 * res.cost)),
        converged=bool(res.status > 0),
        iterations=int(res.nfev),
    )


def linear_fit(x, y, sigma=None, through_origin: bool = False) -> FitResult:
    """Weighted linear regression by closed-form normal equations.

    With ``through_origin`` the model is y = slope * x, otherwise
    y = slope * x + intercept.  Covariance convention matches :func:`fit`.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise FitError("x and y lengths differ")
    n_params = 1 if through_origin else 2
    if x.size < n_params + (0 if through_origin else 0):
        raise FitError("not enough points")
    if not through_origin and x.size < 2:
        raise FitError("a line with free intercept needs at least 2 points")
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float).ravel()
        if np.any(sigma <= 0):
            raise FitError("sigma values must be positive")
        w = 1.0 / sigma**2
    else:
        w = np.ones_like(x)
    order = np.argsort(x, kind="stable")
    x, y, w = x[order], y[order], w[order]

    if through_origin:
        sxx = float(np.sum(w * x * x))
        if sxx == 0:
            raise FitError("degenerate abscissa for through-origin fit")
        slope = float(np.sum(w * x * y)) / sxx
        cov = np.array([[1.0 / sxx]])
        params = np.array([slope])
        names = ("slope",)
        resid = y - slope * x
    else:
        s0 = float(np.sum(w))
        sx = float(np.sum(w * x))
        sxx = float(np.sum(w * x * x))
        det = s0 * sxx - sx * sx
        if det <= 0:
            raise FitError("degenerate abscissa for linear fit")
        sy = float(np.sum(w * y))
        sxy = float(np.sum(w * x * y))
        slope = (s0 * sxy - sx * sy) / det
        intercept = (sxx * sy - sx * sxy) / det
        cov = np.array([[s0, -sx], [-sx, sxx]]) / det
        params = np.array([slope, intercept])
        names = ("slope", "intercept")
        resid = y - slope * x - intercept

    chi2 = float(np.sum(w * resid**2))
    if sigma is None and x.size > n_params:
        cov = cov * chi2 / (x.size - n_params)
    sigmas = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(
        model="linear_origin" if through_origin else "linear",
        param_names=names,
        params=params,
        sigmas=sigmas,
        covariance=cov,
        residual_norm=math.sqrt(chi2),
        converged=True,
        iterations=0,
    )


@dataclass
class McResult:
    """Summary of a Monte Carlo uncertainty propagation."""

    mean: float
    sigma: float
    quantiles: dict = field(default_factory=dict)
    n_samples: int = 0
    n_rejected: int = 0
    rejection_warning: bool = False


def mc_propagate(
    func: Callable,
    means: Sequence[float],
    sigmas: Sequence[float],
    n: int = 10000,
    seed: int = 0,
    reject: Optional[Callable] = None,
    quantile_levels: Sequence[float] = (0.025, 0.16, 0.5, 0.84, 0.975),
) -> McResult:
    """Propagate Gaussian input uncertainties through ``func`` by sampling.

    ``func`` receives one array per input (vectorized over the n draws).
    ``reject`` may veto draws (e.g. nonphysical denominators); rejected draws
    are counted and a warning flag is set when they exceed 1% of n.
    """
    means = np.asarray(means, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if means.shape != sigmas.shape:
        raise FitError("means and sigmas lengths differ")
    if np.any(sigmas < 0):
        raise FitError("sigmas must be nonnegative")
    rng = np.random.default_rng(seed)
    draws = rng.normal(means, sigmas, size=(n, means.size))
    cols = [draws[:, k] for k in range(means.size)]
    if reject is not None:
        keep = ~reject(*cols)
        n_rejected = int(n - keep.sum())
        cols = [c[keep] for c in cols]
    else:
        n_rejected = 0
    if not cols[0].size:
        raise FitError("all Monte Carlo draws rejected")
    values = np.asarray(func(*cols), dtype=float)
    qs = {q: float(np.quantile(values, q)) for q in quantile_levels}
    return McResult(
        mean=float(np.mean(values)),
        sigma=float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
        quantiles=qs,
        n_samples=int(values.size),
        n_rejected=n_rejected,
        rejection_warning=n_rejected > 0.01 * n,
    )


def fft_spectrum(trace, dt: float):
    """Magnitude spectrum of a real trace sampled every ``dt`` us.

    Returns (freqs_MHz, magnitude) including the zero-frequency bin.
    """
    trace = np.asarray(trace, dtype=float)
    if dt <= 0:
        raise FitError("dt must be positive")
    mag = np.abs(np.fft.rfft(trace))
    freqs = np.fft.rfftfreq(trace.size, d=dt)
    return freqs, mag


def spectrum_peak(freqs, magnitude, rel_floor: float = 1e-9):
    """Dominant positive-frequency component, refined by parabolic interpolation.

    Returns None when the positive-frequency content is negligible (flat
    trace).  ``rel_floor`` is measured against the full spectrum magnitude.
    """
    freqs = np.asarray(freqs, dtype=float)
    magnitude = np.asarray(magnitude, dtype=float)
    pos = freqs > 0
    if not np.any(pos):
        return None
    scale = float(np.max(magnitude))
    if scale == 0:
        return None
    mpos = magnitude[pos]
    fpos = freqs[pos]
    k = int(np.argmax(mpos))
    if mpos[k] < rel_floor * scale:
        return None
    if 0 < k < mpos.size - 1:
        denom = mpos[k - 1] - 2 * mpos[k] + mpos[k + 1]
        if denom != 0:
            shift = 0.5 * (mpos[k - 1] - mpos[k + 1]) / denom
            shift = float(np.clip(shift, -0.5, 0.5))
            df = fpos[1] - fpos[0]
            return float(fpos[k] + shift * df)
    return float(fpos[k])


def reduce_mean_sem(values) -> tuple[float, float]:
    """Order-insensitive mean and standard error over realization values.

    Uses exact compensated summation, so any permutation of ``values``
    produces bit-identical results.
    """
    vals = [float(v) for v in np.asarray(values, dtype=float).ravel()]
    n = len(vals)
    if n == 0:
        raise FitError("no values to reduce")
    mean = math.fsum(vals) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var / n)
