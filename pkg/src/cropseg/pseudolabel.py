"""Depth-to-mask pseudo-labeling pipeline.

Normalized depth values are histogrammed with gradient-derived pixel
weights, the normalized cumulative curve is fitted with a four-parameter
sigmoid by damped least squares, and the binarization threshold is read
off the fitted curve (inflection or curvature-extremum rules).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from .raster import Raster2D, normalize_percentile, sobel_magnitude

CLOSER_IS_LARGER = "closer_is_larger"
CLOSER_IS_SMALLER = "closer_is_smaller"

# Offset of the |f''| extrema from the sigmoid center, in units of 1/k.
CURVATURE_OFFSET = math.log(2.0 + math.sqrt(3.0))

THRESHOLD_RULES = ("inflection", "max_curvature_auto", "max_curvature_left", "max_curvature_right")


class DegenerateFitError(ValueError):
    """The depth distribution has no usable transition; route to manual review.

    Carries the partial report (when available) so callers can log it.
    """

    def __init__(self, message: str, report: "PseudoLabelReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class DepthMap:
    """Normalized depth raster in [0, 1] plus its polarity convention."""

    raster: Raster2D
    polarity: str = CLOSER_IS_LARGER

    def __post_init__(self):
        if self.polarity not in (CLOSER_IS_LARGER, CLOSER_IS_SMALLER):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        a = self.raster.astype_float().data
        if a.min() < 0 or a.max() > 1:
            raise ValueError("depth map values must lie in [0, 1]; normalize first")
        object.__setattr__(self, "raster", Raster2D(a))


@dataclass(frozen=True)
class WeightedHistogram:
    """Gradient-weighted depth histogram over [0, 1]."""

    edges: np.ndarray  # B + 1 strictly increasing
    weight: np.ndarray  # B non-negative accumulated weights
    lam: float

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        weight = np.asarray(self.weight, dtype=np.float64)
        if edges.ndim != 1 or weight.ndim != 1 or edges.size != weight.size + 1:
            raise ValueError("edges must have one more entry than weights")
        if not (np.diff(edges) > 0).all():
            raise ValueError("edges must be strictly increasing")
        if (weight < 0).any():
            raise ValueError("weights must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weight", weight)

    @property
    def bins(self) -> int:
        return self.weight.size

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


@dataclass(frozen=True)
class SigmoidFit:
    """Parameters of f(x) = base + amplitude / (1 + exp(-steepness*(x - center)))."""

    base: float
    amplitude: float
    steepness: float
    center: float
    residual_rms: float
    iterations: int
    converged: bool

    def __call__(self, x):
        return self.base + self.amplitude * expit(self.steepness * (np.asarray(x) - self.center))

    def to_dict(self) -> dict:
        return {
            "b": self.base,
            "L": self.amplitude,
            "k": self.steepness,
            "x0": self.center,
            "residual_rms": self.residual_rms,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class BinaryMask:
    """byte8 raster restricted to {0, 1}: 0 = background, 1 = crop foreground."""

    raster: Raster2D

    def __post_init__(self):
        if self.raster.kind != "byte8":
            raise ValueError("mask must be byte8")
        vals = np.unique(self.raster.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"mask values must be 0/1, got {vals}")

    @classmethod
    def from_bool(cls, a: np.ndarray) -> "BinaryMask":
        return cls(Raster2D(np.asarray(a, dtype=bool).astype(np.uint8)))

    @property
    def coverage(self) -> float:
        return float(self.raster.data.mean())


@dataclass(frozen=True)
class PseudoLabelReport:
    """Everything the thresholding decided for one image."""

    threshold: float
    rule: str
    fit: SigmoidFit
    coverage: float
    bins_used: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rule": self.rule,
            "fit": self.fit.to_dict(),
            "coverage": self.coverage,
            "bins": self.bins_used,
        }


@dataclass(frozen=True)
class PseudoLabelOptions:
    bins: int = 256
    lam: float = 4.0
    rule: str = "max_curvature_auto"
    polarity: str = CLOSER_IS_LARGER
    p_lo: float = 1.0
    p_hi: float = 99.0
    max_iter: int = 200
    tol: float = 1e-8


# ---------------------------------------------------------------------------
# Histogram and cumulative curve
# ---------------------------------------------------------------------------


def weighted_depth_histogram(
    d: DepthMap, g: Raster2D, bins: int = 256, lam: float = 4.0
) -> WeightedHistogram:
    """Accumulate per-pixel weight 1 + lam * g_hat into the bin holding the depth.

    g_hat is the gradient magnitude scaled so its maximum is 1 (identically
    zero for an all-zero gradient image); depth exactly 1.0 lands in the
    last bin.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    depth = d.raster.data
    grad = g.astype_float().data
    if depth.shape != grad.shape:
        raise ValueError(f"shape mismatch: depth {depth.shape} vs gradient {grad.shape}")
    if grad.min() < 0:
        raise ValueError("gradient magnitudes must be non-negative")
    gmax = grad.max()
    ghat = grad / gmax if gmax > 0 else np.zeros_like(grad)
    w = 1.0 + lam * ghat
    idx = np.minimum((depth * bins).astype(np.int64), bins - 1)
    weight = np.bincount(idx.ravel(), weights=w.ravel(), minlength=bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return WeightedHistogram(edges=edges, weight=weight, lam=lam)


def cumulative_curve(h: WeightedHistogram) -> tuple[np.ndarray, np.ndarray]:
    """Bin centers and the normalized cumulative weight (non-decreasing, ends at 1)."""
    total = h.weight.sum()
    if total <= 0:
        raise ValueError("histogram has zero total weight")
    y = np.cumsum(h.weight) / total
    return h.centers, y


# ---------------------------------------------------------------------------
# Sigmoid fitting
# ---------------------------------------------------------------------------


def _sigmoid_residual_jacobian(params, x, y):
    b, L, k, x0 = params
    s = expit(k * (x - x0))
    r = b + L * s - y
    ds = s * (1.0 - s)
    jac = np.column_stack([np.ones_like(x), s, L * ds * (x - x0), -L * ds * k])
    return r, jac


# Box bounds for the fit, scaled to a normalized cumulative curve (base near
# zero, amplitude near one, center inside the depth axis). Without them the
# amplitude diverges: a huge flat sigmoid degenerates to a straight line,
# which shadows the transition the threshold rules need.
_PARAM_LO = np.array([-0.1, 0.8, 1e-2, 0.0])
_PARAM_HI = np.array([0.1, 1.2, 1e5, 1.0])

# Relative objective improvement below which an accepted step counts as
# stagnant; two stagnant steps in a row terminate the iteration.
_FTOL = 1e-6


def _initial_sigmoid_params(x, y):
    ymin, ymax = float(y.min()), float(y.max())
    b0 = ymin
    L0 = max(ymax - ymin, 1e-12)
    # center: where the curve crosses the midpoint of its range
    mid = ymin + 0.5 * L0
    x0_0 = float(x[np.searchsorted(y, mid).clip(0, y.size - 1)])
    dx = float(x[1] - x[0]) if x.size > 1 else 1.0
    lo = ymin + 0.25 * L0
    hi = ymin + 0.75 * L0
    x_lo = float(x[np.searchsorted(y, lo).clip(0, y.size - 1)])
    x_hi = float(x[np.searchsorted(y, hi).clip(0, y.size - 1)])
    spread = max(x_hi - x_lo, dx)
    k0 = 4.0 * L0 / spread
    return np.array([b0, L0, k0, x0_0])


def fit_sigmoid(
    x: np.ndarray, y: np.ndarray, max_iter: int = 200, tol: float = 1e-8
) -> SigmoidFit:
    """Least-squares sigmoid fit by Levenberg-Marquardt with factor-10 damping.

    The damping multiplier drops by 10 on accepted steps and grows by 10 on
    rejected ones. Convergence is declared when the relative parameter
    change falls below ``tol`` or the objective stops improving. A decreasing
    solution (k < 0) is re-expressed in its equivalent non-decreasing form
    before returning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 4:
        raise ValueError(f"need >= 4 samples to fit 4 parameters, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite samples")

    params = np.clip(_initial_sigmoid_params(x, y), _PARAM_LO, _PARAM_HI)
    r, jac = _sigmoid_residual_jacobian(params, x, y)
    sse = float(r @ r)
    mu = 1e-3
    converged = False
    iterations = 0
    stagnant = 0
    for iterations in range(1, max_iter + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ r
        # damp relative to the diagonal scale so mu is unit-free
        damp = np.diag(np.maximum(np.diag(jtj), 1e-12))
        accepted = False
        while mu < 1e12:
            try:
                step = np.linalg.solve(jtj + mu * damp, -jtr)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = np.clip(params + step, _PARAM_LO, _PARAM_HI)
            clipped = trial != params + step
            if clipped.any() and not clipped.all():
                # hold the bound-pinned coordinates fixed and re-solve the
                # reduced normal equations, otherwise clipping starves the
                # free coordinates of progress along the active face
                free = ~clipped
                r_eff = r + jac[:, clipped] @ (trial[clipped] - params[clipped])
                a = (jtj + mu * damp)[np.ix_(free, free)]
                rhs = -(jac[:, free].T @ r_eff)
                try:
                    step_free = np.linalg.solve(a, rhs)
                except np.linalg.LinAlgError:
                    step_free = None
                if step_free is not None:
                    refined = trial.copy()
                    refined[free] = params[free] + step_free
                    refined = np.clip(refined, _PARAM_LO, _PARAM_HI)
                    r_ref = _sigmoid_residual_jacobian(refined, x, y)[0]
                    r_tri = _sigmoid_residual_jacobian(trial, x, y)[0]
                    if float(r_ref @ r_ref) < float(r_tri @ r_tri):
                        trial = refined
            step = trial - params
            r_new, jac_new = _sigmoid_residual_jacobian(trial, x, y)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                rel = np.max(np.abs(step) / np.maximum(np.abs(params), 1.0))
                gain = (sse - sse_new) / max(sse_new, 1e-30)
                params, r, jac, sse = trial, r_new, jac_new, sse_new
                mu = max(mu / 10.0, 1e-15)
                accepted = True
                stagnant = stagnant + 1 if gain < _FTOL else 0
                if rel < tol or stagnant >= 2:
                    converged = True
                break
            mu *= 10.0
        if not accepted:
            # no acceptable step at any damping: stationary point
            converged = True
        if converged:
            break

    b, L, k, x0 = (float(v) for v in params)
    if k < 0:
        # b + L*sigma(k(x-x0)) == (b+L) + (-L)*sigma(-k(x-x0))
        b, L, k = b + L, -L, -k
    if L <= 0 or k <= 0:
        converged = False
    rms = math.sqrt(sse / x.size)
    return SigmoidFit(
        base=b,
        amplitude=L,
        steepness=k,
        center=x0,
        residual_rms=rms,
        iterations=iterations,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Threshold selection
# ---------------------------------------------------------------------------


def _histogram_valley(h: WeightedHistogram) -> float | None:
    """Center of the minimum-weight bin between the histogram's two largest modes."""
    w = h.weight
    # local maxima (plateau-tolerant at strict neighbors)
    peaks = [
        i
        for i in range(w.size)
        if w[i] > 0
        and (i == 0 or w[i] >= w[i - 1])
        and (i == w.size - 1 or w[i] >= w[i + 1])
        and not (i > 0 and w[i] == w[i - 1])  # keep only the left edge of plateaus
    ]
    if len(peaks) < 2:
        return None
    top_two = sorted(sorted(peaks, key=lambda i: w[i], reverse=True)[:2])
    lo, hi = top_two
    if hi - lo < 2:
        return None
    valley_idx = lo + 1 + int(np.argmin(w[lo + 1 : hi]))
    return float(h.centers[valley_idx])


def select_threshold(fit: SigmoidFit, h: WeightedHistogram, rule: str = "max_curvature_auto") -> float:
    """Map the fitted curve to a depth threshold in [0, 1].

    inflection: the maximum-slope point (the sigmoid center).
    max_curvature_left/right: the analytic extrema of |f''|,
    center -/+ ln(2 + sqrt(3)) / steepness.
    max_curvature_auto: whichever extremum is nearer the deepest valley
    between the histogram's two largest modes (ties and missing valleys
    resolve to the smaller threshold).
    """
    if rule not in THRESHOLD_RULES:
        raise ValueError(f"unknown threshold rule {rule!r}")
    if not (
        math.isfinite(fit.steepness)
        and math.isfinite(fit.center)
        and fit.steepness > 0
    ):
        raise ValueError(f"unusable fit parameters (k={fit.steepness}, x0={fit.center})")
    if rule == "inflection":
        t = fit.center
    else:
        offset = CURVATURE_OFFSET / fit.steepness
        left, right = fit.center - offset, fit.center + offset
        if rule == "max_curvature_left":
            t = left
        elif rule == "max_curvature_right":
            t = right
        else:
            valley = _histogram_valley(h)
            if valley is None:
                t = left
            else:
                dl, dr = abs(left - valley), abs(right - valley)
                t = left if dl <= dr else right
    return float(min(max(t, 0.0), 1.0))


# ---------------------------------------------------------------------------
# End-to-end
# ---------------------------------------------------------------------------


def depth_to_mask(
    depth_raw: Raster2D, opts: PseudoLabelOptions = PseudoLabelOptions()
) -> tuple[BinaryMask, PseudoLabelReport]:
    """Full pipeline from a raw depth raster to a binary pseudo-mask.

    Raises DegenerateFitError (carrying the report) when the fitted curve
    has no usable transition; such samples go to manual review.
    """
    norm = normalize_percentile(depth_raw, opts.p_lo, opts.p_hi)
    grad = sobel_magnitude(norm)
    d = DepthMap(norm, polarity=opts.polarity)
    h = weighted_depth_histogram(d, grad, bins=opts.bins, lam=opts.lam)
    x, y = cumulative_curve(h)
    fit = fit_sigmoid(x, y, max_iter=opts.max_iter, tol=opts.tol)
    if not fit.converged or fit.amplitude < 1e-6:
        report = PseudoLabelReport(
            threshold=float("nan"), rule=opts.rule, fit=fit, coverage=float("nan"),
            bins_used=opts.bins,
        )
        raise DegenerateFitError(
            f"degenerate sigmoid fit (converged={fit.converged}, L={fit.amplitude:.3g})",
            report=report,
        )
    t = select_threshold(fit, h, opts.rule)
    if opts.polarity == CLOSER_IS_LARGER:
        fg = norm.data >= t
    else:
        fg = norm.data <= t
    mask = BinaryMask.from_bool(fg)
    report = PseudoLabelReport(
        threshold=t, rule=opts.rule, fit=fit, coverage=mask.coverage, bins_used=opts.bins
    )
    return mask, report
