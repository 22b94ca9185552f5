"""Interval-valued token probabilities and the ambiguity score built on them.

A device-side head emits, per vocabulary entry, a logit interval
``[center - radius, center + radius]``. ``inter_fuse`` turns that vector of
logit intervals into elementwise probability bounds: each entry is pushed
through a softmax-like ratio at its most pessimistic and most optimistic
logit while every other entry sits at its center. The resulting box is then
gently renormalized so that the lower bounds sum to at most a target just
under 1 and the upper bounds to at least a target just over 1, which keeps
the true simplex slice non-empty without distorting the geometry.

The width vector of the fused box feeds a scalar ambiguity score: total
width times the population spread of the widths. The product is small both
for confident predictions (all widths tiny) and for uniformly-inflated
boxes (widths equal, spread zero); it is large exactly when a few entries
carry wide, competing intervals, which is the regime where a second opinion
is worth paying for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Default cap on logit radii. Upstream heads clamp to this before fusing;
# inter_fuse rejects anything larger so the exp() calls stay bounded.
DEFAULT_RADIUS_CLAMP_MAX = 10.0

# Tolerance on the fused sum conditions (sum of lowers <= 1, sum of uppers >= 1).
SUM_TOL = 1e-9


class IntervalValidationError(ValueError):
    """Raised when interval inputs violate a precondition."""


class IntervalInvariantError(RuntimeError):
    """Raised when a fused box fails its own invariants. Always a bug."""


@dataclass(frozen=True)
class FuseConfig:
    """Normalization targets and the radius cap used by inter_fuse."""

    lower_target: float = 0.99
    upper_target: float = 1.01
    radius_clamp_max: float = DEFAULT_RADIUS_CLAMP_MAX

    def __post_init__(self):
        if not (0.0 < self.lower_target < 1.0 < self.upper_target):
            raise IntervalValidationError(
                "need 0 < lower_target < 1 < upper_target, got "
                f"{self.lower_target!r}, {self.upper_target!r}"
            )
        if self.radius_clamp_max <= 0.0:
            raise IntervalValidationError("radius_clamp_max must be positive")


DEFAULT_FUSE_CONFIG = FuseConfig()


def _as_readonly_f64(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise IntervalValidationError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise IntervalValidationError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LogitIntervalVec:
    """Per-entry logit intervals ``center[i] +- radius[i]`` over one vocabulary."""

    center: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_readonly_f64(self.center, "center"))
        object.__setattr__(self, "radius", _as_readonly_f64(self.radius, "radius"))
        if self.center.shape != self.radius.shape:
            raise IntervalValidationError(
                f"center/radius shape mismatch: {self.center.shape} vs {self.radius.shape}"
            )
        if np.any(self.radius < 0.0):
            raise IntervalValidationError("radius must be nonnegative")

    @property
    def n(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class ProbIntervalVec:
    """Elementwise probability bounds produced by inter_fuse.

    Invariants: 0 <= lower <= upper <= 1 per entry, sum(lower) <= 1 + tol,
    sum(upper) >= 1 - tol. Violations raise IntervalInvariantError because a
    bad box can only come out of a broken fuse, not out of bad user input.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", _as_readonly_f64(self.lower, "lower"))
        object.__setattr__(self, "upper", _as_readonly_f64(self.upper, "upper"))
        if self.lower.shape != self.upper.shape:
            raise IntervalInvariantError("lower/upper shape mismatch")
        if np.any(self.lower < 0.0) or np.any(self.upper > 1.0):
            raise IntervalInvariantError("bounds escape [0, 1]")
        if np.any(self.lower > self.upper):
            raise IntervalInvariantError("lower exceeds upper")
        if self.lower.sum() > 1.0 + SUM_TOL:
            raise IntervalInvariantError("sum of lower bounds exceeds 1")
        if self.upper.sum() < 1.0 - SUM_TOL:
            raise IntervalInvariantError("sum of upper bounds is below 1")

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def to_json_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProbIntervalVec":
        return cls(np.asarray(d["lower"]), np.asarray(d["upper"]))


def raw_prob_bounds(intervals: LogitIntervalVec) -> tuple[np.ndarray, np.ndarray]:
    """Pessimistic/optimistic softmax ratios before any renormalization.

    Entry i is evaluated at its own worst (center - radius) and best
    (center + radius) logit while all rivals stay at their centers. Centers
    are shifted by their max first so the exponentials cannot overflow.
    """
    c = intervals.center - intervals.center.max()
    e_center = np.exp(c)
    rivals = e_center.sum() - e_center  # sum over j != i, always > 0 for n >= 2
    e_low = np.exp(c - intervals.radius)
    e_high = np.exp(c + intervals.radius)
    lower = e_low / (rivals + e_low)
    upper = e_high / (rivals + e_high)
    return lower, upper


def inter_fuse(
    intervals: LogitIntervalVec, config: FuseConfig = DEFAULT_FUSE_CONFIG
) -> ProbIntervalVec:
    """Fuse logit intervals into a valid probability box.

    Lower bounds are scaled down (never up) so they sum to at most
    ``config.lower_target``; upper bounds are scaled up (never down) so they
    sum to at least ``config.upper_target``, then clamped back into [0, 1].
    The clamp cannot break the sum condition: an entry only exceeds 1 when
    its raw bound was within a hair of 1, and at most one entry can be in
    that regime once the scaled sum is pinned near the target.
    """
    if intervals.n < 2:
        raise IntervalValidationError("need at least 2 vocabulary entries")
    if np.any(intervals.radius > config.radius_clamp_max):
        raise IntervalValidationError(
            f"radius exceeds clamp max {config.radius_clamp_max}"
        )

    lower, upper = raw_prob_bounds(intervals)
    s_low = lower.sum()
    s_high = upper.sum()
    lower = lower * min(1.0, config.lower_target / s_low)
    upper = upper * max(1.0, config.upper_target / s_high)
    upper = np.minimum(upper, 1.0)
    return ProbIntervalVec(lower, upper)


def widths(box: ProbIntervalVec) -> np.ndarray:
    return box.upper - box.lower


@dataclass(frozen=True)
class UncertaintyBreakdown:
    """Score ingredients: total width, width spread, and their product.

    ``cv`` is the coefficient of variation of the widths, or None when the
    mean width is zero (a degenerate box has no meaningful relative spread).
    """

    omega: float
    sigma: float
    score: float
    mean_width: float
    cv: float | None = field(default=None)


def breakdown_from_widths(delta: np.ndarray) -> UncertaintyBreakdown:
    """Score a raw width vector. Spread is the population std (divide by n)."""
    delta = np.asarray(delta, dtype=np.float64)
    omega = float(delta.sum())
    mean = omega / delta.shape[0]
    sigma = float(np.sqrt(np.mean((delta - mean) ** 2)))
    cv = sigma / mean if mean > 0.0 else None
    return UncertaintyBreakdown(
        omega=omega, sigma=sigma, score=omega * sigma, mean_width=mean, cv=cv
    )


def uncertainty_score(box: ProbIntervalVec) -> UncertaintyBreakdown:
    return breakdown_from_widths(widths(box))


def _clipped_simplex_point(
    start: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
    """Deterministically move a box point onto the unit-sum slice.

    Spreads the mass deficit evenly over coordinates that still have slack,
    clipping as it goes. The residual keeps its sign, so each pass either
    finishes or saturates at least one new coordinate; n+1 passes suffice.
    """
    q = np.clip(start, lower, upper)
    for _ in range(q.shape[0] + 1):
        resid = 1.0 - q.sum()
        if abs(resid) <= 1e-12:
            return q
        if resid > 0:
            free = q < upper - 1e-15
        else:
            free = q > lower + 1e-15
        if not free.any():
            raise IntervalInvariantError("simplex slice of the box is empty")
        q[free] += resid / free.sum()
        q = np.clip(q, lower, upper)
    return q


def feasible_polytope_sample(
    box: ProbIntervalVec, count: int, seed: int
) -> np.ndarray:
    """Draw ``count`` points from {q : lower <= q <= upper, sum(q) = 1}.

    Hit-and-run over the slice: from a deterministic interior start, walk
    along random zero-sum directions, picking a uniform point on the chord
    the box cuts out of each line. Returns an array of shape (count, n).
    """
    if count < 1:
        raise IntervalValidationError("count must be >= 1")
    lower, upper = box.lower, box.upper
    n = box.n
    rng = np.random.default_rng(seed)
    q = _clipped_simplex_point((lower + upper) / 2.0, lower, upper)

    burn_in = 32
    thin = 3  # extra internal steps per kept sample, helps reach corners
    out = np.empty((count, n), dtype=np.float64)
    kept = 0
    for step in range(burn_in + thin * count):
        d = rng.normal(size=n)
        d -= d.mean()  # keep the walk inside the unit-sum hyperplane
        norm = np.linalg.norm(d)
        if norm >= 1e-12:
            d /= norm
            # chord extents: lower <= q + t*d <= upper per coordinate
            t_hi = np.inf
            t_lo = -np.inf
            pos = d > 1e-15
            neg = d < -1e-15
            if pos.any():
                t_hi = min(t_hi, np.min((upper[pos] - q[pos]) / d[pos]))
                t_lo = max(t_lo, np.max((lower[pos] - q[pos]) / d[pos]))
            if neg.any():
                t_hi = min(t_hi, np.min((lower[neg] - q[neg]) / d[neg]))
                t_lo = max(t_lo, np.max((upper[neg] - q[neg]) / d[neg]))
            span = t_hi - t_lo
            # span can land on -0.0 at a corner; treat anything <= 0 as stuck
            if np.isfinite(span) and span > 0.0:
                t = t_lo + span * rng.random()
                q = np.clip(q + t * d, lower, upper)
        if step >= burn_in and (step - burn_in) % thin == thin - 1:
            out[kept] = q
            kept += 1
    return out


def ensemble_average(distributions: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of same-length distributions that each sum to ~1."""
    if not distributions:
        raise IntervalValidationError("need at least one distribution")
    mat = np.asarray(distributions, dtype=np.float64)
    if mat.ndim != 2:
        raise IntervalValidationError("distributions must share one length")
    sums = mat.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise IntervalValidationError("each distribution must sum to 1 (tol 1e-9)")
    return mat.mean(axis=0)


def majority_vote(distributions: list[np.ndarray]) -> int:
    """Plurality over per-distribution argmaxes; ties go to the lowest index."""
    if not distributions:
        raise IntervalValidationError("need at least one distribution")
    mat = np.asarray(distributions, dtype=np.float64)
    picks = np.argmax(mat, axis=1)
    counts = np.bincount(picks, minlength=mat.shape[1])
    return int(np.argmax(counts))
