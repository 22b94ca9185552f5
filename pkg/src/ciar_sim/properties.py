"""Runnable property oracles behind the `verify` command.

Each check re-derives an expected behavior independently of the code under
test and reports a named pass/fail result with a reproducing input on
failure. The fuse operator is injectable so a deliberately corrupted variant
can serve as a negative control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .intervals import (
    DEFAULT_RADIUS_CLAMP_MAX,
    LogitIntervalVec,
    breakdown_from_widths,
    feasible_polytope_sample,
    inter_fuse,
    uncertainty_score,
    widths,
    ProbIntervalVec,
)
from .toy_models import InterHeadParams
from .training import (
    CE_EPSILON,
    InterDroConfig,
    TrainingBatch,
    analytic_gradient,
    bound_distributions,
    dro_loss,
    dro_weights,
    inter_dro_loss,
)

__all__ = [
    "PropertyResult",
    "PROPERTY_NAMES",
    "run_property_suite",
    "suite_passed",
    "format_results",
]

DEFAULT_SIZES = (2, 64, 4096)

PROPERTY_NAMES = (
    "interfuse_validity",
    "width_scaling",
    "spread_total_bound",
    "score_sum_square_bound",
    "cv_identity",
    "local_certainty",
    "polytope_diameter",
    "dro_weights",
    "gradient_check",
)


@dataclass(frozen=True)
class PropertyResult:
    """One named check: pass/fail, case count, and a repro note on failure."""

    name: str
    passed: bool
    cases: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        suffix = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name} ({self.cases} cases){suffix}"


def _random_interval(rng, n: int) -> LogitIntervalVec:
    center = rng.normal(0.0, 3.0, size=n)
    radius = rng.uniform(0.0, DEFAULT_RADIUS_CLAMP_MAX, size=n)
    return LogitIntervalVec(center, radius)


def _check_fuse_validity(seed: int, sizes: Sequence[int], cases: int, fuse_fn) -> PropertyResult:
    name = "interfuse_validity"
    per_size = max(1, cases // len(sizes))
    total = 0
    for n in sizes:
        rng = np.random.default_rng([seed, 101, int(n)])
        for case in range(per_size):
            iv = _random_interval(rng, int(n))
            box = fuse_fn(iv)
            lower = np.asarray(box.lower, dtype=np.float64)
            upper = np.asarray(box.upper, dtype=np.float64)
            total += 1
            repro = f"n={n} seed={seed} case={case}"
            if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
                return PropertyResult(name, False, total, f"non-finite bounds at {repro}")
            if np.any(lower < 0.0):
                return PropertyResult(
                    name, False, total, f"lower {lower.min():.6g} < 0 at {repro}"
                )
            if np.any(upper > 1.0):
                return PropertyResult(
                    name, False, total, f"upper {upper.max():.6g} > 1 at {repro}"
                )
            if np.any(lower > upper):
                gap = float((lower - upper).max())
                return PropertyResult(
                    name, False, total, f"lower exceeds upper by {gap:.6g} at {repro}"
                )
            s_lo, s_up = float(lower.sum()), float(upper.sum())
            if s_lo > 1.0 + 1e-9:
                return PropertyResult(
                    name, False, total, f"sum of lowers {s_lo:.12g} > 1 at {repro}"
                )
            if 1.0 + 1e-9 > s_up + 2e-9:
                return PropertyResult(
                    name, False, total, f"sum of uppers {s_up:.12g} < 1 at {repro}"
                )
    return PropertyResult(name, True, total)


def _check_width_scaling(seed: int, cases: int) -> PropertyResult:
    name = "width_scaling"
    rng = np.random.default_rng([seed, 102])
    for case in range(cases):
        n = int(rng.integers(2, 30))
        delta = np.abs(rng.normal(0.0, 0.3, size=n))
        alpha = float(rng.uniform(0.1, 5.0))
        base = breakdown_from_widths(delta).score
        scaled = breakdown_from_widths(alpha * delta).score
        if not math.isclose(scaled, alpha**2 * base, rel_tol=1e-9, abs_tol=1e-15):
            return PropertyResult(
                name, False, case + 1,
                f"seed={seed} case={case} n={n} alpha={alpha:.6g}: "
                f"{scaled:.12g} vs {alpha ** 2 * base:.12g}",
            )
    return PropertyResult(name, True, cases)


def _check_spread_total_bound(seed: int, sizes: Sequence[int], cases: int) -> PropertyResult:
    name = "spread_total_bound"
    rng = np.random.default_rng([seed, 103])
    pool = [int(n) for n in sizes] + [int(rng.integers(2, 40)) for _ in range(8)]
    done = 0
    for case in range(cases):
        n = pool[case % len(pool)]
        delta = np.abs(rng.normal(0.0, 0.3, size=n))
        b = breakdown_from_widths(delta)
        bound = math.sqrt(n - 1) / n * b.omega
        done += 1
        if b.sigma > bound + 1e-12:
            return PropertyResult(
                name, False, done, f"seed={seed} case={case} n={n}: {b.sigma} > {bound}"
            )
    # Equality exactly on one-hot width vectors.
    for n in sizes:
        delta = np.zeros(int(n))
        delta[0] = 0.83
        b = breakdown_from_widths(delta)
        done += 1
        if abs(b.sigma - math.sqrt(n - 1) / n * b.omega) > 1e-12:
            return PropertyResult(name, False, done, f"one-hot equality fails at n={n}")
    return PropertyResult(name, True, done)


def _check_score_sum_square_bound(seed: int, sizes: Sequence[int], cases: int) -> PropertyResult:
    name = "score_sum_square_bound"
    rng = np.random.default_rng([seed, 104])
    pool = [int(n) for n in sizes] + [int(rng.integers(2, 40)) for _ in range(8)]
    for case in range(cases):
        n = pool[case % len(pool)]
        delta = np.abs(rng.normal(0.0, 0.3, size=n))
        b = breakdown_from_widths(delta)
        bound = 0.5 * float(np.sum(delta**2))
        if b.score > bound + 1e-12:
            return PropertyResult(
                name, False, case + 1, f"seed={seed} case={case} n={n}: {b.score} > {bound}"
            )
    return PropertyResult(name, True, cases)


def _check_cv_identity(seed: int, cases: int) -> PropertyResult:
    name = "cv_identity"
    rng = np.random.default_rng([seed, 105])
    for case in range(cases):
        n = int(rng.integers(2, 40))
        delta = np.abs(rng.normal(0.0, 0.3, size=n)) + 1e-6
        b = breakdown_from_widths(delta)
        expected = n * b.mean_width**2 * b.cv
        if not math.isclose(b.score, expected, rel_tol=1e-9, abs_tol=1e-15):
            return PropertyResult(
                name, False, case + 1,
                f"seed={seed} case={case} n={n}: {b.score} vs {expected}",
            )
    return PropertyResult(name, True, cases)


def _check_local_certainty() -> PropertyResult:
    name = "local_certainty"
    done = 0
    history = []
    for n in (4, 64):
        for t in (1e-2, 1e-3, 1e-4):
            lower = np.zeros(n)
            upper = np.full(n, t / (n - 1))
            lower[0] = 1.0 - t
            upper[0] = 1.0 - t
            score = uncertainty_score(ProbIntervalVec(lower, upper)).score
            history.append(score)
            done += 1
            if t == 1e-4 and score >= 1e-6:
                return PropertyResult(
                    name, False, done, f"n={n} t={t}: score {score:.3g} >= 1e-6"
                )
        if not history[-3] > history[-2] > history[-1]:
            return PropertyResult(name, False, done, f"n={n}: score not decaying with t")
    return PropertyResult(name, True, done)


def _check_polytope_diameter(seed: int, pairs: int, fuse_fn) -> PropertyResult:
    name = "polytope_diameter"
    rng = np.random.default_rng([seed, 106])
    done = 0
    while done < pairs:
        n = int(rng.integers(2, 7))
        box = fuse_fn(_random_interval(rng, n))
        if not isinstance(box, ProbIntervalVec):
            box = ProbIntervalVec(
                np.asarray(box.lower, dtype=np.float64),
                np.asarray(box.upper, dtype=np.float64),
            )
        omega = float(widths(box).sum())
        draw_seed = int(rng.integers(1 << 30))
        points = feasible_polytope_sample(box, 20, seed=draw_seed)
        for i in range(0, 20, 2):
            gap = float(np.abs(points[i] - points[i + 1]).sum())
            done += 1
            if gap > omega + 1e-9:
                return PropertyResult(
                    name, False, done,
                    f"seed={seed} n={n} draw_seed={draw_seed} pair={i}: "
                    f"l1 gap {gap:.9g} > omega {omega:.9g}",
                )
            if done >= pairs:
                break
    return PropertyResult(name, True, done)


def _check_dro_weights(seed: int, cases: int) -> PropertyResult:
    name = "dro_weights"
    rng = np.random.default_rng([seed, 107])
    for case in range(cases):
        ce = rng.uniform(0.0, 5.0, size=int(rng.integers(2, 12)))
        repro = f"seed={seed} case={case}"
        w = dro_weights(ce, 1.0)
        if abs(float(w.sum()) - 1.0) > 1e-12:
            return PropertyResult(name, False, case + 1, f"weights sum != 1 at {repro}")
        uniform = dro_weights(ce, 0.0)
        if np.any(np.abs(uniform - 1.0 / ce.size) > 1e-12):
            return PropertyResult(name, False, case + 1, f"alpha=0 not uniform at {repro}")
        values = [dro_loss(ce, a) for a in (0.0, 0.5, 1.0, 2.0, 8.0)]
        if not all(b >= a - 1e-12 for a, b in zip(values, values[1:])):
            return PropertyResult(name, False, case + 1, f"not monotone in alpha at {repro}")
        if not (ce.mean() - 1e-12 <= values[2] <= ce.max() + 1e-12):
            return PropertyResult(name, False, case + 1, f"outside [mean, max] at {repro}")
    return PropertyResult(name, True, cases)


def _numeric_gradient(head, batch, cfg, step=1e-5):
    # Central differences with the robust weights frozen at the base point,
    # matching the analytic convention.
    base_lo = np.array([bound_distributions(head, h)[0] for h in batch.hiddens])
    ce_lo = -(batch.cloud_dists * np.log(base_lo + CE_EPSILON)).sum(axis=1)
    frozen = dro_weights(ce_lo, cfg.alpha)
    arrays = {
        "w_center": head.w_center,
        "b_center": head.b_center,
        "w_radius": head.w_radius,
        "b_radius": head.b_radius,
    }

    def loss_at(field, index, delta):
        patched = {k: v.copy() for k, v in arrays.items()}
        patched[field][index] += delta
        return inter_dro_loss(
            InterHeadParams(**patched), batch, cfg, dro_weights_override=frozen
        ).total

    grads = {}
    for field, arr in arrays.items():
        grad = np.zeros_like(arr)
        for index in np.ndindex(arr.shape):
            grad[index] = (loss_at(field, index, step) - loss_at(field, index, -step)) / (
                2.0 * step
            )
        grads[field] = grad
    return grads


def _check_gradients(seed: int, instances: int) -> PropertyResult:
    name = "gradient_check"
    for case in range(instances):
        rng = np.random.default_rng([seed, 108, case])
        head = InterHeadParams.init_random(5, 3, seed=seed * 1000 + case, scale=0.8)
        batch = TrainingBatch(
            rng.normal(size=(4, 3)), special.softmax(rng.normal(size=(4, 5)), axis=1)
        )
        cfg = InterDroConfig(
            lambda_v=float(rng.uniform(0.2, 1.5)),
            lambda_p=float(rng.uniform(0.2, 1.5)),
            lambda_beta=float(rng.uniform(0.0, 1.0)),
            alpha=float(rng.uniform(0.0, 2.0)),
        )
        analytic = analytic_gradient(head, batch, cfg)
        numeric = _numeric_gradient(head, batch, cfg)
        for field in analytic:
            err = float(np.max(np.abs(analytic[field] - numeric[field])))
            if err > 1e-5:
                return PropertyResult(
                    name, False, case + 1,
                    f"seed={seed} case={case} field={field}: max abs error {err:.3g}",
                )
    return PropertyResult(name, True, instances)


def run_property_suite(
    seed: int = 0,
    sizes: Sequence[int] = DEFAULT_SIZES,
    fuse_fn: Callable = inter_fuse,
    fuse_cases: int = 3000,
    theorem_cases: int = 1000,
    diameter_pairs: int = 1000,
    gradient_instances: int = 20,
) -> list[PropertyResult]:
    """Run every named property; a check that raises counts as a failure."""
    sizes = tuple(int(n) for n in sizes)
    if not sizes or any(n < 2 for n in sizes):
        raise ValueError(f"sizes must all be >= 2, got {sizes!r}")
    jobs = [
        lambda: _check_fuse_validity(seed, sizes, fuse_cases, fuse_fn),
        lambda: _check_width_scaling(seed, theorem_cases),
        lambda: _check_spread_total_bound(seed, sizes, theorem_cases),
        lambda: _check_score_sum_square_bound(seed, sizes, theorem_cases),
        lambda: _check_cv_identity(seed, theorem_cases),
        lambda: _check_local_certainty(),
        lambda: _check_polytope_diameter(seed, diameter_pairs, fuse_fn),
        lambda: _check_dro_weights(seed, theorem_cases),
        lambda: _check_gradients(seed, gradient_instances),
    ]
    results = []
    for name, job in zip(PROPERTY_NAMES, jobs):
        try:
            results.append(job())
        except Exception as exc:  # noqa: BLE001 - a crash is a failing property
            results.append(PropertyResult(name, False, 0, f"raised {type(exc).__name__}: {exc}"))
    return results


def suite_passed(results: Sequence[PropertyResult]) -> bool:
    return all(r.passed for r in results)


def format_results(results: Sequence[PropertyResult]) -> str:
    return "\n".join(r.line() for r in results)
