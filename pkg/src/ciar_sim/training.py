"""Distributionally robust alignment of the interval head to the cloud.

The head's center and radius define three softmax distributions per hidden
state (lower, mid, upper). Each is anchored to the cloud's distribution with
an L1 + cross-entropy loss; the mid bound carries an extra KL regularizer and
the lower bound an adversarially reweighted cross-entropy term that
concentrates on the worst-aligned samples. Gradients are closed-form, with
the DRO weights held constant during differentiation, and a central
finite-difference oracle in the tests keeps the algebra honest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from .intervals import DEFAULT_RADIUS_CLAMP_MAX
from .toy_models import (
    InterHeadParams,
    ModelParams,
    SceneSpec,
    ToyModelError,
    cloud_logits,
    device_hidden,
    generate_scene,
    inter_head_forward,
    softplus,
)

__all__ = [
    "TrainingError",
    "TrainingDivergedError",
    "InterDroConfig",
    "TrainingBatch",
    "LossBreakdown",
    "CE_EPSILON",
    "bound_distributions",
    "anchor_loss",
    "dro_weights",
    "dro_loss",
    "kl_align",
    "inter_dro_loss",
    "analytic_gradient",
    "train",
    "mean_center_kl",
    "harvest_batches",
    "save_inter_head",
    "load_inter_head",
    "HEAD_MAGIC",
]

# Smoothing inside every log so zero-probability targets stay finite.
CE_EPSILON = 1e-12

HEAD_MAGIC = b"CIARIH1\0"


class TrainingError(ValueError):
    """Invalid training configuration or malformed batch data."""


class TrainingDivergedError(RuntimeError):
    """The loss left the finite range; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class InterDroConfig:
    """Loss weights, DRO temperature, and the descent schedule."""

    lambda_v: float = 1.0
    lambda_p: float = 1.0
    lambda_beta: float = 0.5
    alpha: float = 1.0
    learning_rate: float = 0.05
    steps: int = 1000
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_v", "lambda_p", "lambda_beta", "alpha"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0.0:
                raise TrainingError(f"{name} must be finite and nonnegative, got {value!r}")
            object.__setattr__(self, name, value)
        lr = float(self.learning_rate)
        if not math.isfinite(lr) or lr < 0.0:
            raise TrainingError(f"learning_rate must be finite and nonnegative, got {lr!r}")
        object.__setattr__(self, "learning_rate", lr)
        if int(self.steps) < 0:
            raise TrainingError(f"steps must be nonnegative, got {self.steps!r}")
        if int(self.batch_size) < 1:
            raise TrainingError(f"batch_size must be positive, got {self.batch_size!r}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class TrainingBatch:
    """Paired device hidden states and cloud target distributions."""

    hiddens: np.ndarray
    cloud_dists: np.ndarray

    def __post_init__(self):
        hiddens = np.ascontiguousarray(np.asarray(self.hiddens, dtype=np.float64))
        dists = np.ascontiguousarray(np.asarray(self.cloud_dists, dtype=np.float64))
        if hiddens.ndim != 2 or dists.ndim != 2 or hiddens.shape[0] != dists.shape[0]:
            raise TrainingError(
                f"need matching 2-d arrays, got {hiddens.shape} and {dists.shape}"
            )
        if hiddens.shape[0] == 0:
            raise TrainingError("batch must hold at least one sample")
        if not np.all(np.isfinite(hiddens)) or not np.all(np.isfinite(dists)):
            raise TrainingError("batch entries must be finite")
        if np.any(dists < 0.0):
            raise TrainingError("cloud distributions must be nonnegative")
        sums = dists.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise TrainingError("cloud distribution rows must sum to 1 within 1e-9")
        hiddens.flags.writeable = False
        dists.flags.writeable = False
        object.__setattr__(self, "hiddens", hiddens)
        object.__setattr__(self, "cloud_dists", dists)

    @property
    def size(self) -> int:
        return self.hiddens.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    """Bracketed loss terms: the KL regularizer lives inside the center term
    and the robust reweighting inside the lower term."""

    l_center: float
    l_upper: float
    l_lower: float
    l_dro: float
    l_kl: float

    @property
    def total(self) -> float:
        return self.l_center + self.l_upper + self.l_lower


def _forward_logits(
    ih: InterHeadParams, hiddens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched center/pre-radius/radius evaluation (N x n each).

    Radii are clamped exactly as the decode-time forward clamps them; the
    returned mask marks the flat region where the radius gradient vanishes.
    """
    centers = hiddens @ ih.w_center.T + ih.b_center
    pre_radius = hiddens @ ih.w_radius.T + ih.b_radius
    radii = softplus(pre_radius)
    clamped = radii >= DEFAULT_RADIUS_CLAMP_MAX
    radii = np.minimum(radii, DEFAULT_RADIUS_CLAMP_MAX)
    return centers, pre_radius, radii, clamped


def bound_distributions(
    ih: InterHeadParams, hidden: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower, mid, and upper softmax distributions for one hidden state.

    These are plain softmaxes of (center - radius, center, center + radius):
    the training-side view of the interval, distinct from the fused
    probability box used at decode time.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (ih.d,):
        raise TrainingError(f"hidden must have shape ({ih.d},), got {hidden.shape}")
    interval = inter_head_forward(ih, hidden)
    p_lo = special.softmax(interval.center - interval.radius)
    p_mid = special.softmax(interval.center)
    p_up = special.softmax(interval.center + interval.radius)
    return p_lo, p_mid, p_up


def _cross_entropy(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise CE(q, p) = -sum q ln(p + eps)."""
    return -(q * np.log(p + CE_EPSILON)).sum(axis=-1)


def anchor_loss(p: np.ndarray, p_cloud: np.ndarray, lambda_v: float, lambda_p: float) -> float:
    """L1 distance plus cross-entropy pull toward the cloud distribution."""
    p = np.asarray(p, dtype=np.float64)
    p_cloud = np.asarray(p_cloud, dtype=np.float64)
    if p.shape != p_cloud.shape:
        raise TrainingError(f"shape mismatch: {p.shape} vs {p_cloud.shape}")
    l1 = np.abs(p - p_cloud).sum(axis=-1)
    return float(np.mean(lambda_v * l1 + lambda_p * _cross_entropy(p_cloud, p)))


def dro_weights(ce_losses: np.ndarray, alpha: float) -> np.ndarray:
    """Softmax reweighting over per-sample losses, max-subtracted for stability."""
    ce_losses = np.asarray(ce_losses, dtype=np.float64)
    if not np.all(np.isfinite(ce_losses)):
        raise TrainingError("ce losses must be finite")
    return special.softmax(alpha * ce_losses)


def dro_loss(ce_losses: np.ndarray, alpha: float) -> float:
    """Reweighted risk: sits between the mean and the max of the losses."""
    ce_losses = np.asarray(ce_losses, dtype=np.float64)
    return float(dro_weights(ce_losses, alpha) @ ce_losses)


def kl_align(p_cloud: np.ndarray, p_mid: np.ndarray) -> float:
    """KL(p_cloud || p_mid) with the denominator smoothed, floored at zero."""
    p_cloud = np.asarray(p_cloud, dtype=np.float64)
    p_mid = np.asarray(p_mid, dtype=np.float64)
    if p_cloud.shape != p_mid.shape:
        raise TrainingError(f"shape mismatch: {p_cloud.shape} vs {p_mid.shape}")
    terms = np.where(
        p_cloud > 0.0,
        p_cloud * (np.log(np.maximum(p_cloud, CE_EPSILON)) - np.log(p_mid + CE_EPSILON)),
        0.0,
    )
    return max(float(terms.sum()), 0.0)


def _batch_kl(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    terms = np.where(
        q > 0.0, q * (np.log(np.maximum(q, CE_EPSILON)) - np.log(p + CE_EPSILON)), 0.0
    )
    return np.maximum(terms.sum(axis=-1), 0.0)


def inter_dro_loss(
    ih: InterHeadParams,
    batch: TrainingBatch,
    cfg: InterDroConfig,
    dro_weights_override: np.ndarray | None = None,
) -> LossBreakdown:
    """Full loss over one batch.

    ``dro_weights_override`` freezes the adversarial weights at a given value,
    matching the constant-weight convention of the analytic gradient; the
    finite-difference oracle relies on it.
    """
    if batch.hiddens.shape[1] != ih.d or batch.cloud_dists.shape[1] != ih.n:
        raise TrainingError(
            f"batch shapes {batch.hiddens.shape}/{batch.cloud_dists.shape} do not match "
            f"head ({ih.n}, {ih.d})"
        )
    q = batch.cloud_dists
    centers, _, radii, _ = _forward_logits(ih, batch.hiddens)
    p_mid = special.softmax(centers, axis=1)
    p_up = special.softmax(centers + radii, axis=1)
    p_lo = special.softmax(centers - radii, axis=1)

    anchor_mid = anchor_loss(p_mid, q, cfg.lambda_v, cfg.lambda_p)
    anchor_up = anchor_loss(p_up, q, cfg.lambda_v, cfg.lambda_p)
    anchor_lo = anchor_loss(p_lo, q, cfg.lambda_v, cfg.lambda_p)

    l_kl = cfg.lambda_beta * float(np.mean(_batch_kl(q, p_mid)))
    ce_lo = _cross_entropy(q, p_lo)
    weights = dro_weights_override if dro_weights_override is not None else dro_weights(ce_lo, cfg.alpha)
    l_dro = float(np.asarray(weights, dtype=np.float64) @ ce_lo)

    return LossBreakdown(
        l_center=anchor_mid + l_kl,
        l_upper=anchor_up,
        l_lower=anchor_lo + l_dro,
        l_dro=l_dro,
        l_kl=l_kl,
    )


def _softmax_chain(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a distribution-space gradient back through softmax, row-wise."""
    inner = (p * grad_p).sum(axis=-1, keepdims=True)
    return p * (grad_p - inner)


def analytic_gradient(
    ih: InterHeadParams, batch: TrainingBatch, cfg: InterDroConfig
) -> dict[str, np.ndarray]:
    """Closed-form gradient of the total loss for every head parameter.

    The DRO weights are evaluated once at the current point and treated as
    constants; the radius chain includes the softplus slope and goes flat
    in the clamped region.
    """
    if batch.hiddens.shape[1] != ih.d or batch.cloud_dists.shape[1] != ih.n:
        raise TrainingError("batch shapes do not match the head")
    h = batch.hiddens
    q = batch.cloud_dists
    n_samples = batch.size

    centers, pre_radius, radii, clamped = _forward_logits(ih, h)
    p_mid = special.softmax(centers, axis=1)
    p_up = special.softmax(centers + radii, axis=1)
    p_lo = special.softmax(centers - radii, axis=1)

    def anchor_grad_logits(p: np.ndarray) -> np.ndarray:
        # d/do of lambda_v * |p - q|_1 + lambda_p * CE(q, p), batch-mean.
        sign = np.sign(p - q)
        grad_p = cfg.lambda_v * sign - cfg.lambda_p * q / (p + CE_EPSILON)
        return _softmax_chain(p, grad_p) / n_samples

    g_mid = anchor_grad_logits(p_mid)
    g_up = anchor_grad_logits(p_up)
    g_lo = anchor_grad_logits(p_lo)

    # KL regularizer on the mid bound; the entropy part of KL is constant.
    kl_raw = _batch_kl(q, p_mid)
    kl_active = (kl_raw > 0.0)[:, None]
    grad_kl_p = np.where(kl_active, -q / (p_mid + CE_EPSILON), 0.0)
    g_mid = g_mid + (cfg.lambda_beta / n_samples) * _softmax_chain(p_mid, grad_kl_p)

    # Robust term on the lower bound, weights frozen.
    ce_lo = _cross_entropy(q, p_lo)
    weights = dro_weights(ce_lo, cfg.alpha)
    grad_dro_p = -q / (p_lo + CE_EPSILON)
    g_lo = g_lo + weights[:, None] * _softmax_chain(p_lo, grad_dro_p)

    grad_center_logits = g_mid + g_up + g_lo
    grad_radius = g_up - g_lo
    slope = special.expit(pre_radius)
    slope = np.where(clamped, 0.0, slope)
    grad_pre_radius = grad_radius * slope

    return {
        "w_center": grad_center_logits.T @ h,
        "b_center": grad_center_logits.sum(axis=0),
        "w_radius": grad_pre_radius.T @ h,
        "b_radius": grad_pre_radius.sum(axis=0),
    }


def train(
    ih_init: InterHeadParams,
    dataset: list[TrainingBatch],
    cfg: InterDroConfig,
) -> tuple[InterHeadParams, list[LossBreakdown]]:
    """Plain gradient descent, cycling the dataset in order.

    The recorded loss at step t is evaluated before that step's update, so a
    zero learning rate yields a perfectly flat history.
    """
    if not dataset:
        raise TrainingError("dataset must hold at least one batch")
    for batch in dataset:
        if batch.hiddens.shape[1] != ih_init.d or batch.cloud_dists.shape[1] != ih_init.n:
            raise TrainingError(
                f"batch shapes {batch.hiddens.shape}/{batch.cloud_dists.shape} do not "
                f"match head ({ih_init.n}, {ih_init.d})"
            )
    params = {
        "w_center": ih_init.w_center.copy(),
        "b_center": ih_init.b_center.copy(),
        "w_radius": ih_init.w_radius.copy(),
        "b_radius": ih_init.b_radius.copy(),
    }
    history: list[LossBreakdown] = []
    head = ih_init
    for step in range(cfg.steps):
        batch = dataset[step % len(dataset)]
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDivergedError(step)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                breakdown = inter_dro_loss(head, batch, cfg)
        except TrainingError:
            # Shapes were validated up front; a failure here means the
            # forward pass produced non-finite values.
            raise TrainingDivergedError(step) from None
        if not math.isfinite(breakdown.total):
            raise TrainingDivergedError(step)
        history.append(breakdown)
        grads = analytic_gradient(head, batch, cfg)
        # Overflow here is caught by the finiteness check on the next step.
        with np.errstate(over="ignore", invalid="ignore"):
            for name in params:
                params[name] -= cfg.learning_rate * grads[name]
        head = InterHeadParams(**{k: v.copy() for k, v in params.items()})
    return head, history


def mean_center_kl(ih: InterHeadParams, dataset: list[TrainingBatch]) -> float:
    """Dataset-wide mean KL from the cloud targets to the mid distribution.

    The training-efficacy yardstick: compare before and after a run.
    """
    if not dataset:
        raise TrainingError("dataset must hold at least one batch")
    total, count = 0.0, 0
    for batch in dataset:
        centers = batch.hiddens @ ih.w_center.T + ih.b_center
        p_mid = special.softmax(centers, axis=1)
        total += float(_batch_kl(batch.cloud_dists, p_mid).sum())
        count += batch.size
    return total / count


def harvest_batches(
    spec: SceneSpec,
    params: ModelParams,
    scene_seeds,
    batch_size: int = 256,
) -> list[TrainingBatch]:
    """Teacher-forced training pairs from seeded scenes.

    Walks each scene along the ground-truth token sequence, recording the
    device hidden state and the cloud's softmax distribution at every
    position. One scene of the default size yields one default-sized batch.
    """
    if batch_size < 1:
        raise TrainingError("batch_size must be positive")
    hiddens: list[np.ndarray] = []
    dists: list[np.ndarray] = []
    batches: list[TrainingBatch] = []
    for seed in scene_seeds:
        scene_spec = SceneSpec(
            h=spec.h,
            w=spec.w,
            n=spec.n,
            num_regions=spec.num_regions,
            interior_noise=spec.interior_noise,
            boundary_noise=spec.boundary_noise,
            temperature=spec.temperature,
            seed=int(seed),
        )
        scene = generate_scene(scene_spec)
        truth = [int(t) for t in scene.tokens.ravel()]
        for pos in range(scene_spec.seq_len):
            context = truth[:pos]
            hiddens.append(device_hidden(params, context, pos))
            dists.append(
                special.softmax(cloud_logits(scene, scene_spec, params, context, pos))
            )
            if len(hiddens) == batch_size:
                batches.append(TrainingBatch(np.array(hiddens), np.array(dists)))
                hiddens, dists = [], []
    if hiddens:
        batches.append(TrainingBatch(np.array(hiddens), np.array(dists)))
    return batches


def save_inter_head(path, ih: InterHeadParams) -> None:
    """Flat binary: magic, u32 n and d, then f64 W_c, b_c, W_r, b_r."""
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<II", ih.n, ih.d))
        for arr in (ih.w_center, ih.b_center, ih.w_radius, ih.b_radius):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_inter_head(path) -> InterHeadParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(HEAD_MAGIC)] != HEAD_MAGIC:
        raise TrainingError(f"{path}: not an interval-head file (bad magic)")
    n, d = struct.unpack_from("<II", blob, len(HEAD_MAGIC))
    offset = len(HEAD_MAGIC) + 8
    expected = offset + 8 * (2 * n * d + 2 * n)
    if len(blob) != expected:
        raise TrainingError(f"{path}: expected {expected} bytes for n={n} d={d}, got {len(blob)}")
    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return np.array(arr, dtype=np.float64)
    w_center = take(n * d, (n, d))
    b_center = take(n, (n,))
    w_radius = take(n * d, (n, d))
    b_radius = take(n, (n,))
    try:
        return InterHeadParams(w_center, b_center, w_radius, b_radius)
    except ToyModelError as exc:
        raise TrainingError(f"{path}: {exc}") from exc
