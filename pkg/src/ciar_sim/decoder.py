"""Gated collaborative decoding over the toy scene models.

The device decodes greedily token by token; an interval head scores its own
predictive state at each position, and whenever the interval score exceeds a
threshold the device drafts a short buffer which the cloud verifies in one
call, correcting the first divergence. A cloud-generated prefix seeds the
sequence. Four reference policies (pure cloud, pure device, verify-everything,
fixed split) share the same trace and metrics plumbing so runs are directly
comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .intervals import (
    DEFAULT_FUSE_CONFIG,
    FuseConfig,
    ProbIntervalVec,
    breakdown_from_widths,
    inter_fuse,
    uncertainty_score,
    widths,
)
from .netsim import PayloadModel
from .toy_models import (
    InterHeadParams,
    ModelParams,
    SceneSpec,
    TokenGrid,
    cloud_logits,
    device_hidden,
    device_logits,
    inter_head_forward,
)

__all__ = [
    "DecodeError",
    "RollingQuantilePolicy",
    "DecodeConfig",
    "TraceRecord",
    "EpisodeEvent",
    "DecodeTrace",
    "EpisodeMetrics",
    "ORIGIN_PREFIX",
    "ORIGIN_DEVICE",
    "ORIGIN_CLOUD_VERIFIED",
    "ORIGIN_CLOUD_RESAMPLED",
    "DEFAULT_TAU",
    "DEFAULT_RHO",
    "interval_feature",
    "dynamic_threshold",
    "verify_buffer",
    "metrics_from_trace",
    "run_ciar",
    "run_uniform_verification",
    "run_baseline_cloud",
    "run_baseline_device",
    "run_fixed_split",
    "path_alignment_kl",
]

ORIGIN_PREFIX = "prefix"
ORIGIN_DEVICE = "device"
ORIGIN_CLOUD_VERIFIED = "cloud_verified"
ORIGIN_CLOUD_RESAMPLED = "cloud_resampled"

_ORIGINS = (ORIGIN_PREFIX, ORIGIN_DEVICE, ORIGIN_CLOUD_VERIFIED, ORIGIN_CLOUD_RESAMPLED)

# Working defaults, tuned once on the default 16x16 scene: tau sits inside the
# interval-score band that separates competitive border contexts from settled
# interior runs, rho matches the usual prefix share of the sweeps.
DEFAULT_TAU = 0.25
DEFAULT_RHO = 0.06

_SUMMARY_TOP_WIDTHS = 8


class DecodeError(ValueError):
    """Invalid decode configuration or malformed run inputs."""


@dataclass(frozen=True)
class RollingQuantilePolicy:
    """Adaptive threshold: the q-quantile of the most recent interval scores.

    Off by default everywhere; the static threshold is the reference policy.
    """

    q: float
    window: int

    def __post_init__(self):
        if not (0.0 < float(self.q) < 1.0) or not math.isfinite(float(self.q)):
            raise DecodeError(f"quantile must lie in (0, 1), got {self.q!r}")
        if int(self.window) < 1:
            raise DecodeError(f"window must be >= 1, got {self.window!r}")
        object.__setattr__(self, "q", float(self.q))
        object.__setattr__(self, "window", int(self.window))


@dataclass(frozen=True)
class DecodeConfig:
    """One decode run: sequence length, buffer size K, gate threshold tau,
    cloud prefix share rho, and the scoring/feature options."""

    seq_len: int
    K: int = 4
    tau: float = DEFAULT_TAU
    rho: float = DEFAULT_RHO
    seed: int = 0
    threshold_policy: RollingQuantilePolicy | str = "static"
    feature_mode: str = "full"

    def __post_init__(self):
        if int(self.seq_len) < 1:
            raise DecodeError(f"seq_len must be positive, got {self.seq_len!r}")
        if int(self.K) < 1:
            raise DecodeError(f"K must be >= 1, got {self.K!r}")
        tau = float(self.tau)
        if math.isnan(tau) or tau < 0.0:
            raise DecodeError(f"tau must be >= 0 (or +inf), got {self.tau!r}")
        rho = float(self.rho)
        if not (0.0 <= rho <= 1.0):
            raise DecodeError(f"rho must lie in [0, 1], got {self.rho!r}")
        if isinstance(self.threshold_policy, str):
            if self.threshold_policy != "static":
                raise DecodeError(
                    f"unknown threshold policy {self.threshold_policy!r}"
                )
        elif not isinstance(self.threshold_policy, RollingQuantilePolicy):
            raise DecodeError("threshold_policy must be 'static' or a RollingQuantilePolicy")
        if self.feature_mode not in ("full", "summary"):
            raise DecodeError(f"feature_mode must be 'full' or 'summary', got {self.feature_mode!r}")
        object.__setattr__(self, "seq_len", int(self.seq_len))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def prefix_len(self) -> int:
        return math.floor(self.rho * self.seq_len)


@dataclass(frozen=True)
class TraceRecord:
    """One emitted token: where it came from and what crossing it cost."""

    pos: int
    token: int
    origin: str
    uncertainty: float | None
    boundary: bool
    uplink_bits: float = 0.0
    downlink_bits: float = 0.0

    def __post_init__(self):
        if self.origin not in _ORIGINS:
            raise DecodeError(f"unknown origin {self.origin!r}")

    def to_json_dict(self) -> dict:
        return {
            "pos": self.pos,
            "token": self.token,
            "origin": self.origin,
            "uncertainty": self.uncertainty,
            "boundary": self.boundary,
            "uplink_bits": self.uplink_bits,
            "downlink_bits": self.downlink_bits,
        }


@dataclass(frozen=True)
class EpisodeEvent:
    """One cloud verification call: buffer sent up, tokens emitted back down."""

    trigger_pos: int
    buffered: int
    accepted: int
    emitted: int
    uplink_bits: float
    downlink_bits: float


@dataclass(frozen=True)
class DecodeTrace:
    """Complete evidence stream of one run.

    ``records`` covers every position exactly once in order; ``episodes``
    lists the cloud verification calls; the step counters partition all
    sequential model invocations between the two sides.
    """

    records: tuple[TraceRecord, ...]
    episodes: tuple[EpisodeEvent, ...]
    prefix_len: int
    device_steps: int
    cloud_steps: int

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "episodes", tuple(self.episodes))
        for i, rec in enumerate(self.records):
            if rec.pos != i:
                raise DecodeError(f"record {i} carries pos {rec.pos}; trace must be contiguous")
            if (rec.origin == ORIGIN_PREFIX) != (i < self.prefix_len):
                raise DecodeError("prefix origins must occupy exactly the first prefix_len records")

    @property
    def seq_len(self) -> int:
        return len(self.records)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([rec.token for rec in self.records], dtype=np.int64)


@dataclass(frozen=True)
class EpisodeMetrics:
    """Run-level counters. ``cloud_call_rate`` is the share of tokens the
    cloud produced (prefix, verified, and resampled all count); verification
    episodes are reported separately from per-token cloud work."""

    cloud_calls: int
    device_accepts: int
    cloud_call_rate: float
    steps: int
    episodes: int

    def __post_init__(self):
        if not (0.0 <= self.cloud_call_rate <= 1.0):
            raise DecodeError(f"cloud_call_rate outside [0, 1]: {self.cloud_call_rate!r}")


def metrics_from_trace(trace: DecodeTrace) -> EpisodeMetrics:
    device_accepts = sum(1 for rec in trace.records if rec.origin == ORIGIN_DEVICE)
    cloud_tokens = trace.seq_len - device_accepts
    return EpisodeMetrics(
        cloud_calls=trace.cloud_steps,
        device_accepts=device_accepts,
        cloud_call_rate=cloud_tokens / trace.seq_len,
        steps=trace.device_steps + trace.cloud_steps,
        episodes=len(trace.episodes),
    )


def interval_feature(
    params: ModelParams,
    hidden: np.ndarray,
    box: ProbIntervalVec,
    mode: str = "full",
) -> np.ndarray:
    """Project the device's interval evidence into the embedding space.

    Full mode carries the entire probability box; summary mode compresses it
    to total width, spread, score, and the top widths (zero-padded when the
    vocabulary is smaller than the summary slot count).
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (params.d,):
        raise DecodeError(f"hidden must have shape ({params.d},), got {hidden.shape}")
    if mode == "full":
        if box.n != params.n:
            raise DecodeError(f"box size {box.n} does not match vocabulary {params.n}")
        stacked = np.concatenate([hidden, box.lower, box.upper])
        return params.phi @ stacked
    if mode == "summary":
        delta = widths(box)
        parts = breakdown_from_widths(delta)
        top = np.sort(delta)[::-1][:_SUMMARY_TOP_WIDTHS]
        if top.shape[0] < _SUMMARY_TOP_WIDTHS:
            top = np.pad(top, (0, _SUMMARY_TOP_WIDTHS - top.shape[0]))
        stacked = np.concatenate([hidden, [parts.omega, parts.sigma, parts.score], top])
        return params.phi_summary @ stacked
    raise DecodeError(f"unknown feature mode {mode!r}")


def dynamic_threshold(history, q: float, window: int) -> float:
    """Nearest-rank q-quantile of the last ``window`` scores."""
    if len(history) == 0:
        raise DecodeError("dynamic threshold needs at least one past score")
    recent = sorted(history[-window:])
    rank = math.ceil(q * len(recent))
    rank = min(max(rank, 1), len(recent))
    return float(recent[rank - 1])


@dataclass(frozen=True)
class _Draft:
    """One device-drafted position awaiting cloud verification."""

    pos: int
    token: int
    hidden: np.ndarray
    box: ProbIntervalVec
    score: float


def verify_buffer(
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    context,
    buffered,
    feature_mode: str = "full",
) -> tuple[int, int | None]:
    """Cloud-side check of a drafted buffer.

    Walks the buffer in order, recomputing the cloud's distribution at each
    position with that draft's interval feature injected, and accepts while
    the cloud's greedy choice matches the draft. Returns the accepted count
    plus the cloud's replacement token: at the first mismatch that is the
    cloud's own pick there; after a fully accepted buffer it is the greedy
    continuation (reusing the final draft's feature), or None when the
    sequence is already complete.
    """
    if len(buffered) == 0:
        raise DecodeError("verify_buffer needs a nonempty buffer")
    ctx = list(context)
    accepted = 0
    last_feature = None
    for draft in buffered:
        last_feature = interval_feature(params, draft.hidden, draft.box, feature_mode)
        logits = cloud_logits(scene, spec, params, ctx, draft.pos, interval_feature=last_feature)
        choice = int(np.argmax(logits))
        if choice != draft.token:
            return accepted, choice
        accepted += 1
        ctx.append(draft.token)
    next_pos = buffered[-1].pos + 1
    if next_pos >= spec.seq_len:
        return accepted, None
    logits = cloud_logits(scene, spec, params, ctx, next_pos, interval_feature=last_feature)
    return accepted, int(np.argmax(logits))


def _check_run_inputs(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    head: InterHeadParams | None = None,
) -> None:
    if cfg.seq_len != spec.seq_len:
        raise DecodeError(f"cfg.seq_len {cfg.seq_len} does not match the scene's {spec.seq_len}")
    if params.n != spec.n:
        raise DecodeError(f"params vocabulary {params.n} does not match the scene's {spec.n}")
    if head is not None and (head.n != params.n or head.d != params.d):
        raise DecodeError(
            f"head shape ({head.n}, {head.d}) does not match params ({params.n}, {params.d})"
        )


def _cloud_greedy_records(
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    context: list,
    start: int,
    stop: int,
    origin: str,
    records: list,
) -> None:
    for pos in range(start, stop):
        logits = cloud_logits(scene, spec, params, context, pos)
        token = int(np.argmax(logits))
        records.append(
            TraceRecord(pos, token, origin, None, bool(scene.boundary_at(pos)))
        )
        context.append(token)


def _effective_tau(cfg: DecodeConfig, history: list) -> float:
    policy = cfg.threshold_policy
    if isinstance(policy, RollingQuantilePolicy) and len(history) >= policy.window:
        return dynamic_threshold(history, policy.q, policy.window)
    return cfg.tau


def _decode_collaborative(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    head: InterHeadParams,
    gate_enabled: bool,
    fuse_config: FuseConfig,
    payload: PayloadModel,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    _check_run_inputs(cfg, scene, spec, params, head)
    m = cfg.prefix_len
    context: list[int] = []
    records: list[TraceRecord] = []
    episodes: list[EpisodeEvent] = []
    _cloud_greedy_records(scene, spec, params, context, 0, m, ORIGIN_PREFIX, records)
    cloud_steps = m
    device_steps = 0
    history: list[float] = []
    pos = m
    while pos < cfg.seq_len:
        hidden = device_hidden(params, context, pos)
        box = inter_fuse(
            inter_head_forward(head, hidden, fuse_config.radius_clamp_max), fuse_config
        )
        score = uncertainty_score(box).score
        device_steps += 1
        threshold = _effective_tau(cfg, history)
        history.append(score)
        if gate_enabled and score <= threshold:
            token = int(np.argmax(device_logits(scene, spec, params, context, pos)))
            records.append(
                TraceRecord(pos, token, ORIGIN_DEVICE, score, bool(scene.boundary_at(pos)))
            )
            context.append(token)
            pos += 1
            continue

        # Deferred: draft up to K tokens from here, then one cloud call.
        buffered: list[_Draft] = []
        draft_ctx = list(context)
        draft_pos = pos
        limit = min(cfg.K, cfg.seq_len - pos)
        while len(buffered) < limit:
            if buffered:
                hidden = device_hidden(params, draft_ctx, draft_pos)
                box = inter_fuse(
                    inter_head_forward(head, hidden, fuse_config.radius_clamp_max),
                    fuse_config,
                )
                score = uncertainty_score(box).score
                device_steps += 1
                history.append(score)
            token = int(np.argmax(device_logits(scene, spec, params, draft_ctx, draft_pos)))
            buffered.append(_Draft(draft_pos, token, hidden, box, score))
            draft_ctx.append(token)
            draft_pos += 1

        accepted, resampled = verify_buffer(
            scene, spec, params, context, buffered, cfg.feature_mode
        )
        cloud_steps += 1
        emitted = accepted + (1 if resampled is not None else 0)
        uplink = payload.bits_fixed_per_call + len(buffered) * (
            payload.bits_per_token_up + payload.bits_per_feature
        )
        downlink = payload.bits_fixed_per_call + emitted * payload.bits_per_token_down
        episodes.append(EpisodeEvent(pos, len(buffered), accepted, emitted, uplink, downlink))

        for i in range(accepted):
            draft = buffered[i]
            records.append(
                TraceRecord(
                    draft.pos,
                    draft.token,
                    ORIGIN_CLOUD_VERIFIED,
                    draft.score,
                    bool(scene.boundary_at(draft.pos)),
                    uplink_bits=uplink if i == 0 else 0.0,
                    downlink_bits=downlink if resampled is None and i == accepted - 1 else 0.0,
                )
            )
            context.append(draft.token)
        if resampled is not None:
            rpos = pos + accepted
            # Rejected drafts were device-evaluated; a continuation past a
            # fully accepted buffer never was, so its uncertainty is absent.
            score_at = buffered[accepted].score if accepted < len(buffered) else None
            records.append(
                TraceRecord(
                    rpos,
                    resampled,
                    ORIGIN_CLOUD_RESAMPLED,
                    score_at,
                    bool(scene.boundary_at(rpos)),
                    uplink_bits=uplink if accepted == 0 else 0.0,
                    downlink_bits=downlink,
                )
            )
            context.append(resampled)
        pos += emitted

    trace = DecodeTrace(
        records=tuple(records),
        episodes=tuple(episodes),
        prefix_len=m,
        device_steps=device_steps,
        cloud_steps=cloud_steps,
    )
    return trace.tokens, trace, metrics_from_trace(trace)


def run_ciar(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    head: InterHeadParams,
    fuse_config: FuseConfig = DEFAULT_FUSE_CONFIG,
    payload: PayloadModel | None = None,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    """Interval-gated collaborative decode: cloud prefix, device decoding
    under the uncertainty gate, buffered cloud verification on deferral."""
    payload = payload if payload is not None else PayloadModel.for_hidden_dim(params.d)
    return _decode_collaborative(
        cfg, scene, spec, params, head, True, fuse_config, payload
    )


def run_uniform_verification(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    head: InterHeadParams,
    fuse_config: FuseConfig = DEFAULT_FUSE_CONFIG,
    payload: PayloadModel | None = None,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    """The same loop with the gate forced open: every block is verified."""
    payload = payload if payload is not None else PayloadModel.for_hidden_dim(params.d)
    return _decode_collaborative(
        cfg, scene, spec, params, head, False, fuse_config, payload
    )


def run_baseline_cloud(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    """Pure cloud greedy decoding: every token is a cloud step."""
    _check_run_inputs(cfg, scene, spec, params)
    context: list[int] = []
    records: list[TraceRecord] = []
    _cloud_greedy_records(
        scene, spec, params, context, 0, cfg.seq_len, ORIGIN_CLOUD_VERIFIED, records
    )
    trace = DecodeTrace(
        records=tuple(records),
        episodes=(),
        prefix_len=0,
        device_steps=0,
        cloud_steps=cfg.seq_len,
    )
    return trace.tokens, trace, metrics_from_trace(trace)


def run_baseline_device(
    cfg: DecodeConfig,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    """Pure device greedy decoding: the cloud is never consulted."""
    _check_run_inputs(cfg, scene, spec, params)
    context: list[int] = []
    records: list[TraceRecord] = []
    for pos in range(cfg.seq_len):
        token = int(np.argmax(device_logits(scene, spec, params, context, pos)))
        records.append(
            TraceRecord(pos, token, ORIGIN_DEVICE, None, bool(scene.boundary_at(pos)))
        )
        context.append(token)
    trace = DecodeTrace(
        records=tuple(records),
        episodes=(),
        prefix_len=0,
        device_steps=cfg.seq_len,
        cloud_steps=0,
    )
    return trace.tokens, trace, metrics_from_trace(trace)


def run_fixed_split(
    cfg: DecodeConfig,
    split_n: float,
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
) -> tuple[np.ndarray, DecodeTrace, EpisodeMetrics]:
    """Cloud decodes a fixed share of the sequence, the device finishes it."""
    _check_run_inputs(cfg, scene, spec, params)
    split_n = float(split_n)
    if not (0.0 <= split_n <= 1.0):
        raise DecodeError(f"split share must lie in [0, 1], got {split_n!r}")
    cut = math.floor(split_n * cfg.seq_len)
    context: list[int] = []
    records: list[TraceRecord] = []
    _cloud_greedy_records(scene, spec, params, context, 0, cut, ORIGIN_PREFIX, records)
    for pos in range(cut, cfg.seq_len):
        token = int(np.argmax(device_logits(scene, spec, params, context, pos)))
        records.append(
            TraceRecord(pos, token, ORIGIN_DEVICE, None, bool(scene.boundary_at(pos)))
        )
        context.append(token)
    trace = DecodeTrace(
        records=tuple(records),
        episodes=(),
        prefix_len=cut,
        device_steps=cfg.seq_len - cut,
        cloud_steps=cut,
    )
    return trace.tokens, trace, metrics_from_trace(trace)


def path_alignment_kl(
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    trace: DecodeTrace,
) -> float:
    """Mean per-token divergence of the run's emitting distributions from the
    cloud's, replayed along the decoded path.

    Cloud-produced positions emit from the cloud distribution itself and
    contribute zero; device-produced positions contribute
    KL(cloud || device) at that context.
    """
    tokens = [rec.token for rec in trace.records]
    total = 0.0
    for rec in trace.records:
        if rec.origin not in (ORIGIN_DEVICE,):
            continue
        ctx = tokens[: rec.pos]
        p_cloud = special.softmax(cloud_logits(scene, spec, params, ctx, rec.pos))
        p_dev = special.softmax(device_logits(scene, spec, params, ctx, rec.pos))
        total += float(np.sum(special.rel_entr(p_cloud, np.maximum(p_dev, 1e-300))))
    return total / trace.seq_len
