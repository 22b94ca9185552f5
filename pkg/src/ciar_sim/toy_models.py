"""Seeded stand-in models for the cloud/device decoding experiments.

The "world" is a small grid of tokens partitioned into Voronoi regions.
Region interiors are trivially predictable; cells within one step of a
region border are where prediction is genuinely hard. Both the cloud and
the device stand-ins anchor their logits to the ground-truth token and add
seeded noise whose scale depends on that boundary structure, so the two
models agree almost everywhere except near borders. That is the whole
point: it gives the routing gate something real to detect.

Every random quantity is derived from named integer streams so that any
(seed, position) pair always reproduces the same draw regardless of call
order. Draw results are cached read-only because decode loops revisit
positions heavily.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .intervals import LogitIntervalVec, DEFAULT_RADIUS_CLAMP_MAX

# Named noise streams. Values are arbitrary but must never collide.
_STREAM_CLOUD_NOISE = 101
_STREAM_DEVICE_NOISE = 102
_STREAM_POS_OFFSET = 103
_STREAM_WEIGHTS = 104
_STREAM_ANALYTIC_HEAD = 105

# How many trailing context tokens feed the decoder's mixing term.
CONTEXT_WINDOW = 4

# Weight of the context-mixing term relative to the truth anchor.
MIX_SCALE = 0.1

# On boundary cells the anchor mass is split between the cell's own token
# and the dominant neighboring region's token. The truth side keeps the
# majority so the noise-free argmax is still the ground truth; the rival
# share creates genuine two-way competition, which is what makes border
# cells hard for both models (and measurably flatter in entropy).
BOUNDARY_RIVAL_SHARE = 0.35


class ToyModelError(ValueError):
    """Raised on invalid scene or model parameters."""


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and noise knobs for one generated scene."""

    h: int = 16
    w: int = 16
    n: int = 64
    num_regions: int = 5
    interior_noise: float = 0.1
    boundary_noise: float = 2.0
    temperature: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ToyModelError("grid must be at least 1x1")
        if self.n < 2:
            raise ToyModelError("need a vocabulary of at least 2 tokens")
        if not (1 <= self.num_regions <= self.h * self.w):
            raise ToyModelError("num_regions must be in [1, h*w]")
        if self.interior_noise < 0 or self.boundary_noise < 0:
            raise ToyModelError("noise scales must be nonnegative")
        if self.temperature <= 0:
            raise ToyModelError("temperature must be positive")

    @property
    def seq_len(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class TokenGrid:
    """Ground-truth tokens plus the mask of border-adjacent cells.

    ``rival_tokens`` holds, for each boundary cell, the most common token
    among differing neighbors (lowest id on count ties); interior cells
    just repeat their own token there.
    """

    tokens: np.ndarray
    boundary_mask: np.ndarray
    rival_tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        b = np.asarray(self.boundary_mask, dtype=bool)
        r = np.asarray(self.rival_tokens, dtype=np.int64)
        if t.shape != b.shape or t.shape != r.shape or t.ndim != 2:
            raise ToyModelError("grid fields must share a 2-d shape")
        t, b, r = t.copy(), b.copy(), r.copy()
        for arr in (t, b, r):
            arr.flags.writeable = False
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "boundary_mask", b)
        object.__setattr__(self, "rival_tokens", r)

    def token_at(self, pos: int) -> int:
        return int(self.tokens.flat[pos])

    def boundary_at(self, pos: int) -> bool:
        return bool(self.boundary_mask.flat[pos])

    def rival_at(self, pos: int) -> int:
        return int(self.rival_tokens.flat[pos])

    def to_json_dict(self) -> dict:
        return {
            "tokens": self.tokens.tolist(),
            "boundary_mask": self.boundary_mask.astype(int).tolist(),
            "rival_tokens": self.rival_tokens.tolist(),
        }


def generate_scene(spec: SceneSpec) -> TokenGrid:
    """Voronoi-partition the grid and assign one token per region.

    Sites are distinct cells; each grid cell joins the nearest site in
    Euclidean distance, ties to the lowest site index. The boundary mask
    flags cells with any 8-neighbor in a different region, so with one
    region it is empty everywhere.
    """
    rng = np.random.default_rng([spec.seed, _STREAM_WEIGHTS, 0])
    cells = rng.choice(spec.h * spec.w, size=spec.num_regions, replace=False)
    sites = np.stack([cells // spec.w, cells % spec.w], axis=1).astype(np.float64)

    rows, cols = np.mgrid[0 : spec.h, 0 : spec.w]
    # squared distances to every site, shape (num_regions, h, w)
    d2 = (rows[None] - sites[:, 0, None, None]) ** 2 + (
        cols[None] - sites[:, 1, None, None]
    ) ** 2
    region = np.argmin(d2, axis=0)  # argmin takes the lowest index on ties

    perm = rng.permutation(spec.n)
    region_tokens = perm[np.arange(spec.num_regions) % spec.n]
    tokens = region_tokens[region]

    boundary = np.zeros((spec.h, spec.w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full((spec.h, spec.w), -1, dtype=np.int64)
            r0, r1 = max(dr, 0), spec.h + min(dr, 0)
            c0, c1 = max(dc, 0), spec.w + min(dc, 0)
            shifted[r0:r1, c0:c1] = region[r0 - dr : r1 - dr, c0 - dc : c1 - dc]
            boundary |= (shifted >= 0) & (shifted != region)

    rival = tokens.copy()
    for i, j in zip(*np.nonzero(boundary)):
        counts = {}
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if (di or dj) and 0 <= ii < spec.h and 0 <= jj < spec.w:
                    if region[ii, jj] != region[i, j]:
                        tok = int(tokens[ii, jj])
                        counts[tok] = counts.get(tok, 0) + 1
        # most common differing neighbor token, smallest id breaking ties
        rival[i, j] = min(counts, key=lambda tok: (-counts[tok], tok))
    return TokenGrid(tokens, boundary, rival)


@dataclass(frozen=True)
class ModelParams:
    """Shared embedding plus cloud/device decoder and readout weights.

    ``phi`` projects concat(hidden, lower, upper) into the embedding space;
    ``phi_summary`` does the same for the compact summary feature.
    """

    embed_table: np.ndarray
    w_dec_cloud: np.ndarray
    w_dec_device: np.ndarray
    readout_cloud: np.ndarray
    readout_device: np.ndarray
    phi: np.ndarray
    phi_summary: np.ndarray
    d: int
    seed: int

    @property
    def n(self) -> int:
        return self.embed_table.shape[0]

    @classmethod
    def generate(
        cls, n: int, d: int, seed: int, shared_weights: bool = False
    ) -> "ModelParams":
        """Seeded weights. ``shared_weights=True`` gives the device the
        cloud's decoder and readout, which makes the two stand-ins identical
        up to their noise streams."""
        rng = np.random.default_rng([seed, _STREAM_WEIGHTS, 1])
        embed = rng.normal(0.0, 1.0, size=(n, d))
        w_dec_cloud = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        readout_cloud = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d))
        w_dec_device = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        readout_device = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d))
        phi = rng.normal(0.0, 1.0 / np.sqrt(d + 2 * n), size=(d, d + 2 * n))
        phi_summary = rng.normal(0.0, 1.0 / np.sqrt(d + 11), size=(d, d + 11))
        if shared_weights:
            w_dec_device = w_dec_cloud
            readout_device = readout_cloud
        arrays = {}
        for name, arr in (
            ("embed_table", embed),
            ("w_dec_cloud", w_dec_cloud),
            ("w_dec_device", w_dec_device),
            ("readout_cloud", readout_cloud),
            ("readout_device", readout_device),
            ("phi", phi),
            ("phi_summary", phi_summary),
        ):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            arrays[name] = arr
        return cls(d=d, seed=seed, **arrays)


@lru_cache(maxsize=200_000)
def _seeded_normal(seed: int, stream: int, pos: int, size: int) -> np.ndarray:
    """Unit-scale normal draw for one (seed, stream, position) triple."""
    out = np.random.default_rng([seed, stream, pos]).normal(0.0, 1.0, size=size)
    out.flags.writeable = False
    return out


def embed(params: ModelParams, token: int) -> np.ndarray:
    if not (0 <= token < params.n):
        raise ToyModelError(f"token {token} outside vocabulary of {params.n}")
    return params.embed_table[token]


def context_feature(params: ModelParams, context) -> np.ndarray:
    """Mean embedding of the trailing context window; zeros when empty."""
    tail = list(context)[-CONTEXT_WINDOW:]
    if not tail:
        return np.zeros(params.d)
    return params.embed_table[np.asarray(tail, dtype=np.int64)].mean(axis=0)


def cloud_decoder_step(
    params: ModelParams,
    token_embedding: np.ndarray,
    interval_feature: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One cloud decoder evaluation, optionally with an injected feature.

    The feature is added to the input embedding, which is how device-side
    interval evidence enters the cloud's computation.
    """
    x = token_embedding if interval_feature is None else token_embedding + interval_feature
    hidden = np.tanh(params.w_dec_cloud @ x)
    logits = params.readout_cloud @ hidden
    return hidden, logits


def _anchor(scene: TokenGrid, spec: SceneSpec, pos: int) -> np.ndarray:
    """Truth anchor at one position. Interior cells put the full 1/temperature
    on the ground-truth token; boundary cells split it with the dominant
    neighboring region's token, truth side keeping the majority."""
    base = np.zeros(spec.n)
    truth = scene.token_at(pos)
    if scene.boundary_at(pos):
        rival = scene.rival_at(pos)
        base[truth] = (1.0 - BOUNDARY_RIVAL_SHARE) / spec.temperature
        base[rival] += BOUNDARY_RIVAL_SHARE / spec.temperature
    else:
        base[truth] = 1.0 / spec.temperature
    return base


def cloud_logits(
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    context,
    pos: int,
    interval_feature: np.ndarray | None = None,
) -> np.ndarray:
    """Cloud logits at one position: truth anchor + seeded noise + mixing.

    Noise depends only on (scene seed, position); the context enters through
    the decoder-step mixing term. On boundary cells the noise scale is half
    the device's boundary scale, since the cloud is the stronger model.
    """
    if not (0 <= pos < spec.seq_len):
        raise ToyModelError(f"pos {pos} outside sequence of {spec.seq_len}")
    scale = 0.5 * spec.boundary_noise if scene.boundary_at(pos) else spec.interior_noise
    noise = scale * _seeded_normal(spec.seed, _STREAM_CLOUD_NOISE, pos, spec.n)
    _, mix = cloud_decoder_step(params, context_feature(params, context), interval_feature)
    return _anchor(scene, spec, pos) + noise + MIX_SCALE * mix


def device_logits(
    scene: TokenGrid,
    spec: SceneSpec,
    params: ModelParams,
    context,
    pos: int,
) -> np.ndarray:
    """Device logits: the cloud construction with device weights plus an
    extra seeded perturbation (full boundary scale on border cells)."""
    if not (0 <= pos < spec.seq_len):
        raise ToyModelError(f"pos {pos} outside sequence of {spec.seq_len}")
    on_boundary = scene.boundary_at(pos)
    cloud_scale = 0.5 * spec.boundary_noise if on_boundary else spec.interior_noise
    noise = cloud_scale * _seeded_normal(spec.seed, _STREAM_CLOUD_NOISE, pos, spec.n)
    extra_scale = spec.boundary_noise if on_boundary else spec.interior_noise
    extra = extra_scale * _seeded_normal(spec.seed, _STREAM_DEVICE_NOISE, pos, spec.n)
    mix_in = np.tanh(params.w_dec_device @ context_feature(params, context))
    mix = params.readout_device @ mix_in
    return _anchor(scene, spec, pos) + noise + MIX_SCALE * mix + extra


def device_hidden(params: ModelParams, context, pos: int) -> np.ndarray:
    """Device hidden state: decoded context feature plus a positional offset.

    With an empty context at pos 0 the decoded part is exactly zero and only
    the offset remains.
    """
    core = np.tanh(params.w_dec_device @ context_feature(params, context))
    offset = 0.1 * _seeded_normal(params.seed, _STREAM_POS_OFFSET, pos, params.d)
    return core + offset


def softplus(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x) with a linear branch above 30 to dodge overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


@dataclass(frozen=True)
class InterHeadParams:
    """Affine interval head: center = W_c h + b_c, radius = softplus(W_r h + b_r)."""

    w_center: np.ndarray
    b_center: np.ndarray
    w_radius: np.ndarray
    b_radius: np.ndarray

    def __post_init__(self):
        wc = np.asarray(self.w_center, dtype=np.float64)
        wr = np.asarray(self.w_radius, dtype=np.float64)
        bc = np.asarray(self.b_center, dtype=np.float64)
        br = np.asarray(self.b_radius, dtype=np.float64)
        if wc.shape != wr.shape or wc.ndim != 2:
            raise ToyModelError("weight matrices must share an (n, d) shape")
        if bc.shape != (wc.shape[0],) or br.shape != (wc.shape[0],):
            raise ToyModelError("bias shapes must match the vocabulary size")
        for name, arr in (
            ("w_center", wc),
            ("b_center", bc),
            ("w_radius", wr),
            ("b_radius", br),
        ):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.w_center.shape[0]

    @property
    def d(self) -> int:
        return self.w_center.shape[1]

    @classmethod
    def init_random(cls, n: int, d: int, seed: int, scale: float = 0.1) -> "InterHeadParams":
        rng = np.random.default_rng([seed, _STREAM_ANALYTIC_HEAD, 0])
        return cls(
            w_center=scale * rng.normal(size=(n, d)),
            b_center=np.zeros(n),
            w_radius=scale * rng.normal(size=(n, d)),
            b_radius=np.zeros(n),
        )


def inter_head_forward(
    head: InterHeadParams,
    hidden: np.ndarray,
    radius_clamp_max: float = DEFAULT_RADIUS_CLAMP_MAX,
) -> LogitIntervalVec:
    center = head.w_center @ hidden + head.b_center
    radius = softplus(head.w_radius @ hidden + head.b_radius)
    radius = np.minimum(radius, radius_clamp_max)
    return LogitIntervalVec(center, radius)


# Analytic head defaults, tuned once against the default scene so that
# border-cell scores land inside the working threshold range (roughly
# 0.05..0.4) while interior scores stay an order of magnitude below it.
ANALYTIC_CENTER_SCALE = 40.0
ANALYTIC_RADIUS_BIAS = 1.85
ANALYTIC_RADIUS_SCALE = 0.05


def build_analytic_head(
    params: ModelParams,
    center_scale: float = ANALYTIC_CENTER_SCALE,
    radius_bias: float = ANALYTIC_RADIUS_BIAS,
    radius_scale: float = ANALYTIC_RADIUS_SCALE,
) -> InterHeadParams:
    """Fixed head for protocol tests: centers mirror the device readout so
    the interval box peaks where the device model would, and radii sit near
    softplus(radius_bias) with mild seeded variation."""
    rng = np.random.default_rng([params.seed, _STREAM_ANALYTIC_HEAD, 1])
    n, d = params.n, params.d
    return InterHeadParams(
        w_center=center_scale * params.readout_device,
        b_center=np.zeros(n),
        w_radius=radius_scale * rng.normal(size=(n, d)),
        b_radius=np.full(n, radius_bias),
    )
