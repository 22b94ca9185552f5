"""JSON run configuration for the experiment runner.

One file describes the scene, the decode policy, the stand-in model sizes,
the network and payload assumptions, optional training settings, and optional
sweep grids. Parsing is strict: unknown keys and invalid values fail with the
offending field's dotted path, and syntactically broken JSON reports the byte
offset from the parser.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .decoder import DecodeConfig, DecodeError, RollingQuantilePolicy
from .netsim import (
    ComputeModel,
    NetworkConfigError,
    NetworkProfile,
    PayloadModel,
    builtin_profiles,
)
from .toy_models import SceneSpec, ToyModelError
from .training import InterDroConfig, TrainingError

__all__ = [
    "ConfigError",
    "SweepGrid",
    "RunConfig",
    "load_run_config",
    "parse_run_config",
    "apply_overrides",
    "POLICY_NAMES",
    "DEFAULT_MODEL_D",
]

POLICY_NAMES = ("ciar", "uniform", "base_cloud", "base_device", "fixed_split")
DEFAULT_POLICIES = ("ciar", "uniform", "base_cloud", "base_device")
DEFAULT_MODEL_D = 32


class ConfigError(ValueError):
    """Invalid run configuration; message starts with the field path."""

    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message)
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class SweepGrid:
    """Nonempty value grids; the sweep runs their cross-product."""

    tau: tuple[float, ...]
    rho: tuple[float, ...]
    k: tuple[int, ...]
    seed: tuple[int, ...]

    def __post_init__(self):
        for name in ("tau", "rho", "k", "seed"):
            values = getattr(self, name)
            if len(values) == 0:
                raise ConfigError(f"sweep.{name}: grid must be nonempty")

    @property
    def cells(self) -> int:
        return len(self.tau) * len(self.rho) * len(self.k) * len(self.seed)


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec
    decode: DecodeConfig
    network_name: str
    network: NetworkProfile
    payload: PayloadModel
    compute: ComputeModel
    model_d: int
    model_seed: int
    shared_weights: bool
    head_path: str | None
    training: InterDroConfig | None
    sweep: SweepGrid | None
    policies: tuple[str, ...]
    split: float
    output_dir: str


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    return value


def _reject_unknown(data: dict, allowed, path: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")


def _build(ctor, data: dict, path: str, error_types) -> object:
    try:
        return ctor(**data)
    except error_types as exc:
        # Validation messages start with the field name; promote it into
        # the dotted path when it names a provided key.
        message = str(exc)
        first = message.split(" ", 1)[0].rstrip(":")
        prefix = f"{path}.{first}" if first in data else path
        raise ConfigError(f"{prefix}: {message}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_scene(raw: dict) -> SceneSpec:
    data = _require_mapping(raw, "scene")
    allowed = (
        "h", "w", "n", "num_regions", "interior_noise",
        "boundary_noise", "temperature", "seed",
    )
    _reject_unknown(data, allowed, "scene")
    return _build(SceneSpec, data, "scene", (ToyModelError, ValueError))


def _parse_decode(raw: dict, scene: SceneSpec) -> DecodeConfig:
    data = dict(_require_mapping(raw, "decode"))
    allowed = ("seq_len", "K", "tau", "rho", "seed", "threshold_policy", "feature_mode")
    _reject_unknown(data, allowed, "decode")
    data.setdefault("seq_len", scene.seq_len)
    if data["seq_len"] != scene.seq_len:
        raise ConfigError(
            f"decode.seq_len: {data['seq_len']} does not match the scene's "
            f"{scene.h}x{scene.w} grid ({scene.seq_len} positions)"
        )
    policy = data.get("threshold_policy", "static")
    if isinstance(policy, dict):
        _reject_unknown(policy, ("q", "window"), "decode.threshold_policy")
        data["threshold_policy"] = _build(
            RollingQuantilePolicy, policy, "decode.threshold_policy", (DecodeError,)
        )
    return _build(DecodeConfig, data, "decode", (DecodeError,))


def _parse_network(raw) -> tuple[str, NetworkProfile]:
    if isinstance(raw, str):
        profiles = builtin_profiles()
        if raw not in profiles:
            known = ", ".join(sorted(profiles))
            raise ConfigError(f"network: unknown profile {raw!r} (builtin: {known})")
        return raw, profiles[raw]
    data = _require_mapping(raw, "network")
    _reject_unknown(data, ("bandwidth_mbps", "rtt_ms"), "network")
    profile = _build(NetworkProfile, data, "network", (NetworkConfigError,))
    return "custom", profile


def _parse_payload(raw, model_d: int) -> PayloadModel:
    data = _require_mapping(raw, "payload")
    allowed = (
        "bits_per_token_up", "bits_per_token_down", "bits_per_feature", "bits_fixed_per_call",
    )
    _reject_unknown(data, allowed, "payload")
    try:
        return PayloadModel.for_hidden_dim(model_d, **data)
    except NetworkConfigError as exc:
        raise ConfigError(f"payload: {exc}") from exc


def _parse_model(raw) -> tuple[int, int, bool]:
    data = _require_mapping(raw, "model")
    _reject_unknown(data, ("d", "seed", "shared_weights"), "model")
    d = data.get("d", DEFAULT_MODEL_D)
    seed = data.get("seed", 0)
    shared = data.get("shared_weights", False)
    if not isinstance(d, int) or d < 1:
        raise ConfigError(f"model.d: must be a positive integer, got {d!r}")
    if not isinstance(seed, int):
        raise ConfigError(f"model.seed: must be an integer, got {seed!r}")
    if not isinstance(shared, bool):
        raise ConfigError(f"model.shared_weights: must be a boolean, got {shared!r}")
    return d, seed, shared


def _parse_sweep(raw, decode: DecodeConfig) -> SweepGrid:
    data = _require_mapping(raw, "sweep")
    _reject_unknown(data, ("tau", "rho", "K", "seed"), "sweep")

    def grid(key, default, cast):
        values = data.get(key, [default])
        if not isinstance(values, list):
            raise ConfigError(f"sweep.{key}: expected a list")
        try:
            return tuple(cast(v) for v in values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep.{key}: {exc}") from exc

    return SweepGrid(
        tau=grid("tau", decode.tau, float),
        rho=grid("rho", decode.rho, float),
        k=grid("K", decode.K, int),
        seed=grid("seed", decode.seed, int),
    )


def _parse_policies(raw) -> tuple[str, ...]:
    if isinstance(raw, str):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ConfigError("policies: expected a policy name or a nonempty list")
    for name in raw:
        if name not in POLICY_NAMES:
            known = ", ".join(POLICY_NAMES)
            raise ConfigError(f"policies: unknown policy {name!r} (known: {known})")
    return tuple(dict.fromkeys(raw))


_TOP_LEVEL_KEYS = (
    "scene", "decode", "model", "network", "payload", "compute",
    "training", "sweep", "policies", "policy", "split", "head_path", "output_dir",
)


def parse_run_config(data: dict) -> RunConfig:
    """Build a validated RunConfig from already-parsed JSON data."""
    data = _require_mapping(data, "config")
    unknown = sorted(set(data) - set(_TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    if "policy" in data and "policies" in data:
        raise ConfigError("policy: give either 'policy' or 'policies', not both")

    scene = _parse_scene(data.get("scene", {}))
    decode = _parse_decode(data.get("decode", {}), scene)
    model_d, model_seed, shared = _parse_model(data.get("model", {}))
    network_name, network = _parse_network(data.get("network", "5G"))
    payload = _parse_payload(data.get("payload", {}), model_d)
    compute_raw = _require_mapping(data.get("compute", {}), "compute")
    _reject_unknown(compute_raw, ("device_ms_per_step", "cloud_ms_per_step"), "compute")
    compute = _build(ComputeModel, compute_raw, "compute", (NetworkConfigError,))

    training = None
    if "training" in data:
        tr = _require_mapping(data["training"], "training")
        allowed = (
            "lambda_v", "lambda_p", "lambda_beta", "alpha",
            "learning_rate", "steps", "batch_size", "seed",
        )
        _reject_unknown(tr, allowed, "training")
        training = _build(InterDroConfig, tr, "training", (TrainingError,))

    sweep = _parse_sweep(data["sweep"], decode) if "sweep" in data else None
    policies = _parse_policies(data.get("policies", data.get("policy", list(DEFAULT_POLICIES))))

    split = data.get("split", 0.3)
    try:
        split = float(split)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"split: {exc}") from exc
    if not (0.0 <= split <= 1.0) or not math.isfinite(split):
        raise ConfigError(f"split: must lie in [0, 1], got {split}")

    head_path = data.get("head_path")
    if head_path is not None and not isinstance(head_path, str):
        raise ConfigError(f"head_path: expected a string path, got {head_path!r}")

    output_dir = data.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(f"output_dir: expected a nonempty string, got {output_dir!r}")

    return RunConfig(
        scene=scene,
        decode=decode,
        network_name=network_name,
        network=network,
        payload=payload,
        compute=compute,
        model_d=model_d,
        model_seed=model_seed,
        shared_weights=shared,
        head_path=head_path,
        training=training,
        sweep=sweep,
        policies=policies,
        split=split,
        output_dir=output_dir,
    )


def load_run_config(path) -> RunConfig:
    """Parse and validate a JSON config file.

    Malformed JSON raises a ConfigError whose ``byte_offset`` is set, so the
    command line can report exactly where the document broke.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}",
            byte_offset=exc.pos,
        ) from exc
    return parse_run_config(data)


def apply_overrides(
    cfg: RunConfig,
    tau: float | None = None,
    rho: float | None = None,
    seed: int | None = None,
    out: str | None = None,
) -> RunConfig:
    """Command-line overrides; only these four scalars are overridable."""
    decode = cfg.decode
    updates = {}
    if tau is not None:
        updates["tau"] = tau
    if rho is not None:
        updates["rho"] = rho
    if seed is not None:
        updates["seed"] = seed
    if updates:
        try:
            decode = dataclasses.replace(decode, **updates)
        except DecodeError as exc:
            field = next(iter(updates))
            raise ConfigError(f"decode.{field}: {exc}") from exc
    changes = {"decode": decode}
    if out is not None:
        changes["output_dir"] = out
    return dataclasses.replace(cfg, **changes)
