"""Network cost model for the collaborative decode loop.

Every verification episode crosses the link twice: device tokens and interval
features go up, verified tokens and the resample come back down. This module
prices those crossings for a handful of named link profiles and splits the
resulting wall-clock estimate into compute and communication legs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from .decoder import DecodeTrace

__all__ = [
    "NetworkConfigError",
    "NetworkProfile",
    "PayloadModel",
    "ComputeModel",
    "LatencyReport",
    "t_comm",
    "builtin_profiles",
    "episode_latency",
]


class NetworkConfigError(ValueError):
    """A profile, payload, or compute model failed validation."""


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise NetworkConfigError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class NetworkProfile:
    """A link: sustained bandwidth in megabits/second plus round-trip latency."""

    bandwidth_mbps: float
    rtt_ms: float

    def __post_init__(self):
        object.__setattr__(
            self, "bandwidth_mbps", _require_finite("bandwidth_mbps", self.bandwidth_mbps)
        )
        object.__setattr__(self, "rtt_ms", _require_finite("rtt_ms", self.rtt_ms))
        if self.bandwidth_mbps <= 0.0:
            raise NetworkConfigError("bandwidth_mbps must be positive")
        if self.rtt_ms < 0.0:
            raise NetworkConfigError("rtt_ms must be nonnegative")


@dataclass(frozen=True)
class PayloadModel:
    """Bit counts for one verification episode's wire traffic.

    Defaults assume 32-bit token ids both ways, a 32-bit float per interval
    feature dimension, and a small fixed framing cost per call.
    """

    bits_per_token_up: float = 32.0
    bits_per_token_down: float = 32.0
    bits_per_feature: float = 32.0 * 32
    bits_fixed_per_call: float = 512.0

    def __post_init__(self):
        for name in (
            "bits_per_token_up",
            "bits_per_token_down",
            "bits_per_feature",
            "bits_fixed_per_call",
        ):
            value = _require_finite(name, getattr(self, name))
            if value < 0.0:
                raise NetworkConfigError(f"{name} must be nonnegative")
            object.__setattr__(self, name, value)

    @classmethod
    def for_hidden_dim(cls, d: int, **overrides) -> "PayloadModel":
        """Payload with the feature cost sized to a d-dimensional feature."""
        overrides.setdefault("bits_per_feature", 32.0 * d)
        return cls(**overrides)


@dataclass(frozen=True)
class ComputeModel:
    """Per-invocation compute costs. The device model is small and cheap per
    step; the cloud model is heavier but verifies a whole buffer per step."""

    device_ms_per_step: float = 5.0
    cloud_ms_per_step: float = 40.0

    def __post_init__(self):
        for name in ("device_ms_per_step", "cloud_ms_per_step"):
            value = _require_finite(name, getattr(self, name))
            if value < 0.0:
                raise NetworkConfigError(f"{name} must be nonnegative")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class LatencyReport:
    """Wall-clock decomposition of one decoded sequence on one link."""

    device_ms: float
    cloud_ms: float
    comm_up_ms: float
    comm_down_ms: float

    @property
    def total_ms(self) -> float:
        return self.device_ms + self.cloud_ms + self.comm_up_ms + self.comm_down_ms

    @property
    def comm_ms(self) -> float:
        return self.comm_up_ms + self.comm_down_ms

    @property
    def comm_ratio(self) -> float:
        total = self.total_ms
        return self.comm_ms / total if total > 0.0 else 0.0


def t_comm(profile: NetworkProfile, data_bits: float) -> float:
    """Milliseconds to move data_bits across the link: RTT plus serialization."""
    data_bits = float(data_bits)
    if data_bits < 0.0 or not math.isfinite(data_bits):
        raise NetworkConfigError(f"data_bits must be nonnegative, got {data_bits!r}")
    return profile.rtt_ms + 1000.0 * data_bits / (profile.bandwidth_mbps * 1e6)


def builtin_profiles() -> dict[str, NetworkProfile]:
    """The three named links used throughout the reports."""
    return {
        "5G": NetworkProfile(bandwidth_mbps=300.00, rtt_ms=10.00),
        "4G": NetworkProfile(bandwidth_mbps=20.00, rtt_ms=50.00),
        "WiFi": NetworkProfile(bandwidth_mbps=100.00, rtt_ms=20.00),
    }


def episode_latency(
    trace: "DecodeTrace",
    profile: NetworkProfile,
    payload: PayloadModel | None = None,
    compute: ComputeModel | None = None,
) -> LatencyReport:
    """Price a decode trace on one link.

    Each verification episode pays one uplink and one downlink crossing; the
    cloud prefix is part of the decode session and carries no per-token
    traffic. Compute legs are step counts times per-step costs.
    """
    payload = payload if payload is not None else PayloadModel()
    compute = compute if compute is not None else ComputeModel()
    comm_up = 0.0
    comm_down = 0.0
    for episode in trace.episodes:
        up_bits = payload.bits_fixed_per_call + episode.buffered * (
            payload.bits_per_token_up + payload.bits_per_feature
        )
        down_bits = payload.bits_fixed_per_call + episode.emitted * payload.bits_per_token_down
        comm_up += t_comm(profile, up_bits)
        comm_down += t_comm(profile, down_bits)
    return LatencyReport(
        device_ms=trace.device_steps * compute.device_ms_per_step,
        cloud_ms=trace.cloud_steps * compute.cloud_ms_per_step,
        comm_up_ms=comm_up,
        comm_down_ms=comm_down,
    )
