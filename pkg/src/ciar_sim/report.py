"""File outputs for the experiment runner.

Delimited formats are the interface for downstream analysis: metrics CSV,
trace JSONL, latency CSV, and training-loss CSV, all with pinned headers and
newline discipline so a fixed (config, seed, platform) triple reproduces the
bytes. The report path also renders summary figures next to the delimited
files; plots are a convenience view, never the data of record.
"""

from __future__ import annotations

import csv
import json
from typing import Iterable, Mapping, Sequence

import numpy as np

from .decoder import DecodeTrace
from .netsim import LatencyReport
from .toy_models import SceneSpec
from .training import LossBreakdown

__all__ = [
    "METRICS_HEADER",
    "LATENCY_HEADER",
    "LOSS_HEADER",
    "metrics_row",
    "latency_row",
    "save_metrics_csv",
    "save_trace_jsonl",
    "save_latency_csv",
    "save_loss_csv",
    "render_sweep_figure",
    "render_latency_figure",
    "render_loss_figure",
    "render_trace_figure",
]

METRICS_HEADER = (
    "seed", "policy", "tau", "rho", "K",
    "cloud_call_rate", "episodes", "steps", "device_accepts",
)
# Identity columns first, then the declared latency schema.
LATENCY_HEADER = (
    "policy", "seed",
    "network", "device_ms", "cloud_ms", "comm_ms", "total_ms", "comm_ratio",
)
LOSS_HEADER = ("step", "total", "l_center", "l_upper", "l_lower", "l_dro", "l_kl")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row[key]) for key in header])


def metrics_row(seed: int, policy: str, decode_cfg, metrics) -> dict:
    return {
        "seed": seed,
        "policy": policy,
        "tau": float(decode_cfg.tau),
        "rho": float(decode_cfg.rho),
        "K": decode_cfg.K,
        "cloud_call_rate": float(metrics.cloud_call_rate),
        "episodes": metrics.episodes,
        "steps": metrics.steps,
        "device_accepts": metrics.device_accepts,
    }


def latency_row(policy: str, seed: int, network: str, report: LatencyReport) -> dict:
    return {
        "policy": policy,
        "seed": seed,
        "network": network,
        "device_ms": float(report.device_ms),
        "cloud_ms": float(report.cloud_ms),
        "comm_ms": float(report.comm_ms),
        "total_ms": float(report.total_ms),
        "comm_ratio": float(report.comm_ratio),
    }


def save_metrics_csv(path, rows: Iterable[Mapping]) -> None:
    _write_csv(path, METRICS_HEADER, rows)


def save_latency_csv(path, rows: Iterable[Mapping]) -> None:
    _write_csv(path, LATENCY_HEADER, rows)


def save_loss_csv(path, history: Sequence[LossBreakdown]) -> None:
    rows = [
        {
            "step": step,
            "total": b.total,
            "l_center": b.l_center,
            "l_upper": b.l_upper,
            "l_lower": b.l_lower,
            "l_dro": b.l_dro,
            "l_kl": b.l_kl,
        }
        for step, b in enumerate(history)
    ]
    _write_csv(path, LOSS_HEADER, rows)


def save_trace_jsonl(path, trace: DecodeTrace) -> None:
    """One JSON object per position, field names exactly as in the trace."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for record in trace.records:
            fh.write(json.dumps(record.to_json_dict()))
            fh.write("\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    _pyplot().close(fig)


def render_sweep_figure(rows: Sequence[Mapping], path) -> None:
    """Mean cloud-call rate against the gate threshold, one line per (rho, K)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    groups: dict[tuple, dict[float, list[float]]] = {}
    for row in rows:
        key = (float(row["rho"]), int(row["K"]))
        groups.setdefault(key, {}).setdefault(float(row["tau"]), []).append(
            float(row["cloud_call_rate"])
        )
    for (rho, k), by_tau in sorted(groups.items()):
        taus = sorted(by_tau)
        means = [float(np.mean(by_tau[t])) for t in taus]
        ax.plot(taus, means, marker="o", label=f"rho={rho:g}, K={k}")
    ax.set_xlabel("gate threshold tau")
    ax.set_ylabel("mean cloud call rate")
    ax.set_title("Cloud involvement vs. gate threshold")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def render_latency_figure(rows: Sequence[Mapping], path) -> None:
    """Communication share of total latency, grouped by network per policy."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    policies = sorted({row["policy"] for row in rows})
    networks = sorted({row["network"] for row in rows})
    width = 0.8 / max(len(policies), 1)
    base = np.arange(len(networks), dtype=float)
    for i, policy in enumerate(policies):
        means = []
        for network in networks:
            vals = [
                float(r["comm_ratio"])
                for r in rows
                if r["policy"] == policy and r["network"] == network
            ]
            means.append(float(np.mean(vals)) if vals else 0.0)
        ax.bar(base + i * width, means, width=width, label=policy)
    ax.set_xticks(base + width * (len(policies) - 1) / 2)
    ax.set_xticklabels(networks)
    ax.set_ylabel("communication share of total latency")
    ax.set_title("Where the time goes, by network")
    ax.legend(fontsize=8)
    _save(fig, path)


def render_loss_figure(history: Sequence[LossBreakdown], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    steps = np.arange(len(history))
    ax.plot(steps, [b.total for b in history], label="total", linewidth=1.5)
    ax.plot(steps, [b.l_center for b in history], label="center", alpha=0.7)
    ax.plot(steps, [b.l_upper for b in history], label="upper", alpha=0.7)
    ax.plot(steps, [b.l_lower for b in history], label="lower", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


_ORIGIN_LEVELS = ("prefix", "device", "cloud_verified", "cloud_resampled")


def render_trace_figure(trace: DecodeTrace, spec: SceneSpec, path) -> None:
    """Origin map and gate-score map over the scene grid, side by side."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    origin_idx = np.array(
        [_ORIGIN_LEVELS.index(r.origin) for r in trace.records], dtype=float
    ).reshape(spec.h, spec.w)
    im0 = axes[0].imshow(origin_idx, cmap="viridis", vmin=0, vmax=len(_ORIGIN_LEVELS) - 1)
    axes[0].set_title("token origin")
    cbar = fig.colorbar(im0, ax=axes[0], ticks=range(len(_ORIGIN_LEVELS)), shrink=0.8)
    cbar.ax.set_yticklabels(_ORIGIN_LEVELS, fontsize=7)
    scores = np.array(
        [r.uncertainty if r.uncertainty is not None else np.nan for r in trace.records]
    ).reshape(spec.h, spec.w)
    im1 = axes[1].imshow(scores, cmap="magma")
    axes[1].set_title("gate score")
    fig.colorbar(im1, ax=axes[1], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, path)
