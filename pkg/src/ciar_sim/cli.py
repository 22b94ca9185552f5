"""Command-line experiment runner.

One JSON config drives everything: single simulations with all decode
policies, threshold/prefix sweeps on a worker pool, network-latency reports
across the builtin profiles, interval-head training, and the property-oracle
suite. Outputs are CSV/JSONL files plus rendered figures in the output
directory; exit code 0 means every requested piece of work succeeded.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_run_config,
    parse_run_config,
)
from .decoder import (
    DecodeConfig,
    run_baseline_cloud,
    run_baseline_device,
    run_ciar,
    run_fixed_split,
    run_uniform_verification,
)
from .netsim import builtin_profiles, episode_latency
from .properties import format_results, run_property_suite, suite_passed
from .report import (
    latency_row,
    metrics_row,
    render_latency_figure,
    render_loss_figure,
    render_sweep_figure,
    render_trace_figure,
    save_latency_csv,
    save_loss_csv,
    save_metrics_csv,
    save_trace_jsonl,
)
from .toy_models import (
    InterHeadParams,
    ModelParams,
    SceneSpec,
    build_analytic_head,
    generate_scene,
)
from .training import (
    TrainingDivergedError,
    TrainingError,
    harvest_batches,
    load_inter_head,
    mean_center_kl,
    save_inter_head,
    train,
)

__all__ = ["main", "build_parser"]

JOBS_ENV_VAR = "CIAR_SIM_JOBS"
DEFAULT_TRAINING_PAIRS = 4096


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_run_config(args.config)
    else:
        cfg = parse_run_config({})
    return apply_overrides(
        cfg,
        tau=getattr(args, "tau", None),
        rho=getattr(args, "rho", None),
        seed=getattr(args, "seed", None),
        out=getattr(args, "out", None),
    )


def _ensure_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _build_models(cfg: RunConfig):
    params = ModelParams.generate(
        n=cfg.scene.n, d=cfg.model_d, seed=cfg.model_seed, shared_weights=cfg.shared_weights
    )
    if cfg.head_path is not None:
        head = load_inter_head(cfg.head_path)
        if head.n != params.n or head.d != params.d:
            raise ConfigError(
                f"head_path: head is ({head.n}, {head.d}) but the model needs "
                f"({params.n}, {params.d})"
            )
    else:
        head = build_analytic_head(params)
    return params, head


def _run_policy(policy: str, cfg: RunConfig, scene, params, head):
    decode = cfg.decode
    if policy == "ciar":
        return run_ciar(decode, scene, cfg.scene, params, head, payload=cfg.payload)
    if policy == "uniform":
        return run_uniform_verification(
            decode, scene, cfg.scene, params, head, payload=cfg.payload
        )
    if policy == "base_cloud":
        return run_baseline_cloud(decode, scene, cfg.scene, params)
    if policy == "base_device":
        return run_baseline_device(decode, scene, cfg.scene, params)
    if policy == "fixed_split":
        return run_fixed_split(decode, cfg.split, scene, cfg.scene, params)
    raise ConfigError(f"policies: unknown policy {policy!r}")


def _print_summary(rows_with_latency) -> None:
    print(f"{'policy':<14}{'cloud_call_rate':>16}{'episodes':>10}{'steps':>8}{'total_ms':>12}")
    for row, total_ms in rows_with_latency:
        print(
            f"{row['policy']:<14}{row['cloud_call_rate']:>16.4f}"
            f"{row['episodes']:>10}{row['steps']:>8}{total_ms:>12.1f}"
        )


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(cfg)
    scene = generate_scene(cfg.scene)
    params, head = _build_models(cfg)

    rows, summary = [], []
    for policy in cfg.policies:
        _, trace, metrics = _run_policy(policy, cfg, scene, params, head)
        row = metrics_row(cfg.decode.seed, policy, cfg.decode, metrics)
        rows.append(row)
        latency = episode_latency(trace, cfg.network, cfg.payload, cfg.compute)
        summary.append((row, latency.total_ms))
        save_trace_jsonl(os.path.join(out, f"trace_{policy}.jsonl"), trace)
        if any(r.uncertainty is not None for r in trace.records):
            render_trace_figure(
                trace, cfg.scene, os.path.join(out, f"fig_trace_{policy}.png")
            )
    save_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    _print_summary(summary)
    return 0


def _sweep_cell(cell) -> dict:
    """One sweep cell, process-pool friendly: rebuilds its world from plain
    picklable pieces and returns a metrics-CSV row."""
    scene_spec, decode_cfg, model_d, model_seed, shared, head_blob, payload = cell
    scene = generate_scene(scene_spec)
    params = ModelParams.generate(
        n=scene_spec.n, d=model_d, seed=model_seed, shared_weights=shared
    )
    head = head_blob if isinstance(head_blob, InterHeadParams) else build_analytic_head(params)
    _, _, metrics = run_ciar(decode_cfg, scene, scene_spec, params, head, payload=payload)
    return metrics_row(decode_cfg.seed, "ciar", decode_cfg, metrics)


def _resolve_jobs(args) -> int:
    if getattr(args, "jobs", None):
        jobs = args.jobs
    else:
        raw = os.environ.get(JOBS_ENV_VAR)
        if raw is None:
            return 1
        try:
            jobs = int(raw)
        except ValueError:
            raise ConfigError(f"{JOBS_ENV_VAR}: must be a positive integer, got {raw!r}")
    if jobs < 1:
        raise ConfigError(f"jobs: must be a positive integer, got {jobs}")
    return jobs


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if cfg.sweep is None:
        raise ConfigError("sweep: block required for the sweep command")
    out = _ensure_out(cfg)
    jobs = _resolve_jobs(args)
    params, head = _build_models(cfg)
    head_blob = head if cfg.head_path is not None else None

    cells = []
    # Deterministic ordering by (tau, rho, K, seed); rows come back in the
    # same order regardless of worker count.
    for tau in sorted(cfg.sweep.tau):
        for rho in sorted(cfg.sweep.rho):
            for k in sorted(cfg.sweep.k):
                for seed in sorted(cfg.sweep.seed):
                    scene_spec = replace(cfg.scene, seed=seed)
                    decode_cfg = replace(cfg.decode, tau=tau, rho=rho, K=k, seed=seed)
                    cells.append(
                        (
                            scene_spec,
                            decode_cfg,
                            cfg.model_d,
                            cfg.model_seed,
                            cfg.shared_weights,
                            head_blob,
                            cfg.payload,
                        )
                    )

    if jobs == 1:
        rows = [_sweep_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))

    save_metrics_csv(os.path.join(out, "sweep.csv"), rows)
    render_sweep_figure(rows, os.path.join(out, "fig_sweep.png"))

    by_tau: dict[float, list[float]] = {}
    for row in rows:
        by_tau.setdefault(row["tau"], []).append(row["cloud_call_rate"])
    print(f"{'tau':>8}{'mean_cloud_call_rate':>22}{'cells':>7}")
    for tau in sorted(by_tau):
        vals = by_tau[tau]
        print(f"{tau:>8.3g}{sum(vals) / len(vals):>22.4f}{len(vals):>7}")
    return 0


def cmd_netsim(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(cfg)
    params, head = _build_models(cfg)
    seeds = sorted(cfg.sweep.seed) if cfg.sweep is not None else [cfg.decode.seed]

    rows = []
    for seed in seeds:
        scene_spec = replace(cfg.scene, seed=seed)
        decode_cfg = replace(cfg.decode, seed=seed)
        scene = generate_scene(scene_spec)
        for policy, runner in (("ciar", run_ciar), ("uniform", run_uniform_verification)):
            _, trace, _ = runner(
                decode_cfg, scene, scene_spec, params, head, payload=cfg.payload
            )
            for name, profile in builtin_profiles().items():
                report = episode_latency(trace, profile, cfg.payload, cfg.compute)
                rows.append(latency_row(policy, seed, name, report))

    save_latency_csv(os.path.join(out, "latency.csv"), rows)
    render_latency_figure(rows, os.path.join(out, "fig_latency.png"))
    print(f"{'policy':<10}{'seed':>6}{'network':>9}{'total_ms':>12}{'comm_ratio':>12}")
    for row in rows:
        print(
            f"{row['policy']:<10}{row['seed']:>6}{row['network']:>9}"
            f"{row['total_ms']:>12.1f}{row['comm_ratio']:>12.4f}"
        )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.training is None:
        raise ConfigError("training: block required for the train command")
    out = _ensure_out(cfg)
    params, _ = _build_models(cfg)

    num_scenes = max(1, math.ceil(DEFAULT_TRAINING_PAIRS / cfg.scene.seq_len))
    dataset = harvest_batches(
        cfg.scene, params, scene_seeds=range(num_scenes), batch_size=cfg.training.batch_size
    )
    head = InterHeadParams.init_random(cfg.scene.n, cfg.model_d, seed=cfg.training.seed)
    kl_before = mean_center_kl(head, dataset)
    try:
        trained, history = train(head, dataset, cfg.training)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    kl_after = mean_center_kl(trained, dataset)

    save_inter_head(os.path.join(out, "inter_head.bin"), trained)
    save_loss_csv(os.path.join(out, "loss.csv"), history)
    if history:
        render_loss_figure(history, os.path.join(out, "fig_loss.png"))
    print(f"pairs {sum(b.size for b in dataset)}, steps {len(history)}")
    print(f"mean center KL: initial {kl_before:.6f}, final {kl_after:.6f}")
    return 0


def cmd_verify(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise ConfigError(f"sizes: expected comma-separated integers, got {args.sizes!r}")
    try:
        results = run_property_suite(seed=args.seed or 0, sizes=sizes)
    except ValueError as exc:
        raise ConfigError(f"sizes: {exc}")
    print(format_results(results))
    return 0 if suite_passed(results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ciar-sim",
        description="Cloud-device collaborative decoding simulator",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="override the decode seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--jobs", type=int, help=f"worker count (env {JOBS_ENV_VAR})")
    common.add_argument("--tau", type=float, help="override the gate threshold")
    common.add_argument("--rho", type=float, help="override the prefix rate")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "simulate", parents=[common], help="run every configured decode policy once"
    ).set_defaults(func=cmd_simulate)
    sub.add_parser(
        "sweep", parents=[common], help="cross-product sweep over tau/rho/K/seed grids"
    ).set_defaults(func=cmd_sweep)
    sub.add_parser(
        "netsim", parents=[common], help="latency report across builtin network profiles"
    ).set_defaults(func=cmd_netsim)
    sub.add_parser(
        "train", parents=[common], help="fit the interval head to the cloud"
    ).set_defaults(func=cmd_train)
    verify = sub.add_parser(
        "verify", parents=[common], help="run the property-oracle suite"
    )
    verify.add_argument(
        "--sizes", default="2,64,4096", help="comma-separated vocabulary sizes to exercise"
    )
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
