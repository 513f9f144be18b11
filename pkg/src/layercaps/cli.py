"""Layer aggregation experiments from the command line.

Exit codes: 0 ok, 2 configuration error, 3 training divergence, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, diagnostics, plotting
from . import config as config_mod
from .aggregation import ConfigError
from .config import RunConfig
from .gradcheck import check_model
from .model import PAD, ToyTransformer
from .tasks import TaskData, pack
from .train import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4
GRADCHECK_MAX_PARAMS = 50_000
SWEEP_DEFAULTS = {"N": "1,2,4,8,16", "T": "1,2,3,4", "placement": "enc,dec,both,none",
                  "capsule_input_mode": "per-layer,all-layers",
                  "strategy": "none,linear,dynamic-ffn,dynamic-routing,em-routing"}
SWEEP_HEADER = ["param", "value", "seed", "status", "token_accuracy", "loss", "param_count", "message"]

log = logging.getLogger("layercaps")


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("LCAP_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(cfg: RunConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.load_checkpoint:
        return Path(cfg.load_checkpoint)
    return Path(cfg.output_dir) / cfg.checkpoint


def _restore(cfg: RunConfig, path: Path) -> ToyTransformer:
    model = ToyTransformer(cfg.model, seed=cfg.seed)
    try:
        checkpoint.load(path, model)
    except OSError as exc:
        raise ConfigError([f"checkpoint {str(path)!r}: {exc.strerror or exc}"]) from exc
    except checkpoint.CheckpointError as exc:
        raise ConfigError([f"checkpoint {str(path)!r}: {exc}"]) from exc
    return model


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    try:
        result = train(cfg.task, cfg.model, cfg.train, cfg.steps, cfg.seed, metrics_path=metrics, log=log.info)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    checkpoint.save(out / cfg.checkpoint, result.model)
    config_mod.dump(cfg, out / "config.json")
    summary = {"final_loss": result.final["loss"], "final_accuracy": result.final["token_accuracy"],
               "param_count": result.model.num_parameters(), "steps": cfg.steps,
               "steps_per_sec": cfg.steps / result.seconds if result.seconds > 0 else 0.0,
               "wall_seconds": result.seconds}
    _write_json(out / "summary.json", summary)
    plotting.training_curve(result.history, out / "training.png")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _restore(cfg, _checkpoint_path(cfg, args.checkpoint))
    data = TaskData(cfg.task, cfg.model.vocab_size, cfg.train.min_len, cfg.train.max_len,
                    cfg.train.eval_size, cfg.seed)
    metrics = evaluate(model, data.eval_batches())
    payload = {"loss": metrics["loss"], "token_accuracy": metrics["token_accuracy"],
               "examples": len(data.held_out)}
    _write_json(_out_dir(cfg) / "eval.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def _parse_value(param: str, text: str):
    return int(text) if param in ("N", "T") else text


def _sweep_run(job: tuple[dict, str, str, int]) -> dict:
    raw, param, value, seed = job
    row = {"param": param, "value": value, "seed": seed, "status": "ok", "token_accuracy": "",
           "loss": "", "param_count": "", "message": ""}
    try:
        cfg = config_mod.from_dict(raw).replace(seed=seed)
        if param == "strategy":
            cfg.model.aggregator.strategy = value
        else:
            cfg = cfg.replace(**{param: _parse_value(param, value)})
        cfg.validate()
        result = train(cfg.task, cfg.model, cfg.train, cfg.steps, seed)
    except ConfigError as exc:
        row.update(status="config_error", message="; ".join(exc.errors))
    except ValueError as exc:
        row.update(status="config_error", message=str(exc))
    except TrainingDiverged as exc:
        row.update(status="diverged", message=str(exc))
    else:
        row.update(token_accuracy=repr(float(result.final["token_accuracy"])),
                   loss=repr(float(result.final["loss"])), param_count=result.model.num_parameters())
    return row


def run_sweep(cfg: RunConfig, param: str, values: list[str], seeds: list[int], jobs: int = 1) -> list[dict]:
    """One training run per (value, seed); failures become rows instead of aborting the sweep."""
    raw = cfg.to_dict()
    work = [(raw, param, v, s) for v in values for s in seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            return list(pool.map(_sweep_run, work))
    rows = []
    for job in work:
        rows.append(_sweep_run(job))
        r = rows[-1]
        log.info("sweep %s=%s seed=%s: %s %s", param, r["value"], r["seed"], r["status"], r["token_accuracy"])
    return rows


def write_sweep(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        writer.writerows(rows)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = [v.strip() for v in (args.values or SWEEP_DEFAULTS[args.param]).split(",") if v.strip()]
    if args.param in ("N", "T"):
        bad = [v for v in values if not v.lstrip("-").isdigit()]
        if bad:
            log.error("sweep values for %s must be integers: %s", args.param, bad)
            return EXIT_CONFIG
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    jobs = min(args.jobs, thread_cap())
    rows = run_sweep(cfg, args.param, values, seeds, jobs)
    out = _out_dir(cfg)
    write_sweep(out / f"sweep_{args.param}.csv", rows)
    plotting.sweep(rows, args.param, out / f"sweep_{args.param}.png")
    for r in rows:
        print(f"{r['param']}={r['value']} seed={r['seed']} {r['status']} {r['token_accuracy']} {r['message']}")
    return EXIT_OK


def gradcheck_batch(cfg: RunConfig):
    data = TaskData(cfg.task, cfg.model.vocab_size, cfg.train.min_len, cfg.train.max_len, 1, cfg.seed)
    sources = [data.held_out[0], tuple(reversed(data.held_out[0]))[:max(1, len(data.held_out[0]) - 1)]]
    return pack(cfg.task, sources, cfg.model.vocab_size)


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    model = ToyTransformer(cfg.model, seed=cfg.seed)
    count = model.num_parameters()
    if count >= GRADCHECK_MAX_PARAMS:
        log.error("gradcheck needs a model under %d parameters, this one has %d", GRADCHECK_MAX_PARAMS, count)
        return EXIT_CONFIG
    report = check_model(model, gradcheck_batch(cfg), step=args.step)
    modules = report.by_module()
    out = _out_dir(cfg)
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "relative_error"])
        for name in sorted(report.errors):
            writer.writerow([name, f"{report.errors[name]:.3e}"])
    for name in sorted(modules):
        print(f"{name:24s} {modules[name]:.3e}")
    worst, err = report.worst
    if not report.passed(args.tolerance):
        print(f"FAIL worst parameter {worst} relative error {err:.3e} >= {args.tolerance:g}")
        return EXIT_GRADCHECK
    print(f"PASS max relative error {err:.3e} ({worst}) < {args.tolerance:g}")
    return EXIT_OK


def parse_tokens(text: str) -> np.ndarray:
    return np.array([[int(t) for t in text.replace(",", " ").split()]], dtype=np.int64)


def cmd_route_viz(args) -> int:
    cfg = _load_config(args)
    if not cfg.aggregator.is_routing:
        log.error("route-viz needs a routing strategy, config uses %r", cfg.aggregator.strategy)
        return EXIT_CONFIG
    side = args.side
    enabled = cfg.model.aggregate_encoder if side == "encoder" else cfg.model.aggregate_decoder
    if not enabled:
        log.error("the %s side is not aggregated in this config", side)
        return EXIT_CONFIG
    model = _restore(cfg, _checkpoint_path(cfg, args.checkpoint))
    if args.tokens:
        try:
            src = parse_tokens(args.tokens)
        except ValueError:
            raise ConfigError([f"--tokens: expected integers, got {args.tokens!r}"])
    else:
        data = TaskData(cfg.task, cfg.model.vocab_size, cfg.train.min_len, cfg.train.max_len, 1, cfg.seed)
        src = np.array([data.held_out[0]], dtype=np.int64)
    if src.size == 0 or src.min() < 0 or src.max() >= cfg.model.vocab_size:
        raise ConfigError([f"--tokens: ids must lie in [0, {cfg.model.vocab_size})"])
    hyp = model.greedy_decode(src)
    batch = pack(cfg.task, [tuple(int(t) for t in src[0] if t != PAD)], cfg.model.vocab_size)
    model.forward(batch)
    state = model.routing_states()[side]
    mask = batch.src_mask if side == "encoder" else batch.tgt_mask
    snaps = diagnostics.snapshots(state, mask, keep_positions=args.per_position)
    out = _out_dir(cfg)
    for snap in snaps:
        diagnostics.export_heatmap(snap, out, per_position=args.per_position)
        plotting.heatmap(snap.C, out / f"agreement_iter{snap.iteration}.png", f"iteration {snap.iteration}")
    rows = diagnostics.iteration_metrics(snaps)
    diagnostics.write_iteration_metrics(out / "agreement_metrics.csv", rows)
    plotting.iteration_curves(rows, out / "agreement_metrics.png")
    print("source", " ".join(map(str, src[0])), "| greedy", " ".join(map(str, hyp[0])))
    for r in rows:
        print(f"iteration {r['iteration']}: entropy {r['entropy']:.4f} diversity {r['diversity']:.4f}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the configured output directory")

    parser = argparse.ArgumentParser(prog="lcap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one model").set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out set")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="train once per value of one parameter")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("--values", help="comma-separated values (a per-parameter default otherwise)")
    p.add_argument("--seeds", help="comma-separated seeds (the config seed otherwise)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs, capped by LCAP_THREADS")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("route-viz", parents=[common], help="export agreement heatmaps of one sentence")
    p.add_argument("--checkpoint")
    p.add_argument("--tokens", help="source token ids, e.g. '3 4 5 6'")
    p.add_argument("--side", choices=["encoder", "decoder"], default="encoder")
    p.add_argument("--per-position", action="store_true", help="also write one CSV per position")
    p.set_defaults(func=cmd_route_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
