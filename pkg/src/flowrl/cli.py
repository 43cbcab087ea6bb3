"""Command line entry point: gen-data, sft, grpo, eval, scale, plot."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

from .config import ExperimentConfig, dump_config, load_config
from .errors import ArtifactIOError, FlowRLError
from .evaluate import DECISIONS, write_csv, write_report
from .flowgen import load_checkpoint, save_checkpoint
from .pipeline import (
    build_dataset,
    load_dataset,
    run_eval,
    run_grpo,
    run_scale,
    run_sft,
    worker_pool,
    write_dataset,
)
from .plotting import plot_log, plot_series

log = logging.getLogger("flowrl")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(out, exc.strerror or "cannot create") from exc
    return out


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ArtifactIOError(p, f"{what} does not exist")
    return p


def write_run_json(out: Path, command: str, cfg: ExperimentConfig | None, args: argparse.Namespace,
                   inputs: dict | None = None) -> None:
    body = {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "git": git_describe(),
        "seeds": {"base": cfg.seed if cfg else None, "grpo": cfg.grpo.seed if cfg else None},
        "workers": args.workers,
        "inputs": inputs or {},
    }
    (out / "run.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(_existing(args.config, "config"), args.preset or [])
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.grpo.seed = args.seed
    return cfg


def cmd_gen_data(args) -> None:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    ds = build_dataset(cfg)
    write_dataset(ds, out)
    (out / "config.yaml").write_text(dump_config(cfg))
    write_run_json(out, "gen-data", cfg, args)
    log.info("wrote %d demos, %s", len(ds.demos), {k: len(v) for k, v in ds.splits.items()})


def cmd_sft(args) -> None:
    cfg = _load_cfg(args)
    ds = load_dataset(cfg, _existing(args.data, "dataset"))
    out = _out_dir(args.out)
    res = run_sft(cfg, ds)
    save_checkpoint(res.params, out / "policy.ckpt")
    with open(out / "sft_loss.jsonl", "w") as fh:
        for i, loss in enumerate(res.losses):
            fh.write(json.dumps({"step": i, "loss": loss}) + "\n")
    write_run_json(out, "sft", cfg, args, {"data": str(args.data)})


def cmd_grpo(args) -> None:
    cfg = _load_cfg(args)
    ds = load_dataset(cfg, _existing(args.data, "dataset"))
    params = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    out = _out_dir(args.out)
    ckpts = out / "checkpoints"
    ckpts.mkdir(exist_ok=True)
    with worker_pool(args.workers) as pool:
        res = run_grpo(cfg, ds, params, out / "train.jsonl", ckpts, pool)
    save_checkpoint(res.params, out / "policy.ckpt")
    with open(out / "timing.jsonl", "w") as fh:
        for row in res.timings:
            fh.write(json.dumps(row) + "\n")
    write_run_json(out, "grpo", cfg, args, {"data": str(args.data), "checkpoint": str(args.checkpoint)})


def cmd_eval(args) -> None:
    cfg = _load_cfg(args)
    ds = load_dataset(cfg, _existing(args.data, "dataset"))
    params = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    out = _out_dir(args.out)
    with worker_pool(args.workers) as pool:
        report = run_eval(cfg, ds, params, args.split, pool)
    write_report(report, out / "report.json", {"split": args.split, "task": cfg.task})
    write_csv(report.per_task, out / "per_task.csv")
    write_run_json(out, "eval", cfg, args, {"data": str(args.data), "checkpoint": str(args.checkpoint)})


def cmd_scale(args) -> None:
    cfg = _load_cfg(args)
    ds = load_dataset(cfg, _existing(args.data, "dataset"))
    params = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    out = _out_dir(args.out)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(cfg.eval.ks)
    with worker_pool(args.workers) as pool:
        res = run_scale(cfg, ds, params, ks, args.split, pool)
    (out / "scale.json").write_text(json.dumps({**res, "decisions": DECISIONS}, indent=2, sort_keys=True) + "\n")
    write_csv(res["per_task"], out / "scale.csv")
    plot_series(res["ks"], {"best reward": res["mean_curve"]}, out / "scale.svg", "K", "mean best reward")
    write_run_json(out, "scale", cfg, args, {"data": str(args.data), "checkpoint": str(args.checkpoint)})


def cmd_plot(args) -> None:
    metrics = args.metric or ["mean_reward"]
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(str(out.parent))
    n = plot_log(_existing(args.log, "log"), out, metrics)
    log.info("plotted %d rows", n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_config=True, **extra):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True)
            p.add_argument("--preset", action="append", help="ablation preset, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1, help="processes for rendering and scoring")
        p.add_argument("--out", required=True)
        for flag, kw in extra.items():
            p.add_argument(f"--{flag}", **kw)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data)
    add("sft", cmd_sft, data={"required": True})
    add("grpo", cmd_grpo, data={"required": True}, checkpoint={"required": True})
    add("eval", cmd_eval, data={"required": True}, checkpoint={"required": True},
        split={"default": "heldout", "choices": ["train", "heldout"]})
    add("scale", cmd_scale, data={"required": True}, checkpoint={"required": True},
        ks={"default": None, "help": "comma-separated K values"},
        split={"default": "heldout", "choices": ["train", "heldout"]})
    add("plot", cmd_plot, needs_config=False, log={"required": True},
        metric={"action": "append", "help": "log field, dotted for nesting; repeatable"})
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FlowRLError as exc:
        print(f"flowrl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
