"""Command-line experiment runner: multi-seed training, aggregation and report files."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .engine import RunConfig, run
from .metrics import aggregate
from .model import MethodKind
from .objective import MCConfig

log = logging.getLogger("vmtl")

SCHEMA = "vmtl-metrics v1"
HISTORY_FIELDS = ["seed", "iteration", "lr", "tau", "kl_weight", "nll", "kl_z", "kl_w", "total"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmtl", description="Train and evaluate multi-task learners over several seeds.")
    p.add_argument("--config", help="JSON file of RunConfig fields; flags given explicitly override it")
    p.add_argument("--method", type=_method, help=f"one of {', '.join(m.value for m in MethodKind)}")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="vmtl-features v1 file")
    src.add_argument("--synthetic", help="preset name or JSON spec file")
    p.add_argument("--split", type=float, help="fraction of each (task, class) cell used for training")
    p.add_argument("--seeds", type=int, default=None, help="number of independent runs (default 5)")
    p.add_argument("--seed", type=int, default=None, help="first seed; runs use seed, seed+1, ...")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc", type=int, nargs=2, metavar=("L", "M"))
    p.add_argument("--batch-per-class", type=int)
    p.add_argument("--tie-weights", action="store_true", default=None)
    p.add_argument("--hidden", type=int)
    p.add_argument("--z-dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--deterministic-z", action="store_true", help="ablation: point-estimate representations")
    p.add_argument("--deterministic-w", action="store_true", help="ablation: point-estimate classifiers")
    p.add_argument("--out", default="vmtl_out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _method(value: str) -> MethodKind:
    try:
        return MethodKind.parse(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def config_from_args(args: argparse.Namespace) -> tuple[RunConfig, list[int]]:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    n_seeds = args.seeds if args.seeds is not None else base.pop("seeds", 5)
    base.pop("seeds", None)
    overrides = {
        "method": args.method,
        "dataset": args.dataset,
        "split": args.split,
        "seed": args.seed,
        "iters": args.iters,
        "lr": args.lr,
        "batch_per_class": args.batch_per_class,
        "tie_weights": args.tie_weights,
        "hidden": args.hidden,
        "z_dim": args.z_dim,
        "dropout": args.dropout,
    }
    if args.synthetic is not None:
        overrides["synthetic"] = args.synthetic
    if args.dataset is not None:
        overrides["synthetic"] = None
    if args.mc is not None:
        overrides["mc"] = MCConfig(*args.mc)
    if args.deterministic_z:
        overrides["z_variational"] = False
    if args.deterministic_w:
        overrides["w_variational"] = False
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["out_dir"] = args.out
    base.setdefault("method", MethodKind.VMTL)
    cfg = RunConfig(**base)
    if n_seeds < 1:
        raise ValueError("--seeds must be at least 1")
    return cfg, [cfg.seed + i for i in range(n_seeds)]


def _run_seed(cfg: RunConfig) -> dict:
    res = run(cfg)
    m = dict(res.metrics)
    m["seed"] = cfg.seed
    m["final_loss"] = res.history[-1]["total"]
    return {"metrics": m, "history": res.history}


def _workers(n_seeds: int) -> int:
    n = min(n_seeds, os.cpu_count() or 1)
    cap = os.environ.get("VMTL_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_seeds(cfg: RunConfig, seeds: list[int]) -> list[dict]:
    configs = [replace(cfg, seed=s) for s in seeds]
    workers = _workers(len(configs))
    if workers == 1:
        return [_run_seed(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed, configs))


# ---------------------------------------------------------------------------
# report assembly


def _matrix(a) -> list | None:
    if a is None:
        return None
    return [[None if math.isnan(v) else float(v) for v in row] for row in np.asarray(a)]


def _summary(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if len(vals) != len(values) or not vals:
        return {"mean": None, "ci_half_width": None}
    if len(vals) == 1:
        return {"mean": float(vals[0]), "ci_half_width": None}
    mean, half = aggregate(vals)
    return {"mean": mean, "ci_half_width": half}


def build_report(cfg: RunConfig, results: list[dict]) -> dict:
    per_seed = []
    for r in results:
        m = r["metrics"]
        per_seed.append(
            {
                "seed": m["seed"],
                "per_task": [float(v) for v in m["per_task"]],
                "average": float(m["average"]),
                "entropy_ratio": m["entropy_ratio"],
                "final_loss": float(m["final_loss"]),
                "alpha": _matrix(m["alpha"]),
                "beta": _matrix(m["beta"]),
            }
        )
    T = len(per_seed[0]["per_task"])
    tasks = [_summary([s["per_task"][t] for s in per_seed]) for t in range(T)]

    def mean_matrix(key):
        if per_seed[0][key] is None:
            return None
        stack = np.array([[[np.nan if v is None else v for v in row] for row in s[key]] for s in per_seed])
        return _matrix(stack.mean(axis=0))

    config = cfg.to_dict()
    config.pop("seed")
    return {
        "schema": SCHEMA,
        "method": cfg.method.value,
        "metric": results[0]["metrics"]["metric"],
        "seeds": [s["seed"] for s in per_seed],
        "per_task": {
            "mean": [t["mean"] for t in tasks],
            "ci_half_width": [t["ci_half_width"] for t in tasks],
        },
        "average": _summary([s["average"] for s in per_seed]),
        "entropy_ratio": _summary([s["entropy_ratio"] for s in per_seed]),
        "alpha": mean_matrix("alpha"),
        "beta": mean_matrix("beta"),
        "per_seed": per_seed,
        "config": config,
    }


def _fmt(v) -> str:
    return "null" if v is None else repr(v)


def render_report(report: dict) -> str:
    lines = [
        f"method: {report['method']}",
        f"metric: {report['metric']}",
        f"seeds: {' '.join(map(str, report['seeds']))}",
        f"average: {_fmt(report['average']['mean'])} +/- {_fmt(report['average']['ci_half_width'])}",
    ]
    pt = report["per_task"]
    for t, (m, h) in enumerate(zip(pt["mean"], pt["ci_half_width"])):
        lines.append(f"task {t}: {_fmt(m)} +/- {_fmt(h)}")
    er = report["entropy_ratio"]
    lines.append(f"entropy_ratio: {_fmt(er['mean'])} +/- {_fmt(er['ci_half_width'])}")
    for s in report["per_seed"]:
        lines.append(f"seed {s['seed']}: average {_fmt(s['average'])} final_loss {_fmt(s['final_loss'])}")
    return "\n".join(lines) + "\n"


def export_mixing_weights(state, path=None) -> str:
    """CSV of the expected alpha and beta matrices of a trained state.

    One row per (matrix, task); column ``to_j`` is the weight toward task j,
    left blank on the diagonal. Written to ``path`` if given.
    """
    model = state.model
    if model.mix_alpha is None:
        raise ValueError(f"method {model.config.method.value} has no mixing weights")
    rows = mixing_rows(model.config.T, state.config.seed, model.mix_alpha.expected(), model.mix_beta.expected())
    text = _csv_text(mixing_header(model.config.T), rows)
    if path is not None:
        Path(path).write_text(text)
    return text


def mixing_header(T: int) -> list[str]:
    return ["seed", "matrix", "task"] + [f"to_{j}" for j in range(T)]


def mixing_rows(T: int, seed: int, alpha, beta) -> list[list]:
    rows = []
    for name, mat in (("alpha", alpha), ("beta", beta)):
        mat = np.asarray(mat, dtype=np.float64)
        for t in range(T):
            rows.append([seed, name, t] + ["" if t == j else repr(float(mat[t, j])) for j in range(T)])
    return rows


def _csv_text(header, rows) -> str:
    from io import StringIO

    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_outputs(out: Path, report: dict, results: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    hist_rows = []
    for r in results:
        seed = r["metrics"]["seed"]
        for h in r["history"]:
            hist_rows.append([seed] + [repr(h[k]) if k != "iteration" else h[k] for k in HISTORY_FIELDS[1:]])
    (out / "loss_history.csv").write_text(_csv_text(HISTORY_FIELDS, hist_rows))
    T = len(report["per_task"]["mean"])
    mix_rows = []
    for s in report["per_seed"]:
        if s["alpha"] is not None:
            alpha = np.array([[np.nan if v is None else v for v in row] for row in s["alpha"]])
            beta = np.array([[np.nan if v is None else v for v in row] for row in s["beta"]])
            mix_rows.extend(mixing_rows(T, s["seed"], alpha, beta))
    (out / "mixing_weights.csv").write_text(_csv_text(mixing_header(T), mix_rows))
    (out / "report.txt").write_text(render_report(report))


def run_experiment(args: argparse.Namespace) -> dict:
    cfg, seeds = config_from_args(args)
    results = run_seeds(cfg, seeds)
    report = build_report(cfg, results)
    write_outputs(Path(args.out), report, results)
    return report


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg_check = config_from_args(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as e:
        parser.print_usage(sys.stderr)
        print(f"vmtl: error: {e}", file=sys.stderr)
        return 2
    del cfg_check
    try:
        report = run_experiment(args)
    except Exception as e:  # noqa: BLE001 - any run failure becomes exit code 1
        traceback.print_exc()
        print(f"vmtl: run failed: {e}", file=sys.stderr)
        return 1
    print(render_report(report), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
