"""Command-line entry point: ``gen-data``, ``train``, ``eval`` and ``report``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import config as cfg
from .dataset import generate_synthetic, load_dataset, save_dataset
from .retrieval import HashedBowEmbedder
from .reward import HttpJudge, SyntheticJudge
from .trainer import Environment, evaluate, read_metrics_csv, train, write_metrics_csv

logger = logging.getLogger("rar_forge")

SERIES_COLUMNS = ("step", "mean_reward", "mean_response_len", "mean_retrievals")
COMPARISON_COLUMNS = (
    "run",
    "steps",
    "final_mean_reward",
    "final_baseline_reward",
    "final_mean_retrievals",
    "final_mean_response_len",
)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parser


def _add_option(parser: argparse.ArgumentParser, option: cfg.Option) -> None:
    flag = f"--{option.name}"
    dest = option.name
    if option.flag:
        parser.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=option.help)
    else:
        parser.add_argument(flag, dest=dest, type=option.parse, default=None, metavar=option.name.upper(), help=option.help)


def _add_run_options(parser: argparse.ArgumentParser, names: Sequence[str] | None = None) -> None:
    parser.add_argument("--config", dest="config_file", default=None, help="flat key = value config file")
    parser.add_argument("--preset", default=None, help="named preset, e.g. paper-parity")
    for option in cfg.OPTIONS:
        if names is None or option.name in names:
            _add_option(parser, option)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rar-forge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic world as JSONL")
    gen.add_argument("--out", required=True, help="output JSONL path")
    gen.add_argument("--seed", type=int, default=None, help=f"world seed (falls back to ${cfg.SEED_ENV}, then 0)")
    for name in ("users", "attributes-per-user", "distractors", "aspects"):
        _add_option(gen, cfg.OPTION_BY_NAME[name])

    tr = sub.add_parser("train", help="train and write metrics.csv, params.npz, config.resolved")
    tr.add_argument("--out-dir", required=True)
    _add_run_options(tr)

    ev = sub.add_parser("eval", help="evaluate saved params and write summary.json")
    ev.add_argument("--params", required=True, help="params.npz written by train")
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    _add_run_options(ev)

    rep = sub.add_parser("report", help="aggregate metrics CSVs into a comparison table and series")
    rep.add_argument("metrics", nargs="+", help="metrics.csv files")
    rep.add_argument("--labels", default=None, help="comma-separated run labels (default: parent directory names)")
    rep.add_argument("--window", type=int, default=20, help="trailing steps averaged into the final columns")
    rep.add_argument("--out-dir", required=True)
    return parser


# ------------------------------------------------------------------ helpers


def _resolve(args: argparse.Namespace) -> dict[str, Any]:
    flags = {o.name: getattr(args, o.name, None) for o in cfg.OPTIONS}
    values = cfg.resolve(flags, args.config_file, args.preset)
    synthetic_given = [k for k in cfg.SYNTHETIC_KEYS if flags.get(k) is not None]
    if values["data"] is not None and synthetic_given:
        raise UsageError(f"--data excludes synthetic-world options ({', '.join('--' + k for k in synthetic_given)})")
    for key in ("steps", "group-size", "topk", "workers", "embed-dim"):
        if values[key] < 1:
            raise UsageError(f"--{key} must be positive")
    if values["eval-every"] < 0:
        raise UsageError("--eval-every must be a positive integer (0 disables)")
    if values["topk-sweep"] is not None and (not values["topk-sweep"] or min(values["topk-sweep"]) < 1):
        raise UsageError("--topk-sweep needs positive integers")
    if values["no-baseline-rollout"]:
        values["no-baseline"] = True
    return values


def _dataset(values: dict[str, Any]):
    if values["data"] is not None:
        return load_dataset(values["data"])
    return generate_synthetic(cfg.world_config(values))


def _environment(values: dict[str, Any], instances, query_terms=None) -> Environment:
    judge_spec = values["judge"]
    judge = SyntheticJudge() if judge_spec == "synthetic" else HttpJudge(judge_spec)
    return Environment(
        instances,
        query_terms=query_terms,
        protocol=cfg.protocol_config(values),
        embedder=HashedBowEmbedder(values["embed-dim"]),
        judge=judge,
    )


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _final(rows, column: str, window: int) -> float:
    tail = rows[-window:]
    return float(np.mean([getattr(r, column) for r in tail])) if tail else 0.0


# ------------------------------------------------------------------ commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    values = cfg.resolve({o.name: getattr(args, o.name, None) for o in cfg.OPTIONS if hasattr(args, o.name)})
    values["world-seed"] = values["seed"]
    instances = generate_synthetic(cfg.world_config(values))
    save_dataset(instances, args.out)
    print(f"wrote {len(instances)} instances to {args.out}")
    return 0


def _train_one(values: dict[str, Any], instances, out_dir: Path, top_k: int) -> dict[str, Any]:
    out_dir.mkdir(parents=True, exist_ok=True)
    grpo = cfg.grpo_config(values, top_k)
    env = _environment(values, instances)
    seed = values["seed"]
    eval_rows: list[dict[str, Any]] = []
    every = values["eval-every"]

    def on_step(step, groups, row, params):
        if every and (step + 1) % every == 0:
            eval_rows.append({"step": step, **evaluate(instances, params, grpo, seed, env=env)})

    params, metrics = train(instances, grpo, seed, env=env, workers=values["workers"], on_step=on_step)
    write_metrics_csv(metrics, out_dir / "metrics.csv")
    np.savez(
        out_dir / "params.npz",
        theta=params,
        query_terms=np.array(env.vocab.query_terms, dtype=str),
        max_search_turns=np.array(env.protocol.max_search_turns),
    )
    if eval_rows:
        with open(out_dir / "eval.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(eval_rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(eval_rows)
    resolved = dict(values, topk=top_k, **{"topk-sweep": None})
    (out_dir / "config.resolved").write_text(cfg.format_resolved(resolved), encoding="utf-8")
    return {
        "topk": top_k,
        "steps": len(metrics),
        "final_mean_reward": _final(metrics, "mean_reward", 20),
        "final_mean_retrievals": _final(metrics, "mean_retrievals", 20),
        "final_mean_response_len": _final(metrics, "mean_response_len", 20),
    }


def cmd_train(args: argparse.Namespace) -> int:
    values = _resolve(args)
    instances = _dataset(values)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = values["topk-sweep"]
    if sweep is None:
        row = _train_one(values, instances, out_dir, values["topk"])
        print(json.dumps(row, sort_keys=True))
        return 0
    rows = [_train_one(values, instances, out_dir / f"topk-{k}", k) for k in sweep]
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (out_dir / "config.resolved").write_text(cfg.format_resolved(values), encoding="utf-8")
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def load_params(path: str | Path) -> tuple[np.ndarray, list[str], int]:
    with np.load(path, allow_pickle=False) as data:
        return data["theta"], [str(t) for t in data["query_terms"]], int(data["max_search_turns"])


def cmd_eval(args: argparse.Namespace) -> int:
    values = _resolve(args)
    theta, query_terms, max_turns = load_params(args.params)
    if max_turns != values["max-search-turns"]:
        raise UsageError(f"params were trained with --max-search-turns {max_turns}")
    instances = _dataset(values)
    env = _environment(values, instances, query_terms=query_terms)
    if theta.shape != (len(env.vocab), env.features.dimension):
        raise ValueError(f"params shape {theta.shape} does not match this action space")
    summary = evaluate(instances, theta, cfg.grpo_config(values), values["seed"], env=env, greedy=args.greedy)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.metrics]
    if args.labels is not None:
        labels = [s.strip() for s in args.labels.split(",")]
        if len(labels) != len(paths):
            raise UsageError("--labels needs one label per metrics file")
    else:
        labels = [p.parent.name or p.stem for p in paths]
        if len(set(labels)) != len(labels):
            labels = [str(p) for p in paths]
    if args.window < 1:
        raise UsageError("--window must be positive")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for label, path in zip(labels, paths):
        rows = read_metrics_csv(path)
        table.append(
            {
                "run": label,
                "steps": len(rows),
                "final_mean_reward": _final(rows, "mean_reward", args.window),
                "final_baseline_reward": _final(rows, "baseline_reward", args.window),
                "final_mean_retrievals": _final(rows, "mean_retrievals", args.window),
                "final_mean_response_len": _final(rows, "mean_response_len", args.window),
            }
        )
        # series are copied as text so a single run passes through unchanged
        with open(path, newline="", encoding="utf-8") as src, open(
            out_dir / f"series-{label.replace('/', '_')}.csv", "w", newline="", encoding="utf-8"
        ) as dst:
            reader = csv.DictReader(src)
            writer = csv.writer(dst, lineterminator="\n")
            writer.writerow(SERIES_COLUMNS)
            for record in reader:
                writer.writerow([record[c] for c in SERIES_COLUMNS])

    with open(out_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    width = max(len(r["run"]) for r in table)
    print(f"{'run':<{width}}  steps  reward  baseline  retrievals  length")
    for r in table:
        print(
            f"{r['run']:<{width}}  {r['steps']:>5}  {r['final_mean_reward']:.4f}  {r['final_baseline_reward']:.4f}"
            f"    {r['final_mean_retrievals']:>10.3f}  {r['final_mean_response_len']:.2f}"
        )
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfg.ConfigError) as exc:
        print(f"rar-forge: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"rar-forge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
