"""Command-line entry point: ``tweetgeo {gen-data,train,eval,ablate}``.

Configuration precedence, lowest to highest: built-in defaults, the file
given by ``--config``, dedicated flags (``--shots``, ``--variant``,
``--seed``, ...), then ``--set key=value`` pairs.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint error, 4 I/O error, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import TrainConfig, load_config
from .data import (
    generate_synthetic_corpus,
    load_corpus_dir,
    split_dataset,
    write_corpus,
)
from .errors import CheckpointError, ConfigError, DataError, TweetGeoError
from .evaluate import compute_metrics, predict
from .model import GeoModel
from .trainer import (
    ABLATION_AXES,
    format_table,
    grid_search,
    learning_rate_note,
    metrics_table,
    rank_rows,
    run_iterations,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4, 5
SPLITS = ("train", "dev", "test")

log = logging.getLogger("tweetgeo")


class UsageError(Exception):
    """Bad command-line input detected after argument parsing."""


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_directory(out: str, digest: str, suffix: str = "") -> Path:
    """Fresh ``<out>/<timestamp>-<digest8><suffix>`` directory."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(out) / f"{stamp}-{digest[:8]}{suffix}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}.{n}")
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path, command: str, argv, config: dict | None, seeds: dict,
                   inputs: dict, outputs: list[str]) -> dict:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {name: {"path": str(Path(p).resolve()), "sha256": file_digest(p)} for name, p in inputs.items()},
        "outputs": outputs,
        "started": _now(),
    }
    _write_json(run_dir / "manifest.json", manifest)
    return manifest


def finish(run_dir: Path, started: float) -> None:
    # the manifest stays untouched once written; completion goes next to it
    _write_json(run_dir / "finished.json", {"ended": _now(), "seconds": round(time.time() - started, 3)})


def parse_sets(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args) -> TrainConfig:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag, key in (("shots", "shots"), ("variant", "variant"), ("iterations", "iterations")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    overrides.update(parse_sets(getattr(args, "set", None)))
    return load_config(args.config, overrides)


def corpus_inputs(data_dir) -> dict:
    data_dir = Path(data_dir)
    paths = {"posts": data_dir / "posts.jsonl", "locations": data_dir / "locations.jsonl"}
    for p in paths.values():
        if not p.is_file():
            raise DataError(f"corpus file not found: {p}")
    return paths


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> int:
    if args.locations < 2:
        raise UsageError("--locations must be at least 2")
    if args.posts < 1:
        raise UsageError("--posts must be at least 1")
    if args.skew < 0:
        raise UsageError("--skew must be non-negative")
    seed = 0 if args.seed is None else args.seed
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    posts, locations = generate_synthetic_corpus(args.locations, args.posts, args.skew, seed)
    posts_path, locations_path = write_corpus(out, posts, locations)
    params = {"locations": args.locations, "posts": args.posts, "skew": args.skew}
    write_manifest(out, "gen-data", argv, params, {"seed": seed},
                   {"posts": posts_path, "locations": locations_path},
                   [str(posts_path), str(locations_path)])
    finish(out, started)
    print(f"wrote {len(posts)} posts over {len(locations)} locations to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    config = resolve_config(args)
    inputs = corpus_inputs(args.data)
    posts, locations = load_corpus_dir(args.data, config.min_count)
    if not locations:
        raise DataError(f"no category in {args.data} has at least {config.min_count} posts")
    started = time.time()
    run_dir = run_directory(args.out, config.digest())
    outputs = [str(run_dir / f"iter{i}.npz") for i in range(config.iterations)]
    outputs += [str(run_dir / "report.json"), str(run_dir / "metrics.tsv")]
    seeds = {"seed": config.seed, "data_seed": config.data_seed,
             "iteration_seeds": list(config.few_shot_spec().seeds)}
    write_manifest(run_dir, "train", argv, config.to_dict(), seeds, inputs, outputs)
    print(learning_rate_note(config))
    if not config.use_tlm:
        print("TLM disabled: contrastive objective only")

    result = run_iterations(config, posts, locations)
    for i, model in enumerate(result.models):
        model.save(run_dir / f"iter{i}.npz")
    report = result.to_dict()
    report["tlm_enabled"] = config.use_tlm
    report["learning_rate_note"] = learning_rate_note(config)
    _write_json(run_dir / "report.json", report)
    table = metrics_table(result)
    (run_dir / "metrics.tsv").write_text(table, encoding="utf-8")
    finish(run_dir, started)
    print(table, end="")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    model = GeoModel.load(args.checkpoint)
    config = model.config
    inputs = corpus_inputs(args.data)
    posts, locations = load_corpus_dir(args.data, config.min_count)
    by_id = {p.id: p for p in posts}
    if args.split == "train":
        missing = [i for i in model.train_ids if i not in by_id]
        if missing:
            raise DataError(f"{len(missing)} training posts of the checkpoint are absent from {args.data}")
        ids = model.train_ids
    else:
        ids = split_dataset(posts, config.data_seed).ids(args.split)
    if not ids:
        raise DataError(f"the {args.split} split is empty")
    chosen = [by_id[i] for i in ids]
    preds = predict(chosen, model, locations)
    metrics = compute_metrics(preds.top1, {p.id: p.location_id for p in chosen}, model.locations)

    started = time.time()
    run_dir = run_directory(args.out, config.digest(), "-eval")
    write_manifest(run_dir, "eval", argv, config.to_dict(), {"seed": config.seed, "data_seed": config.data_seed},
                   {**inputs, "checkpoint": Path(args.checkpoint)}, [str(run_dir / "metrics.json")])
    result = {"split": args.split, **metrics.to_dict()}
    _write_json(run_dir / "metrics.json", result)
    finish(run_dir, started)
    print(f"split\t{args.split}\naccuracy\t{metrics.accuracy:.6f}\nmean_dist\t{metrics.mean_dist:.6f}\n"
          f"med_dist\t{metrics.med_dist:.6f}\ncount\t{metrics.count}")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    config = resolve_config(args)
    axis = ABLATION_AXES[args.axis]
    inputs = corpus_inputs(args.data)
    posts, locations = load_corpus_dir(args.data, config.min_count)
    started = time.time()
    run_dir = run_directory(args.out, config.digest(), f"-ablate-{args.axis}")
    write_manifest(run_dir, "ablate", argv, config.to_dict(),
                   {"seed": config.seed, "data_seed": config.data_seed}, inputs,
                   [str(run_dir / "table.tsv"), str(run_dir / "rows.json")])
    rows = grid_search(config, {args.axis: axis}, posts, locations, jobs=args.jobs)
    ranked = rank_rows(rows)
    table = format_table(ranked)
    (run_dir / "table.tsv").write_text(table, encoding="utf-8")
    _write_json(run_dir / "rows.json", {"axis": args.axis, "rows": [r.to_dict() for r in rows]})
    finish(run_dir, started)
    print(table, end="")
    print(f"run directory: {run_dir}")
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        print(f"{failed} of {len(rows)} cells failed", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key = value config file, a run manifest (.json), or 'default'")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tweetgeo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--config", default="default", help="config file or 'default'")
    parser.add_argument("--out", default="runs", help="output directory (default: runs)")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic long-tailed corpus")
    g.add_argument("--locations", type=int, required=True, help="number of locations K (>= 2)")
    g.add_argument("--posts", type=int, required=True, help="total number of posts")
    g.add_argument("--skew", type=float, default=1.0, help="Zipf exponent of location popularity")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(p):
        p.add_argument("--data", required=True, help="directory with posts.jsonl and locations.jsonl")
        p.add_argument("--shots", type=int, help="training posts per location")
        p.add_argument("--variant", help="architecture variant, e.g. no-tlm or dual-encoder")
        p.add_argument("--iterations", type=int, help="number of few-shot iterations")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")

    t = sub.add_parser("train", parents=[common], help="train over the few-shot iterations")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="directory with posts.jsonl and locations.jsonl")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run one preset ablation axis")
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    a.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, ["tweetgeo"] + argv)
    except (UsageError, ConfigError) as exc:
        print(f"tweetgeo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"tweetgeo {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"tweetgeo {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TweetGeoError as exc:
        print(f"tweetgeo {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
