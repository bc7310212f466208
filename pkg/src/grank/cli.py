"""Command-line entry point.

Settings resolve as defaults < ``--config`` file < explicit flags.  For
commands that read a checkpoint, its saved configuration replaces the
defaults, so the architecture always matches the stored weights.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, Config, load_config, parse_config_text
from .errors import GRankError

log = logging.getLogger("grank")

MODE_WEIGHTS = {
    "pure_generator": {"trainer.lambda1": 0.0, "trainer.lambda2": 0.0},
    "gen_sa": {"trainer.lambda2": 0.0},
    "gen_ca": {"trainer.lambda1": 0.0},
    "full": {},
}


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# -- settings ----------------------------------------------------------------


def _flag_overrides(args) -> dict:
    pairs = {
        "serving.k1": getattr(args, "k1", None),
        "serving.k2": getattr(args, "k2", None),
        "serving.mode": getattr(args, "mode", None),
        "generator.d_top": getattr(args, "d_top", None),
        "trainer.precision": getattr(args, "precision", None),
        "trainer.seed": getattr(args, "seed", None),
        "trainer.epochs": getattr(args, "epochs", None),
        "trainer.max_steps": getattr(args, "max_steps", None),
        "trainer.batch_size": getattr(args, "batch_size", None),
        "ranker.long_len": getattr(args, "long_len", None),
    }
    if getattr(args, "quantized", False):
        pairs["serving.quantized"] = True
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    return {k: v for k, v in pairs.items() if v is not None}


def resolve_config(args, base: Config | None = None) -> Config:
    """``base`` (defaults or a checkpoint's config) < config file < flags."""
    cfg = base if base is not None else Config()
    if getattr(args, "config", None):
        cfg.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    cfg.update(_flag_overrides(args))
    return cfg


def _load(args):
    from .checkpoint import load_model, read_checkpoint
    from .numeric import set_precision

    cfg = resolve_config(args, read_checkpoint(args.checkpoint).config)
    set_precision(cfg.trainer.precision)
    arch = {k: v for k, v in cfg.items() if k.startswith(("generator.", "ranker."))}
    model, _ = load_model(args.checkpoint, arch)
    model.cfg.serving = cfg.serving
    return model, cfg


def _index_for(args, model):
    from .mips import build_index, load_index

    if getattr(args, "index", None):
        index = load_index(args.index)
        if model.cfg.serving.quantized and index.quantized is None:
            index.quantize()
        return index
    return build_index(model, quantize=model.cfg.serving.quantized)


def _split(args, cfg):
    from .data import chronological_split, load_dataset

    return chronological_split(load_dataset(args.data))


def _beside(args, name: str) -> Path:
    out = getattr(args, "out", None)
    return Path(out) if out else Path(args.checkpoint).with_name(name)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import synth_generate, write_dataset

    cfg = resolve_config(args)
    dc = cfg.data
    for name in ("n_items", "n_users", "n_topics", "seq_len"):
        if getattr(args, name) is not None:
            setattr(dc, name, getattr(args, name))
    seed = args.seed if args.seed is not None else dc.seed
    ds = synth_generate(seed, dc.n_items, dc.n_users, dc.n_topics, dc.seq_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} users, {ds.n_items} items to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train_loop

    cfg = resolve_config(args)
    if args.mode:
        cfg.update(MODE_WEIGHTS[args.mode])
    train, _ = _split(args, cfg)
    result = train_loop(train, cfg, run_dir=args.out, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.step} steps; last losses: " + ", ".join(
        f"{k}={v:.4f}" for k, v in last.items() if k in ("total", "ntp", "sa", "ca") and v is not None))
    if result.last_checkpoint:
        print(f"checkpoint: {result.last_checkpoint}")
    return 0


def cmd_build_index(args) -> int:
    from .mips import build_index, save_index

    model, cfg = _load(args)
    index = build_index(model, quantize=args.quantize, bits=args.bits)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".gidx")
    save_index(index, out)
    print(f"wrote index of {len(index)} x {index.d} to {out}" + (f" with {args.bits}-bit codes" if args.quantize else ""))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    model, cfg = _load(args)
    _, test = _split(args, cfg)
    users = test.users[: args.users] if args.users else test.users
    index = _index_for(args, model)
    ks = tuple(_ints(args.ks))
    result = evaluate(model, index, users, ks=ks, long_len=args.long_len, fingerprint=cfg.fingerprint())
    rows = result.rows()
    print(f"mode={cfg.serving.mode} k1={cfg.serving.k1} k2={cfg.serving.k2} users={result.users} "
          f"contained={result.contained}/{result.users}")
    print(f"{'stage':8s} {'K':>6s} {'recall':>8s} {'ndcg':>8s}")
    for r in rows:
        print(f"{r['stage']:8s} {r['k']:6d} {r['recall']:8.4f} {r['ndcg']:8.4f}")
    out = _beside(args, "eval.json")
    doc = {"fingerprint": cfg.fingerprint(), "mode": cfg.serving.mode, "k1": cfg.serving.k1, "k2": cfg.serving.k2,
           "users": result.users, "contained": result.contained, "fallbacks": result.fallbacks, "rows": rows}
    out.write_text(json.dumps(doc, indent=2))
    _write_rows(rows, out.with_suffix(".csv"))
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


def _write_rows(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["stage"])
        w.writeheader()
        w.writerows(rows)


def cmd_retrieve(args) -> int:
    from .data import load_dataset, parse_interactions
    from .serving import Retriever

    model, cfg = _load(args)
    index = _index_for(args, model)
    if args.stdin:
        user = parse_interactions(sys.stdin.read(), model.n_items)
        if model.demographics_width:
            user.demographics = np.zeros(model.demographics_width)
    else:
        if args.user is None or not args.data:
            raise SystemExit("retrieve needs --user with --data, or --stdin")
        users = load_dataset(args.data).by_id()
        if args.user not in users:
            raise SystemExit(f"user {args.user} not in {args.data}")
        user = users[args.user]
        user = type(user)(user.user_id, user.items, user.timestamps, user.dwell, user.engagement, -1, 0,
                          demographics=user.demographics)
    res = Retriever(model, index).retrieve(user, long_len=args.long_len)
    shown = res.pairs()[: args.top]
    print(json.dumps({"ids": [i for i, _ in shown], "scores": [round(s, 6) for _, s in shown],
                      "timings_us": res.timings, "fallback": res.fallback}))
    return 0


def cmd_bench(args) -> int:
    from .serving import Retriever, bench, validate_report, write_histogram

    model, cfg = _load(args)
    _, test = _split(args, cfg)
    index = _index_for(args, model)
    ret = Retriever(model, index)
    report, samples = bench(ret, test.users, requests=args.requests, concurrency=args.concurrency, warmup=args.warmup,
                            seed=cfg.trainer.seed, duration_s=args.duration, long_len=args.long_len)
    doc = report.as_dict()
    validate_report(doc)
    print(report.to_json())
    out = _beside(args, "bench.json")
    out.write_text(report.to_json())
    if args.histogram:
        write_histogram(samples, args.histogram)
    return 0


def cmd_sweep(args) -> int:
    from .sweep import sweep, write_csv

    model, cfg = _load(args)
    train, test = _split(args, cfg)
    rows = sweep(args.axis, _ints(args.values), model, test, ks=tuple(_ints(args.ks)), train=train,
                 bench_requests=args.requests, eval_users=args.users)
    flat = [r.flat() for r in rows]
    cols = list(flat[0]) if flat else []
    print("  ".join(f"{c:>14s}" for c in cols))
    for row in flat:
        print("  ".join(f"{v:>14.4f}" if isinstance(v, float) else f"{str(v):>14s}" for v in row.values()))
    out = _beside(args, f"sweep_{args.axis}.csv")
    write_csv(rows, out)
    out.with_suffix(".json").write_text(json.dumps(flat, indent=2))
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (overrides defaults)")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("32", "64"))
    common.add_argument("--k1", type=int)
    common.add_argument("--k2", type=int)
    common.add_argument("--d-top", type=int, dest="d_top")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key, repeatable")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="grank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic interaction log")
    p.add_argument("--out", required=True)
    p.add_argument("--n-items", type=int, dest="n_items")
    p.add_argument("--n-users", type=int, dest="n_users")
    p.add_argument("--n-topics", type=int, dest="n_topics")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train on the chronological train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.jsonl")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--long-len", type=int, dest="long_len")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", parents=[common], help="export item vectors as a GIDX index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--bits", type=int, default=8)
    p.set_defaults(func=cmd_build_index)

    for name, func, text in (("eval", cmd_eval, "Recall/NDCG of both stages on the test split"),
                             ("bench", cmd_bench, "closed-loop latency/throughput benchmark"),
                             ("sweep", cmd_sweep, "evaluate across long_len, k1 or d_top"),
                             ("retrieve", cmd_retrieve, "serve one request")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=name != "retrieve")
        p.add_argument("--index")
        p.add_argument("--quantized", action="store_true", help="scan quantized codes in stage 1")
        p.add_argument("--long-len", type=int, dest="long_len")
        p.add_argument("--out", help="output file (default: beside the checkpoint)")
        p.set_defaults(func=func)
        if name in ("eval", "sweep"):
            p.add_argument("--ks", default="50,500")
            p.add_argument("--users", type=int, help="evaluate only the first N test users")
        if name == "bench":
            p.add_argument("--requests", type=int, default=200)
            p.add_argument("--concurrency", type=int, default=1)
            p.add_argument("--warmup", type=int, default=10)
            p.add_argument("--duration", type=float)
            p.add_argument("--histogram", help="CSV latency histogram path")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=("long_len", "k1", "d_top"))
            p.add_argument("--values", required=True, help="comma-separated")
            p.add_argument("--requests", type=int, default=50)
        if name == "retrieve":
            p.add_argument("--user", type=int)
            p.add_argument("--stdin", action="store_true", help="read item_id/timestamp/dwell/engagement TSV")
            p.add_argument("--top", type=int, default=20)

    p = sub.add_parser("verify", parents=[common], help="equivalence, gradient and leakage self-checks")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except GRankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
