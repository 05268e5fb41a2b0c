"""Command-line entry point: ``uibrec {prepare,train,eval,analyze,grid}``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import _accel, config as cfgmod, evaluation, scorers, synthetic
from .dataset import DatasetBundle, DatasetError, EvalCandidates, ingest, prepare_bundle
from .presets import ALPHA_GRID
from .training import NumericalError, TrainingDiverged, grid_search, train

_log = logging.getLogger("uibrec")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ENV = "UIBREC_OUTPUT"


class InputError(Exception):
    pass


# -- layout ----------------------------------------------------------------


def output_root(cfg: dict | None, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    if cfg and cfg.get("output"):
        return Path(cfg["output"])
    return Path(os.environ.get(OUTPUT_ENV, "uibrec-out"))


def data_dir(cfg: dict, root: Path) -> Path:
    return root / "data" / f"{cfg['dataset']['name']}-s{cfg['split_seed']}"


def run_group(cfg: dict, root: Path) -> Path:
    return root / "runs" / f"{cfg['model']}-{cfgmod.config_hash(cfg)}"


def env_stamp() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "backend": _accel.backend(), "platform": platform.platform(),
            "time": time.strftime("%Y-%m-%dT%H:%M:%S")}


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        raise InputError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def load_bundle(path: Path) -> DatasetBundle:
    if not (path / "manifest.json").exists():
        raise InputError(f"no prepared dataset at {path}; run `uibrec prepare` first")
    return DatasetBundle.load(path)


def _load_cfg(args) -> dict:
    over = {k: getattr(args, k, None) for k in
            ("lr", "tau", "upsilon", "alpha", "lam", "gamma", "m_neg", "d", "batch_size",
             "epochs", "patience", "model", "preset", "seed", "repeats")}
    return cfgmod.load(args.config, over)


# -- commands --------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _load_cfg(args)
    root = output_root(cfg, args.output)
    dest = data_dir(cfg, root)
    if (dest / "manifest.json").exists() and not args.force:
        raise InputError(f"{dest} already prepared; pass --force to overwrite")
    ds = cfg["dataset"]
    if ds.get("synthetic"):
        sy = ds["synthetic"]
        raw = synthetic.like(sy["profile"], sy.get("seed", 0), sy.get("user_fraction", 1.0),
                             sy.get("item_fraction", 1.0))
        source = {"synthetic": sy}
    elif ds.get("path"):
        raw = ingest(ds["path"], ds["format"], ds.get("min_core"))
        source = {"path": ds["path"], "format": ds["format"]}
    else:
        raise InputError("dataset needs either path/format or synthetic")
    bundle = prepare_bundle(raw, ds["name"], cfg["split_seed"], cfg["eval"]["n_neg"], cfg.get("candidate_seed"))
    bundle.manifest["source"] = source
    bundle.manifest["raw"] = {"users": raw.n_users, "items": raw.n_items, "interactions": raw.n_interactions}
    bundle.save(dest)
    st = bundle.manifest["stats"]
    print(f"{'Dataset':<10}{ds['name']:>12}")
    for key, label in (("users", "#User"), ("items", "#Item"), ("train", "#Train"),
                       ("valid", "#Valid"), ("test", "#Test")):
        print(f"{label:<10}{st[key]:>12,}")
    if st["excluded_users"]:
        print(f"{'excluded':<10}{st['excluded_users']:>12,}  (users with < 3 interactions)")
    print(f"written to {dest}")
    return EXIT_OK


def _train_one(cfg: dict, bundle: DatasetBundle, seed: int, out: Path, ks) -> dict:
    tcfg = cfgmod.train_config(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg, "train_config": tcfg.to_dict(), "seed": seed,
                "dataset": {"name": bundle.name, "checksums": bundle.manifest.get("checksums", {})},
                "environment": env_stamp()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    res = train(tcfg, bundle, history_path=out / "history.jsonl", checkpoint_path=out / "best.ckpt")
    rep = evaluation.evaluate(res.state, bundle.cand_test, ks)
    row = {"model": cfg["model"], "dataset": bundle.name, "seed": seed, "best_epoch": res.best_epoch,
           **rep.mean}
    write_rows(out / "metrics.csv", [row])
    return row


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    root = output_root(cfg, args.output)
    bundle = load_bundle(data_dir(cfg, root))
    group = run_group(cfg, root)
    ks = cfg["eval"]["ks"]
    seeds = [cfg["seed"]] if args.single else [cfg["seed"] + i for i in range(int(cfg["eval"]["repeats"]))]
    rows = []
    for s in seeds:
        try:
            rows.append(_train_one(cfg, bundle, s, group / f"s{s}", ks))
        except TrainingDiverged as exc:
            last = exc.history[-1]["epoch"] if exc.history else 0
            print(f"diverged (seed {s}): {exc}; last completed epoch {last}", file=sys.stderr)
            return EXIT_NUMERIC
        print(" ".join(f"{k}={_fmt(v)}" for k, v in rows[-1].items()))
    write_rows(group / "metrics.csv", rows)
    print(f"runs in {group}")
    return EXIT_OK


def _summary_rows(rows: list[dict], keys) -> list[dict]:
    out = []
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out.append({"metric": k, "mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals)})
    return out


def cmd_eval(args) -> int:
    ks = args.k or [1, 10]
    if args.candidates:
        cpath = Path(args.candidates)
        if not cpath.exists():
            raise InputError(f"candidate file not found: {cpath}")
        cands = EvalCandidates.load(cpath)
    elif args.data:
        cands = load_bundle(Path(args.data)).cand_test
    else:
        raise InputError("pass --candidates or --data")
    if args.runs:
        ckpts = sorted(Path(args.runs).glob("*/best.ckpt"))
        if not ckpts:
            raise InputError(f"no */best.ckpt under {args.runs}")
    else:
        if not args.checkpoint:
            raise InputError("pass --checkpoint or --runs")
        ckpts = [Path(args.checkpoint)]
    rows = []
    for ck in ckpts:
        if not ck.exists():
            raise InputError(f"checkpoint not found: {ck}")
        state = scorers.load_checkpoint(ck)
        rep = evaluation.evaluate(state, cands, ks)
        rows.append({"checkpoint": str(ck), "seed": state.seed, **rep.mean})
    out = Path(args.out) if args.out else ckpts[0].parent if len(ckpts) == 1 else Path(args.runs)
    out.mkdir(parents=True, exist_ok=True)
    metric_keys = [k for k in rows[0] if "@" in k]
    write_rows(out / "eval_metrics.csv", rows)
    summary = _summary_rows(rows, metric_keys)
    write_rows(out / "eval_summary.csv", summary)
    (out / "eval_summary.json").write_text(json.dumps(
        {r["metric"]: {"mean": r["mean"], "std": r["std"], "n": r["n"]} for r in summary},
        indent=2, sort_keys=True) + "\n")
    for r in summary:
        print(f"{r['metric']:<10} {r['mean']:.4f} +- {r['std']:.4f} (n={r['n']})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode
    if mode in ("boundary-sweep", "boundary-dist"):
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise InputError(f"checkpoint not found: {args.checkpoint}")
        state = scorers.load_checkpoint(args.checkpoint)
        if not state.has_boundary:
            raise InputError("checkpoint has no boundary head (train with a UIB loss)")
        if mode == "boundary-sweep":
            if not args.data:
                raise InputError("boundary-sweep needs --data")
            bundle = load_bundle(Path(args.data))
            offsets = args.offsets or list(range(-5, 6))
            rep = evaluation.boundary_sweep(state, bundle.observed(), offsets)
            write_rows(out / "boundary_sweep.csv", rep.rows())
            extra = {"filter_rate": rep.filter_rate if 0 in offsets else None,
                     "best_offset": rep.best_offset()}
            (out / "boundary_sweep.json").write_text(json.dumps(extra, indent=2) + "\n")
            for r in rep.rows():
                print(f"offset {r['offset']:+.1f}  P={r['precision']:.4f} R={r['recall']:.4f} F1={r['f1']:.4f}")
        else:
            dist = evaluation.boundary_distribution(state, args.bins)
            write_rows(out / "boundary_hist.csv", dist.rows())
            write_rows(out / "boundary_values.csv",
                       [{"user": i, "b_u": float(v)} for i, v in enumerate(dist.values)])
            print(f"mean {dist.mean:.4f} std {dist.std:.4f} unimodal={evaluation.is_unimodal(dist.counts)}")
    elif mode == "efficiency":
        if not args.runs:
            raise InputError("efficiency needs --runs <run dir> [...]")
        rows = []
        for rd in args.runs:
            hp = Path(rd) / "history.jsonl"
            if not hp.exists():
                raise InputError(f"no history.jsonl in {rd}")
            for line in hp.read_text().splitlines():
                h = json.loads(line)
                rows.append({"run": str(rd), "epoch": h["epoch"], "corrupted_rate": h["corrupted_rate"],
                             "corrupted_rate_per_comparison": h.get("corrupted_rate_per_comparison")})
        write_rows(out / "efficiency.csv", rows)
        print(f"{len(rows)} epochs written")
    elif mode == "alpha-sweep":
        if not args.config:
            raise InputError("alpha-sweep needs --config")
        cfg = _load_cfg(args)
        bundle = load_bundle(data_dir(cfg, output_root(cfg, args.output)))
        alphas = args.alphas or list(ALPHA_GRID)
        rows = evaluation.alpha_study(cfgmod.train_config(cfg), alphas, bundle)
        write_rows(out / "alpha_sweep.csv", rows)
        for r in rows:
            print(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(mode)
    return EXIT_OK


def _parse_grid(items: list[str]) -> dict[str, list]:
    grids = {}
    for it in items:
        if "=" not in it:
            raise InputError(f"--grid expects key=v1,v2,..., got {it!r}")
        k, vs = it.split("=", 1)
        grids[k] = [json.loads(v) for v in vs.split(",")]
    return grids


def cmd_grid(args) -> int:
    cfg = _load_cfg(args)
    root = output_root(cfg, args.output)
    bundle = load_bundle(data_dir(cfg, root))
    grids = _parse_grid(args.grid or [])
    if not grids:
        raise InputError("pass at least one --grid key=v1,v2")
    out = run_group(cfg, root) / "grid"
    out.mkdir(parents=True, exist_ok=True)
    try:
        best, report = grid_search(cfgmod.train_config(cfg), grids, bundle, out / "grid_report.csv")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    (out / "best.json").write_text(json.dumps(best.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{len(report)} runs; best: " + ", ".join(f"{k}={getattr(best, k)}" for k in grids))
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides (win over the config file)")
    g.add_argument("--model", help="method name, e.g. bpr, bpr-uib, ncf-uib")
    g.add_argument("--preset", help="fill hyperparameters from a dataset preset (ml10m, ml1m, aiv, lastfm)")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--tau", type=float, help="embedding L2 coefficient")
    g.add_argument("--upsilon", type=float, help="LightGCN weight decay")
    g.add_argument("--alpha", type=float, help="negative-term weight of boundary losses")
    g.add_argument("--lam", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--m-neg", dest="m_neg", type=int, help="negatives per positive")
    g.add_argument("-d", "--dim", dest="d", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--repeats", type=int, help="number of seeds")
    p.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./uibrec-out)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uibrec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, split and freeze evaluation candidates")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="overwrite prepared data")
    _add_overrides(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per seed with early stopping")
    p.add_argument("config")
    p.add_argument("--single", action="store_true", help="train only the configured seed")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank metrics for checkpoints over frozen candidates")
    p.add_argument("--checkpoint")
    p.add_argument("--runs", help="directory of per-seed run folders")
    p.add_argument("--candidates", help="candidate file")
    p.add_argument("--data", help="prepared dataset directory (uses its test candidates)")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="boundary and efficiency analyses as CSV")
    p.add_argument("mode", choices=["boundary-sweep", "boundary-dist", "efficiency", "alpha-sweep"])
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--config")
    p.add_argument("--offsets", type=float, nargs="+")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--out", default=".")
    _add_overrides(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grid", help="exhaustive hyperparameter grid search")
    p.add_argument("config")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="repeatable")
    _add_overrides(p)
    p.set_defaults(func=cmd_grid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, cfgmod.ConfigError, DatasetError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
